"""Reconnaissance-and-planning for safety-constrained finite-horizon MDPs.

Find a danger-minimizing baseline policy, tabulate its threat function, keep
only actions whose threat stays under a closed-form threshold, and plan for
reward inside that secure action set.
"""

from .cmdp import (
    Cmdp,
    DimensionError,
    InvalidCmdpError,
    Policy,
    SafetySpec,
    Trajectory,
    backward_optimal,
    episode_rng,
    exact_return,
    occupancy,
    simulate,
    simulate_many,
    validate,
)
from .planner import Pmdp, PmdpError, RpResult, build_pmdp, rp_solve, solve_pmdp
from .secure import (
    BoundCertificate,
    CertificateRefused,
    SecureSet,
    accident_threshold,
    build_secure_set,
    certify_bound,
    compose_threats,
    is_member,
    secure_threshold,
    tv_distance,
)
from .threat import (
    ThreatTable,
    compute_accident_threat,
    compute_threat,
    min_threat_policy,
    monte_carlo_threat,
)

__version__ = "0.1.0"
