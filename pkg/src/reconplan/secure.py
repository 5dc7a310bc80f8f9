"""Secure action/state sets, closed-form thresholds and the safety-bound certificate."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .cmdp import Cmdp, DimensionError, Policy, argmin_lowest, occupancy
from .threat import ThreatTable, threat_for_mode

CERT_SLACK = 1e-12


def tv_distance(p, q) -> float:
    """Total variation distance ``0.5 * sum |p - q|``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DimensionError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(0.5 * np.abs(p - q).sum())


def secure_threshold(c: float, beta: float, horizon: int) -> float:
    """Per-step threshold that makes every pool member safe at budget ``c``.

    ``c / (1 + beta + ... + beta^(T-1))``.  ``beta = 1`` is accepted here for
    analysis even though CMDPs themselves need ``beta < 1``.
    """
    if c < 0:
        raise ValueError("budget c must be non-negative")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    tail = sum(beta**t for t in range(1, horizon))
    return c / (1.0 + tail)


def accident_threshold(c: float, horizon: int, z: float = 1.0) -> float:
    """Threshold for accident-probability budgets: ``c / (1 + (T - 1) z)``.

    ``z`` caps the total-variation gap between the planner and the baseline on
    secure states; ``z = 1`` is the unconditional choice.
    """
    if not 0.0 <= c <= 1.0:
        raise ValueError("accident budget c must lie in [0, 1]")
    if not 0.0 <= z <= 1.0:
        raise ValueError("z must lie in [0, 1]")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return c / (1.0 + (horizon - 1) * z)


@dataclass(frozen=True, eq=False)
class SecureSet:
    thresholds: np.ndarray  # (T,)
    secure_actions: np.ndarray  # (S, A) bool
    secure_states: np.ndarray  # (S,) bool
    fallback: np.ndarray  # (T, S) int

    @property
    def n_states(self) -> int:
        return self.secure_actions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.secure_actions.shape[1]

    def actions(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.secure_actions[s])

    def to_csv(self, path: str | Path) -> None:
        T = self.fallback.shape[0]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["s", "action_bitmask", "is_secure"] + [f"fallback_t{t}" for t in range(T)])
            for s in range(self.n_states):
                mask = "".join("1" if b else "0" for b in self.secure_actions[s])
                writer.writerow([s, mask, int(self.secure_states[s])] + self.fallback[:, s].tolist())


def _threshold_vector(x, horizon: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = np.full(horizon, float(x))
    if x.shape != (horizon,):
        raise DimensionError(f"threshold vector must have length {horizon}, got {x.shape}")
    if np.any(x < 0):
        raise ValueError("thresholds must be non-negative")
    return x


def build_secure_set(threat: ThreatTable, x) -> SecureSet:
    """Actions whose threat stays within ``x_t`` at every ``t``, plus fallbacks."""
    values = threat.values
    x = _threshold_vector(x, values.shape[0])
    secure_actions = np.all(values <= x[:, None, None], axis=0)
    return SecureSet(
        thresholds=x,
        secure_actions=secure_actions,
        secure_states=secure_actions.any(axis=1),
        fallback=argmin_lowest(values),
    )


@dataclass(frozen=True)
class Violation:
    t: int
    s: int
    a: int
    reason: str


@dataclass(frozen=True)
class MembershipReport:
    member: bool
    violations: tuple[Violation, ...] = ()

    def __bool__(self) -> bool:
        return self.member


def is_member(policy: Policy, secure: SecureSet, threat: ThreatTable | None = None) -> MembershipReport:
    """Membership in the pool: secure actions on secure states, fallback elsewhere.

    ``threat`` is only used for a dimension check; the fallbacks stored in
    ``secure`` are what non-secure states must follow.
    """
    T, S, A = policy.probs.shape
    if (S, A) != secure.secure_actions.shape or T != secure.fallback.shape[0]:
        raise DimensionError("policy and secure set dimensions differ")
    if threat is not None and threat.values.shape != policy.probs.shape:
        raise DimensionError("policy and threat table dimensions differ")
    violations = []
    support = policy.probs > 0
    for t, s, a in np.argwhere(support):
        if secure.secure_states[s]:
            if not secure.secure_actions[s, a]:
                violations.append(Violation(int(t), int(s), int(a), "insecure action on secure state"))
        elif a != secure.fallback[t, s]:
            violations.append(Violation(int(t), int(s), int(a), "non-fallback action on non-secure state"))
    return MembershipReport(not violations, tuple(violations))


def random_member(secure: SecureSet, rng: np.random.Generator, deterministic: bool = False) -> Policy:
    """Draw a random policy from the pool (used by property tests and sweeps)."""
    T = secure.fallback.shape[0]
    S, A = secure.secure_actions.shape
    probs = np.zeros((T, S, A))
    for t in range(T):
        for s in range(S):
            if not secure.secure_states[s]:
                probs[t, s, secure.fallback[t, s]] = 1.0
                continue
            allowed = secure.actions(s)
            if deterministic:
                probs[t, s, rng.choice(allowed)] = 1.0
            else:
                chosen = allowed[rng.random(allowed.size) < 0.7]
                if chosen.size == 0:
                    chosen = allowed[[rng.integers(allowed.size)]]
                probs[t, s, chosen] = rng.dirichlet(np.ones(chosen.size))
    return Policy(probs)


@dataclass(frozen=True)
class BoundCertificate:
    lhs: float
    rhs: float
    z_terms: tuple[float, ...]
    holds: bool
    s0: int

    @property
    def gap(self) -> float:
        return self.rhs - self.lhs

    def to_json(self) -> str:
        return json.dumps(asdict(self))


class CertificateRefused(ValueError):
    """The inputs fall outside the bound's hypothesis; no certificate is issued."""

    def __init__(self, problems: Sequence[str]):
        super().__init__("certificate preconditions violated:\n  " + "\n  ".join(problems))
        self.problems = tuple(problems)


def certificate_preconditions(
    cmdp: Cmdp,
    eta: Policy,
    pi: Policy,
    secure: SecureSet,
    threat_eta: ThreatTable,
    s0: int,
    tol: float = 1e-12,
) -> list[str]:
    """List every way ``(eta, pi, secure)`` fails the bound's hypothesis at ``s0``."""
    problems = []
    values = threat_eta.values
    for t, s, a in np.argwhere(pi.probs > 0):
        if secure.secure_states[s] and not secure.secure_actions[s, a]:
            problems.append(f"pi_{t}(.|{s}) puts mass on insecure action {a}")
    insecure = np.flatnonzero(~secure.secure_states)
    if insecure.size:
        pi_exp = np.einsum("tsa,tsa->ts", pi.probs[:, insecure], values[:, insecure])
        eta_exp = np.einsum("tsa,tsa->ts", eta.probs[:, insecure], values[:, insecure])
        for t, j in np.argwhere(pi_exp > eta_exp + tol):
            problems.append(
                f"at non-secure state {insecure[j]}, t={t}: pi's expected baseline threat "
                f"{pi_exp[t, j]:.6g} exceeds eta's {eta_exp[t, j]:.6g}"
            )
    x0 = secure.thresholds[0]
    for a in np.flatnonzero(pi.probs[0, s0] > 0):
        if values[0, s0, a] > x0 + tol:
            problems.append(f"baseline threat {values[0, s0, a]:.6g} of action {a} at s0={s0} exceeds x_0={x0:.6g}")
    return problems


def certify_bound(
    cmdp: Cmdp,
    eta: Policy,
    pi: Policy,
    secure: SecureSet,
    threat_eta: ThreatTable,
    s0: int | None = None,
) -> BoundCertificate:
    """Evaluate both sides of the policy-deviation bound exactly.

    ``lhs`` is the threat of ``pi`` at ``s0``; ``rhs`` is
    ``x_0 + sum_{t>=1} b^t x_t E_pi[z_t | s0]`` where ``z_t`` is the expected
    total-variation gap between ``pi`` and ``eta`` on secure states at time
    ``t``.  ``b`` is ``beta`` for discounted danger and 1 for accident
    probabilities.  Raises :class:`CertificateRefused` outside the hypothesis.
    """
    for pol in (eta, pi):
        pol.check_compatible(cmdp)
    if threat_eta.values.shape != eta.probs.shape:
        raise DimensionError("threat table does not match the baseline policy")
    if s0 is None:
        support = np.flatnonzero(cmdp.initial > 0)
        if support.size != 1:
            raise ValueError("initial distribution has several states; pass s0 explicitly")
        s0 = int(support[0])
    problems = certificate_preconditions(cmdp, eta, pi, secure, threat_eta, s0)
    if problems:
        raise CertificateRefused(problems)

    threat_pi = threat_for_mode(cmdp, pi, threat_eta.mode)
    lhs = float(pi.probs[0, s0] @ threat_pi.values[0, s0])

    start = np.zeros(cmdp.n_states)
    start[s0] = 1.0
    mu = occupancy(cmdp, pi, start)
    tv = 0.5 * np.abs(pi.probs - eta.probs).sum(axis=2)  # (T, S)
    T = cmdp.horizon
    z = [float(mu[t] @ (secure.secure_states * tv[t])) for t in range(1, T)]
    b = cmdp.beta if threat_eta.mode == "discounted-danger" else 1.0
    x = secure.thresholds
    rhs = float(x[0] + sum(b**t * x[t] * z[t - 1] for t in range(1, T)))
    return BoundCertificate(lhs=lhs, rhs=rhs, z_terms=tuple(z), holds=lhs <= rhs + CERT_SLACK, s0=s0)


def compose_threats(
    tables: Sequence[ThreatTable],
    sub_states: Sequence[int],
    t: int,
    action: int | None = None,
):
    """Union-bound surrogate for the joint accident threat.

    ``tables[n]`` is the accident threat of the subsystem holding the agent and
    obstacle ``n`` and ``sub_states[n]`` the current state of that subsystem.
    Returns the per-action sum clipped at 1 (or one action's value).
    """
    if len(tables) != len(sub_states):
        raise DimensionError("one subsystem state is needed per table")
    for table in tables:
        if table.mode != "accident-probability":
            raise ValueError("threat composition is only valid for accident-probability tables")
    if not tables:
        return 0.0  # broadcasts against per-action arrays
    total = np.zeros(tables[0].n_actions)
    for table, s in zip(tables, sub_states):
        total = total + table.values[t, s]
    total = np.minimum(total, 1.0)
    return float(total[action]) if action is not None else total


__all__ = [
    "BoundCertificate",
    "CertificateRefused",
    "MembershipReport",
    "SecureSet",
    "Violation",
    "accident_threshold",
    "build_secure_set",
    "certificate_preconditions",
    "certify_bound",
    "compose_threats",
    "is_member",
    "random_member",
    "secure_threshold",
    "tv_distance",
]
