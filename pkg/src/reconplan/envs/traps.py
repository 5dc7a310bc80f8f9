"""Hand-built instance where danger hides beyond a short lookahead."""

from __future__ import annotations

import numpy as np

from ..cmdp import Cmdp


def deep_trap(
    trap_depth: int = 3,
    horizon: int = 6,
    lure: float = 1.0,
    safe_reward: float = 0.5,
    slip: float = 0.0,
    beta: float = 0.9,
) -> Cmdp:
    """A corridor with a tempting side branch that ends in a certain crash.

    State 0 is the start.  Action 0 follows a safe lane (states ``1``), action
    1 enters the trap chain ``2 .. 2 + trap_depth - 1``.  Every step in the
    chain pays ``lure`` and is harmless until its last state, where every
    action crashes.  The crash is the ``trap_depth + 1``-th action counted from
    the start, so a lookahead of ``trap_depth`` steps or fewer sees only the
    reward.  With ``slip > 0`` the
    lane action occasionally stays at the start.
    """
    if trap_depth < 1 or horizon <= trap_depth:
        raise ValueError("need 1 <= trap_depth < horizon")
    S, A = 2 + trap_depth, 2
    lane = 1
    P = np.zeros((S, A, S))
    reward = np.zeros((S, A))
    danger = np.zeros((S, A))
    P[0, 0, lane] = 1.0 - slip
    P[0, 0, 0] += slip
    P[0, 1, 2] = 1.0
    reward[0, 0] = safe_reward
    reward[0, 1] = lure
    P[lane, :, lane] = 1.0
    reward[lane, :] = safe_reward
    for k in range(trap_depth):
        s = 2 + k
        nxt = s + 1 if k + 1 < trap_depth else s
        P[s, :, nxt] = 1.0
        reward[s, :] = lure
        if k + 1 == trap_depth:
            danger[s, :] = 1.0
    initial = np.zeros(S)
    initial[0] = 1.0
    return Cmdp(P, reward, danger, initial, horizon, gamma=1.0, beta=beta)
