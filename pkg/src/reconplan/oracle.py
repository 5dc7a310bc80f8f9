"""Brute-force ground truth by exhaustive trajectory enumeration.

Nothing here aggregates by state: every trajectory suffix is its own row, so
the results are independent of the dynamic-programming code they check.
Expansion is breadth-first over time; branches whose probability falls below
``prune`` are dropped and their mass is reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cmdp import Cmdp, Mode, Policy

DEFAULT_BUDGET = 10**7
DEFAULT_PRUNE = 1e-15


class EnumerationBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class EnumerationResult:
    value: float
    n_trajectories: int
    mass_check: float
    pruned_mass: float = 0.0


@dataclass(frozen=True, eq=False)
class PathSet:
    """All enumerated trajectory pieces starting at ``start_time``."""

    start_time: int
    states: np.ndarray  # (n, steps + 1) -- last column is s_T
    actions: np.ndarray  # (n, steps)
    probs: np.ndarray  # (n,)
    pruned_mass: float


def enumerate_paths(
    cmdp: Cmdp,
    policy: Policy,
    start_time: int = 0,
    start_state: int | None = None,
    start_action: int | None = None,
    budget: int = DEFAULT_BUDGET,
    prune: float = DEFAULT_PRUNE,
) -> PathSet:
    """Enumerate every ``(s_t, a_t, ..., s_T)`` continuation with its probability.

    Without ``start_state`` the first state is drawn from ``cmdp.initial``;
    without ``start_action`` the first action is drawn from the policy.
    """
    policy.check_compatible(cmdp)
    T = cmdp.horizon
    if not 0 <= start_time < T:
        raise ValueError(f"start_time must lie in [0, {T})")
    P = cmdp.dense_transition()
    pruned = 0.0

    if start_state is None:
        states0 = np.flatnonzero(cmdp.initial > 0)
        probs = cmdp.initial[states0].copy()
    else:
        states0 = np.array([start_state])
        probs = np.ones(1)
    hist_s = states0[:, None]
    if start_action is None:
        joint = probs[:, None] * policy.probs[start_time, states0]
        rows, acts = np.nonzero(joint > 0)
        keep = joint[rows, acts] >= prune
        pruned += float(joint[rows, acts][~keep].sum())
        rows, acts = rows[keep], acts[keep]
        hist_s = hist_s[rows]
        hist_a = acts[:, None]
        probs = joint[rows, acts]
    else:
        hist_a = np.full((1, 1), start_action)

    for k in range(start_time, T):
        s, a = hist_s[:, -1], hist_a[:, -1]
        nxt = probs[:, None] * P[s, a]  # (n, S)
        if k + 1 == T:
            rows, s2 = np.nonzero(nxt > 0)
            w = nxt[rows, s2]
            keep = w >= prune
            pruned += float(w[~keep].sum())
            rows, s2, w = rows[keep], s2[keep], w[keep]
            hist_s = np.column_stack([hist_s[rows], s2])
            hist_a = hist_a[rows]
            probs = w
            break
        joint = nxt[:, :, None] * policy.probs[k + 1][None, :, :]  # (n, S, A)
        rows, s2, a2 = np.nonzero(joint > 0)
        w = joint[rows, s2, a2]
        keep = w >= prune
        pruned += float(w[~keep].sum())
        rows, s2, a2, w = rows[keep], s2[keep], a2[keep], w[keep]
        if rows.size > budget:
            raise EnumerationBudgetExceeded(f"{rows.size} partial trajectories exceed budget {budget}")
        hist_s = np.column_stack([hist_s[rows], s2])
        hist_a = np.column_stack([hist_a[rows], a2])
        probs = w
    return PathSet(start_time, hist_s, hist_a, probs, pruned)


def enumerate_threat(
    cmdp: Cmdp,
    policy: Policy,
    t: int,
    s: int,
    a: int,
    mode: Mode = "discounted-danger",
    budget: int = DEFAULT_BUDGET,
    prune: float = DEFAULT_PRUNE,
) -> EnumerationResult:
    """Direct evaluation of the threat expectation for one ``(t, s, a)``.

    Discounted mode sums ``beta^(k-t) d_k`` along each path; accident mode
    scores each path by ``1 - prod(1 - d_k)``, the chance that at least one of
    its independent per-step accidents fires.
    """
    paths = enumerate_paths(cmdp, policy, t, s, a, budget=budget, prune=prune)
    d = cmdp.danger[paths.states[:, :-1], paths.actions]  # (n, T - t)
    if mode == "discounted-danger":
        weights = cmdp.beta ** np.arange(1, d.shape[1] + 1)
        per_path = d @ weights
    elif mode == "accident-probability":
        per_path = 1.0 - np.prod(1.0 - d, axis=1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return EnumerationResult(
        value=float(np.sum(paths.probs * per_path)),
        n_trajectories=int(paths.probs.size),
        mass_check=float(np.sum(paths.probs)),
        pruned_mass=paths.pruned_mass,
    )


def enumerate_return(
    cmdp: Cmdp,
    policy: Policy,
    budget: int = DEFAULT_BUDGET,
    prune: float = DEFAULT_PRUNE,
) -> EnumerationResult:
    """``E_pi[sum_k gamma^k r_k]`` as a probability-weighted sum over trajectories."""
    paths = enumerate_paths(cmdp, policy, 0, budget=budget, prune=prune)
    r = cmdp.reward[paths.states[:, :-1], paths.actions]
    weights = cmdp.gamma ** np.arange(1, r.shape[1] + 1)
    return EnumerationResult(
        value=float(np.sum(paths.probs * (r @ weights))),
        n_trajectories=int(paths.probs.size),
        mass_check=float(np.sum(paths.probs)),
        pruned_mass=paths.pruned_mass,
    )


def enumerate_state_threat(cmdp: Cmdp, policy: Policy, s0: int, mode: Mode) -> float:
    """``E_{a ~ pi_0(.|s0)}[T_0(s0, a)]`` by enumeration."""
    total = 0.0
    for a in np.flatnonzero(policy.probs[0, s0] > 0):
        total += policy.probs[0, s0, a] * enumerate_threat(cmdp, policy, 0, s0, int(a), mode).value
    return total


__all__ = [
    "EnumerationBudgetExceeded",
    "EnumerationResult",
    "PathSet",
    "enumerate_paths",
    "enumerate_return",
    "enumerate_state_threat",
    "enumerate_threat",
]
