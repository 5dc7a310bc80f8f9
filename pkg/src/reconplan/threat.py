"""Threat functions: expected future danger after taking ``a`` in ``s`` at time ``t``.

Two flavours are supported.

``discounted-danger``
    ``T_t(s, a) = E[sum_{k=t+1}^{T} beta^(k-t) d_k | s_t=s, a_t=a]`` which obeys
    ``T_t(s, a) = beta*d(s, a) + beta*E[T_{t+1}(s', a')]`` with
    ``T_{T-1}(s, a) = beta*d(s, a)``.

``accident-probability``
    ``d(s, a)`` is the probability that the step from ``(s, a)`` ends in an
    accident and ``T_t(s, a)`` is the probability of at least one accident in
    the remaining steps: ``T_t = d + (1 - d) * E[T_{t+1}]``.

Tables store ``t in [0, T)``; ``T_T`` is identically zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cmdp import (
    Cmdp,
    DimensionError,
    MODES,
    Mode,
    Policy,
    argmin_lowest,
    episode_rng,
    simulate_many,
)


@dataclass(frozen=True, eq=False)
class ThreatTable:
    values: np.ndarray  # (T, S, A)
    mode: Mode
    state_values: np.ndarray | None = None  # (T, S), E_{a~policy}[values]

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown threat mode {self.mode!r}")
        v = np.array(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def n_states(self) -> int:
        return self.values.shape[1]

    @property
    def n_actions(self) -> int:
        return self.values.shape[2]

    def state_value(self, t: int, s: int) -> float:
        if self.state_values is None:
            raise ValueError("table was built without a policy; state values unavailable")
        return float(self.state_values[t, s])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "s", "a", "value"])
            T, S, A = self.values.shape
            for t in range(T):
                for s in range(S):
                    for a in range(A):
                        writer.writerow([t, s, a, repr(float(self.values[t, s, a]))])


def _check(cmdp: Cmdp, policy: Policy) -> None:
    policy.check_compatible(cmdp)


def _backward(cmdp: Cmdp, policy: Policy | None, mode: Mode):
    """Shared backward induction.  With ``policy=None`` the minimizing action is used."""
    T, S, A = cmdp.horizon, cmdp.n_states, cmdp.n_actions
    d = cmdp.danger
    values = np.empty((T, S, A))
    state_values = np.empty((T, S))
    greedy = np.zeros((T, S), dtype=int)
    nxt = np.zeros(S)  # E_{a'}[T_{t+1}(s', a')], zero beyond the horizon
    for t in range(T - 1, -1, -1):
        cont = cmdp.expect(nxt)
        if mode == "discounted-danger":
            q = cmdp.beta * (d + cont)
        else:
            q = d + (1.0 - d) * cont
        values[t] = q
        if policy is None:
            greedy[t] = argmin_lowest(q)
            state_values[t] = q[np.arange(S), greedy[t]]
        else:
            state_values[t] = np.einsum("sa,sa->s", policy.probs[t], q)
        nxt = state_values[t]
    return values, state_values, greedy


def compute_threat(cmdp: Cmdp, policy: Policy) -> ThreatTable:
    """Discounted-danger threat of ``policy`` by exact backward induction."""
    _check(cmdp, policy)
    values, state_values, _ = _backward(cmdp, policy, "discounted-danger")
    return ThreatTable(values, "discounted-danger", state_values)


def compute_accident_threat(cmdp: Cmdp, policy: Policy) -> ThreatTable:
    """Probability of at least one accident in the remaining steps under ``policy``."""
    _check(cmdp, policy)
    if np.any(cmdp.danger < 0) or np.any(cmdp.danger > 1):
        raise ValueError("accident-probability threat needs danger values in [0, 1]")
    values, state_values, _ = _backward(cmdp, policy, "accident-probability")
    return ThreatTable(values, "accident-probability", state_values)


def threat_for_mode(cmdp: Cmdp, policy: Policy, mode: Mode) -> ThreatTable:
    if mode == "discounted-danger":
        return compute_threat(cmdp, policy)
    return compute_accident_threat(cmdp, policy)


def min_threat_policy(cmdp: Cmdp, mode: Mode = "discounted-danger") -> tuple[Policy, ThreatTable]:
    """Deterministic threat-minimizing baseline ``eta*`` and its threat table.

    Ties are broken toward the lowest action index.  The returned table is
    re-evaluated for the returned policy, so it is exactly ``T^{eta*}``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "accident-probability" and (np.any(cmdp.danger < 0) or np.any(cmdp.danger > 1)):
        raise ValueError("accident-probability threat needs danger values in [0, 1]")
    _, _, greedy = _backward(cmdp, None, mode)
    eta = Policy.from_actions(greedy, cmdp.n_actions)
    return eta, threat_for_mode(cmdp, eta, mode)


@dataclass(frozen=True, eq=False)
class ThreatEstimate:
    mean: np.ndarray  # (T, S, A)
    stderr: np.ndarray  # (T, S, A)
    n_rollouts: int
    mode: Mode


def monte_carlo_threat(
    cmdp: Cmdp,
    policy: Policy,
    n_rollouts: int,
    seed: int,
    mode: Mode = "discounted-danger",
) -> ThreatEstimate:
    """Rollout estimate of the threat table with a per-cell standard error.

    Every ``(t, s, a)`` cell gets ``n_rollouts`` independent rollouts that start
    from ``s`` at time ``t`` with action ``a`` and then follow ``policy``.  In
    accident mode each step's accident is drawn as Bernoulli(``d``).
    """
    _check(cmdp, policy)
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be at least 1")
    T, S, A = cmdp.horizon, cmdp.n_states, cmdp.n_actions
    mean = np.zeros((T, S, A))
    stderr = np.zeros((T, S, A))
    cells_s, cells_a = np.meshgrid(np.arange(S), np.arange(A), indexing="ij")
    cells_s, cells_a = cells_s.ravel(), cells_a.ravel()
    for t in range(T):
        starts = np.repeat(cells_s, n_rollouts)
        first = np.repeat(cells_a, n_rollouts)
        rng = episode_rng(seed, t)
        batch = simulate_many(
            cmdp, policy, starts.size, rng, start_time=t, start_states=starts, start_actions=first
        )
        if mode == "discounted-danger":
            weights = cmdp.beta ** np.arange(1, T - t + 1)
            samples = batch.dangers @ weights
        else:
            hits = rng.random(batch.dangers.shape) < batch.dangers
            samples = hits.any(axis=1).astype(float)
        samples = samples.reshape(S * A, n_rollouts)
        mean[t] = samples.mean(axis=1).reshape(S, A)
        if n_rollouts > 1:
            stderr[t] = (samples.std(axis=1, ddof=1) / np.sqrt(n_rollouts)).reshape(S, A)
    return ThreatEstimate(mean, stderr, n_rollouts, mode)


def bellman_residual(cmdp: Cmdp, policy: Policy, table: ThreatTable) -> np.ndarray:
    """Pointwise residual of the threat recursion (zero for an exact table)."""
    if table.values.shape != (cmdp.horizon, cmdp.n_states, cmdp.n_actions):
        raise DimensionError("threat table does not match CMDP")
    T = cmdp.horizon
    res = np.empty_like(table.values)
    d = cmdp.danger
    for t in range(T):
        if t + 1 < T:
            nxt = np.einsum("sa,sa->s", policy.probs[t + 1], table.values[t + 1])
        else:
            nxt = np.zeros(cmdp.n_states)
        cont = cmdp.expect(nxt)
        if table.mode == "discounted-danger":
            res[t] = table.values[t] - cmdp.beta * d - cmdp.beta * cont
        else:
            res[t] = table.values[t] - d - (1 - d) * cont
    return res


__all__ = [
    "ThreatEstimate",
    "ThreatTable",
    "bellman_residual",
    "compute_accident_threat",
    "compute_threat",
    "min_threat_policy",
    "monte_carlo_threat",
    "threat_for_mode",
]
