"""Finite-horizon tabular constrained MDPs, policies and trajectory sampling.

Conventions used throughout the package:

* ``r_{t+1} = r(s_t, a_t)`` and ``d_{t+1} = d(s_t, a_t)``; the return of a
  trajectory is ``sum_{k=1}^{T} gamma**k r_k`` (the first reward already
  carries one factor of gamma).
* Transition kernels are either dense ``(S, A, S)`` arrays or scipy sparse
  matrices of shape ``(S * A, S)`` whose row ``s * A + a`` is ``P(.|s, a)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Literal

import numpy as np
import scipy.sparse as sp

ROW_TOL = 1e-12

Mode = Literal["discounted-danger", "accident-probability"]
MODES: tuple[str, ...] = ("discounted-danger", "accident-probability")


class DimensionError(ValueError):
    """Raised when arrays handed to an operation have incompatible shapes."""


class InvalidCmdpError(ValueError):
    """Raised when an operation requires a valid CMDP and gets an invalid one."""

    def __init__(self, report: "ValidationReport"):
        super().__init__("invalid CMDP:\n  " + "\n  ".join(report.errors))
        self.report = report


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Cmdp:
    """Finite-horizon constrained MDP with ``(s, a)``-indexed reward and danger."""

    transition: np.ndarray | sp.spmatrix
    reward: np.ndarray
    danger: np.ndarray
    initial: np.ndarray
    horizon: int
    gamma: float = 1.0
    beta: float = 0.9

    def __post_init__(self):
        reward = np.asarray(self.reward, dtype=float)
        if reward.ndim != 2:
            raise DimensionError(f"reward must be (S, A), got shape {reward.shape}")
        n_states, n_actions = reward.shape
        if sp.issparse(self.transition):
            kernel = sp.csr_matrix(self.transition, dtype=float)
            if kernel.shape != (n_states * n_actions, n_states):
                raise DimensionError(
                    f"sparse transition must be (S*A, S) = {(n_states * n_actions, n_states)}, "
                    f"got {kernel.shape}"
                )
            kernel.sort_indices()
            object.__setattr__(self, "transition", kernel)
        else:
            trans = _frozen(self.transition)
            if trans.shape != (n_states, n_actions, n_states):
                raise DimensionError(
                    f"transition must be (S, A, S) = {(n_states, n_actions, n_states)}, "
                    f"got {trans.shape}"
                )
            object.__setattr__(self, "transition", trans)
        object.__setattr__(self, "reward", _frozen(reward))
        danger = _frozen(self.danger)
        if danger.shape != (n_states, n_actions):
            raise DimensionError(f"danger must be {(n_states, n_actions)}, got {danger.shape}")
        object.__setattr__(self, "danger", danger)
        initial = _frozen(self.initial)
        if initial.shape != (n_states,):
            raise DimensionError(f"initial must be ({n_states},), got {initial.shape}")
        object.__setattr__(self, "initial", initial)
        if int(self.horizon) != self.horizon:
            raise DimensionError("horizon must be an integer")
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "beta", float(self.beta))

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.transition)

    @cached_property
    def kernel(self) -> np.ndarray | sp.csr_matrix:
        """Transition operator of shape ``(S * A, S)`` (dense view or CSR)."""
        if self.is_sparse:
            return self.transition
        return self.transition.reshape(self.n_states * self.n_actions, self.n_states)

    @cached_property
    def csr(self) -> sp.csr_matrix:
        if self.is_sparse:
            return self.transition
        k = sp.csr_matrix(self.kernel)
        k.sort_indices()
        return k

    def dense_transition(self) -> np.ndarray:
        if self.is_sparse:
            return self.transition.toarray().reshape(self.n_states, self.n_actions, self.n_states)
        return self.transition

    def push(self, weights: np.ndarray) -> np.ndarray:
        """Next-state distribution from ``(S, A)`` state-action weights."""
        return np.asarray(self.kernel.T @ np.ravel(weights))

    def expect(self, values: np.ndarray) -> np.ndarray:
        """``E[values(s') | s, a]`` as an ``(S, A)`` array."""
        return np.asarray(self.kernel @ values).reshape(self.n_states, self.n_actions)

    def replace(self, **changes) -> "Cmdp":
        fields_ = dict(
            transition=self.transition,
            reward=self.reward,
            danger=self.danger,
            initial=self.initial,
            horizon=self.horizon,
            gamma=self.gamma,
            beta=self.beta,
        )
        fields_.update(changes)
        return Cmdp(**fields_)

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "horizon": self.horizon,
            "gamma": self.gamma,
            "beta": self.beta,
            "transition": self.dense_transition().tolist(),
            "reward": self.reward.tolist(),
            "danger": self.danger.tolist(),
            "initial": self.initial.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Cmdp":
        cmdp = cls(
            transition=np.asarray(doc["transition"], dtype=float),
            reward=np.asarray(doc["reward"], dtype=float),
            danger=np.asarray(doc["danger"], dtype=float),
            initial=np.asarray(doc["initial"], dtype=float),
            horizon=doc["horizon"],
            gamma=doc.get("gamma", 1.0),
            beta=doc.get("beta", 0.9),
        )
        for key in ("n_states", "n_actions"):
            if key in doc and doc[key] != getattr(cmdp, key):
                raise DimensionError(f"{key}={doc[key]} disagrees with array shapes")
        return cmdp

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Cmdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SafetySpec:
    """Constraint level ``c`` and the danger semantics it applies to."""

    budget: float
    mode: Mode = "discounted-danger"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not self.budget >= 0:
            raise ValueError("budget must be non-negative")
        if self.mode == "accident-probability" and self.budget > 1:
            raise ValueError("an accident-probability budget cannot exceed 1")


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.errors

    def __bool__(self) -> bool:
        return self.ok


def validate(cmdp: Cmdp) -> ValidationReport:
    """Check every CMDP invariant and report each violation."""
    errors: list[str] = []
    A = cmdp.n_actions
    if cmdp.horizon < 1:
        errors.append(f"horizon must be >= 1, got {cmdp.horizon}")
    if not 0.0 <= cmdp.gamma <= 1.0:
        errors.append(f"gamma must lie in [0, 1], got {cmdp.gamma}")
    if not 0.0 <= cmdp.beta < 1.0:
        errors.append(f"beta must lie in [0, 1), got {cmdp.beta}")
    if cmdp.is_sparse:
        data = cmdp.transition.data
        if data.size and (data.min() < 0 or not np.all(np.isfinite(data))):
            errors.append("transition has negative or non-finite entries")
        sums = np.asarray(cmdp.transition.sum(axis=1)).ravel()
    else:
        trans = cmdp.transition
        bad = np.argwhere((trans < 0) | ~np.isfinite(trans))
        if bad.size:
            s, a, s2 = bad[0]
            errors.append(f"transition has negative or non-finite entry at (s={s}, a={a}, s'={s2})")
        sums = trans.sum(axis=2).ravel()
    for idx in np.flatnonzero(np.abs(sums - 1.0) > ROW_TOL):
        s, a = divmod(int(idx), A)
        errors.append(f"transition row (s={s}, a={a}) sums to {sums[idx]!r}, not 1")
    for s, a in np.argwhere(~(cmdp.danger >= 0)):
        errors.append(f"danger at (s={s}, a={a}) is {cmdp.danger[s, a]!r} < 0")
    for s, a in np.argwhere(~np.isfinite(cmdp.reward)):
        errors.append(f"reward at (s={s}, a={a}) is not finite")
    if np.any(cmdp.initial < 0):
        errors.append("initial distribution has negative mass")
    if abs(cmdp.initial.sum() - 1.0) > ROW_TOL:
        errors.append(f"initial distribution sums to {cmdp.initial.sum()!r}, not 1")
    return ValidationReport(tuple(errors))


def require_valid(cmdp: Cmdp) -> None:
    report = validate(cmdp)
    if not report.ok:
        raise InvalidCmdpError(report)


@dataclass(frozen=True, eq=False)
class Policy:
    """Time-indexed stochastic policy ``probs[t, s, a] = pi_t(a | s)``."""

    probs: np.ndarray
    stationary: bool = False

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 3:
            raise DimensionError(f"policy probs must be (T, S, A), got {probs.shape}")
        object.__setattr__(self, "probs", probs)
        if self.stationary and probs.shape[0] > 1 and not np.all(probs == probs[:1]):
            raise ValueError("stationary policy must be identical across time")

    @property
    def horizon(self) -> int:
        return self.probs.shape[0]

    @property
    def n_states(self) -> int:
        return self.probs.shape[1]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[2]

    @classmethod
    def from_actions(cls, actions: np.ndarray, n_actions: int, horizon: int | None = None) -> "Policy":
        """Deterministic policy from an ``(S,)`` or ``(T, S)`` array of action indices."""
        actions = np.asarray(actions, dtype=int)
        stationary = actions.ndim == 1
        if stationary:
            if horizon is None:
                raise ValueError("horizon is required for a stationary action vector")
            actions = np.broadcast_to(actions, (horizon, actions.size))
        probs = np.zeros(actions.shape + (n_actions,))
        np.put_along_axis(probs, actions[..., None], 1.0, axis=-1)
        return cls(probs, stationary=stationary)

    @classmethod
    def from_stationary(cls, probs: np.ndarray, horizon: int) -> "Policy":
        probs = np.asarray(probs, dtype=float)
        return cls(np.broadcast_to(probs, (horizon,) + probs.shape), stationary=True)

    @classmethod
    def uniform(cls, horizon: int, n_states: int, n_actions: int) -> "Policy":
        return cls.from_stationary(np.full((n_states, n_actions), 1.0 / n_actions), horizon)

    def is_deterministic(self) -> bool:
        return bool(np.all((self.probs == 0) | (self.probs == 1)))

    def actions(self) -> np.ndarray:
        """Most likely action per ``(t, s)`` (the action itself for deterministic policies)."""
        return self.probs.argmax(axis=2)

    def check_compatible(self, cmdp: Cmdp) -> None:
        expected = (cmdp.horizon, cmdp.n_states, cmdp.n_actions)
        if self.probs.shape != expected:
            raise DimensionError(f"policy shape {self.probs.shape} does not match CMDP {expected}")

    def validate(self) -> ValidationReport:
        errors = []
        if np.any(self.probs < 0):
            errors.append("policy has negative probabilities")
        sums = self.probs.sum(axis=2)
        for t, s in np.argwhere(np.abs(sums - 1.0) > ROW_TOL):
            errors.append(f"pi_{t}(.|s={s}) sums to {sums[t, s]!r}")
        return ValidationReport(tuple(errors))

    def to_dict(self) -> dict:
        if self.is_deterministic():
            return {"policy": self.actions().tolist(), "deterministic": True}
        return {"policy": self.probs.tolist(), "deterministic": False}


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One episode: ``states`` has ``T + 1`` entries, the rest ``T``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dangers: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def discounted_return(self, gamma: float) -> float:
        weights = gamma ** np.arange(1, len(self.rewards) + 1)
        return float(np.dot(weights, self.rewards))

    def rows(self) -> Iterable[tuple]:
        for t in range(len(self.actions)):
            yield t, int(self.states[t]), int(self.actions[t]), float(self.rewards[t]), float(self.dangers[t])
        yield len(self.actions), int(self.states[-1]), "", "", ""

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "s", "a", "r", "d"])
            writer.writerows(self.rows())


# -- randomness --------------------------------------------------------------


def episode_rng(seed: int, episode: int = 0) -> np.random.Generator:
    """Counter-based generator for one episode, derived from ``(seed, episode)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(episode),))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(seed: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return episode_rng(seed, 0)


def _sample_rows(csr: sp.csr_matrix, rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sample one column per requested row of a row-stochastic CSR matrix."""
    cum = np.cumsum(csr.data)
    start = csr.indptr[rows]
    stop = csr.indptr[rows + 1]
    before = np.where(start > 0, cum[np.maximum(start - 1, 0)], 0.0)
    row_mass = np.where(stop > start, cum[np.maximum(stop - 1, 0)] - before, 0.0)
    pos = np.searchsorted(cum, before + u * row_mass, side="right")
    pos = np.clip(pos, start, stop - 1)
    return csr.indices[pos]


def _sample_categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[:, None] * cdf[:, -1:] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def simulate(cmdp: Cmdp, policy: Policy, seed: int | np.random.Generator) -> Trajectory:
    """Sample one trajectory; identical seeds give identical trajectories."""
    policy.check_compatible(cmdp)
    rng = as_generator(seed)
    T, A = cmdp.horizon, cmdp.n_actions
    csr = cmdp.csr
    states = np.empty(T + 1, dtype=int)
    actions = np.empty(T, dtype=int)
    states[0] = _sample_categorical(cmdp.initial[None, :], rng.random(1))[0]
    for t in range(T):
        s = states[t]
        actions[t] = _sample_categorical(policy.probs[t, s][None, :], rng.random(1))[0]
        states[t + 1] = _sample_rows(csr, np.array([s * A + actions[t]]), rng.random(1))[0]
    return Trajectory(
        states=states,
        actions=actions,
        rewards=cmdp.reward[states[:-1], actions],
        dangers=cmdp.danger[states[:-1], actions],
    )


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    states: np.ndarray  # (n, T + 1)
    actions: np.ndarray  # (n, T)
    rewards: np.ndarray  # (n, T)
    dangers: np.ndarray  # (n, T)

    def returns(self, gamma: float) -> np.ndarray:
        weights = gamma ** np.arange(1, self.rewards.shape[1] + 1)
        return self.rewards @ weights


def simulate_many(
    cmdp: Cmdp,
    policy: Policy,
    n_episodes: int,
    seed: int | np.random.Generator,
    start_time: int = 0,
    start_states: np.ndarray | None = None,
    start_actions: np.ndarray | None = None,
) -> TrajectoryBatch:
    """Vectorized sampling of ``n_episodes`` independent episodes.

    Optionally starts at ``start_time`` from given states (and first actions),
    which is how rollout-based threat estimates are produced.
    """
    policy.check_compatible(cmdp)
    rng = as_generator(seed)
    T, A = cmdp.horizon, cmdp.n_actions
    steps = T - start_time
    csr = cmdp.csr
    states = np.empty((n_episodes, steps + 1), dtype=int)
    actions = np.empty((n_episodes, steps), dtype=int)
    if start_states is None:
        states[:, 0] = _sample_categorical(np.broadcast_to(cmdp.initial, (n_episodes, cmdp.n_states)), rng.random(n_episodes))
    else:
        states[:, 0] = start_states
    for k in range(steps):
        s = states[:, k]
        if k == 0 and start_actions is not None:
            actions[:, 0] = start_actions
        else:
            actions[:, k] = _sample_categorical(policy.probs[start_time + k, s], rng.random(n_episodes))
        states[:, k + 1] = _sample_rows(csr, s * A + actions[:, k], rng.random(n_episodes))
    return TrajectoryBatch(
        states=states,
        actions=actions,
        rewards=cmdp.reward[states[:, :-1], actions],
        dangers=cmdp.danger[states[:, :-1], actions],
    )


# -- exact evaluation --------------------------------------------------------


def occupancy(cmdp: Cmdp, policy: Policy, initial: np.ndarray | None = None) -> np.ndarray:
    """State distributions ``mu[t, s]`` for ``t = 0..T`` under ``policy``."""
    policy.check_compatible(cmdp)
    mu = np.empty((cmdp.horizon + 1, cmdp.n_states))
    mu[0] = cmdp.initial if initial is None else initial
    for t in range(cmdp.horizon):
        mu[t + 1] = cmdp.push(mu[t][:, None] * policy.probs[t])
    return mu


def exact_return(cmdp: Cmdp, policy: Policy) -> float:
    """``E_pi[sum_{k=1}^T gamma^k r_k]`` by forward occupancy propagation."""
    mu = occupancy(cmdp, policy)
    per_step = np.einsum("ts,tsa,sa->t", mu[:-1], policy.probs, cmdp.reward)
    weights = cmdp.gamma ** np.arange(1, cmdp.horizon + 1)
    return float(per_step @ weights)


def backward_optimal(cmdp: Cmdp, allowed: np.ndarray | None = None) -> tuple[Policy, np.ndarray]:
    """Unconstrained reward-optimal deterministic policy by backward induction.

    ``allowed`` optionally masks actions per state (``(S, A)`` boolean).  Values
    returned are ``V[t, s]`` in relative-time units (first reward weighted by
    gamma).  Ties go to the lowest action index.
    """
    T, S, A = cmdp.horizon, cmdp.n_states, cmdp.n_actions
    V = np.zeros((T + 1, S))
    actions = np.zeros((T, S), dtype=int)
    for t in range(T - 1, -1, -1):
        Q = cmdp.gamma * (cmdp.reward + cmdp.expect(V[t + 1]))
        if allowed is not None:
            Q = np.where(allowed, Q, -np.inf)
        actions[t] = argmax_lowest(Q)
        V[t] = Q[np.arange(S), actions[t]]
    return Policy.from_actions(actions, A), V


TIE_TOL = 1e-12


def argmin_lowest(values: np.ndarray, tol: float = TIE_TOL) -> np.ndarray:
    """Row-wise argmin with near-ties (within ``tol``) broken toward the lowest index."""
    best = values.min(axis=-1, keepdims=True)
    return np.argmax(values <= best + tol, axis=-1)


def argmax_lowest(values: np.ndarray, tol: float = TIE_TOL) -> np.ndarray:
    best = values.max(axis=-1, keepdims=True)
    return np.argmax(values >= best - tol, axis=-1)


def trajectory_probability(cmdp: Cmdp, policy: Policy, states, actions) -> float:
    """Probability of a full state/action sequence (used by sampler tests)."""
    p = cmdp.initial[states[0]]
    dense = cmdp.dense_transition()
    for t, a in enumerate(actions):
        p *= policy.probs[t, states[t], a] * dense[states[t], a, states[t + 1]]
    return float(p)


__all__ = [
    "Cmdp",
    "DimensionError",
    "InvalidCmdpError",
    "MODES",
    "Mode",
    "Policy",
    "SafetySpec",
    "Trajectory",
    "TrajectoryBatch",
    "ValidationReport",
    "argmax_lowest",
    "argmin_lowest",
    "as_generator",
    "backward_optimal",
    "episode_rng",
    "exact_return",
    "occupancy",
    "require_valid",
    "simulate",
    "simulate_many",
    "trajectory_probability",
    "validate",
]
