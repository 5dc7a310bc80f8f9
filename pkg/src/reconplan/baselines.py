"""Comparator controllers: Lagrange-penalized tabular Q-learning and k-step lookahead MPC."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cmdp import Cmdp, Mode, Policy, argmax_lowest, as_generator
from .envs.base import CmdpEnv, EpisodicEnv


# -- penalized Q-learning ----------------------------------------------------


@dataclass(eq=False)
class QTable:
    """Time-indexed action values ``values[t, obs, a]`` with visit counts."""

    values: np.ndarray
    visits: np.ndarray

    @classmethod
    def zeros(cls, horizon: int, n_obs: int, n_actions: int) -> "QTable":
        return cls(np.zeros((horizon, n_obs, n_actions)), np.zeros((horizon, n_obs, n_actions), dtype=np.int64))

    def greedy(self, t: int, obs: int) -> int:
        return int(argmax_lowest(self.values[t, obs]))

    def greedy_actions(self) -> np.ndarray:
        """``(T, n_obs)`` greedy action per observation."""
        return argmax_lowest(self.values)


def _penalty_at(lam: float | Callable[[int], float], episode: int) -> float:
    return float(lam(episode)) if callable(lam) else float(lam)


def train_q(
    env: EpisodicEnv,
    lam: float | Callable[[int], float],
    episodes: int,
    seed: int,
    epsilon: float = 0.1,
    table: QTable | None = None,
) -> QTable:
    """Tabular Q-learning on the shaped reward ``r - lam * d``.

    Zero initialization, learning rate ``1 / visits``, epsilon-greedy
    exploration with lowest-index greedy ties.  ``lam`` may be a callable of
    the episode index (an annealing schedule).  One generator drives the whole
    run, so a fixed seed reproduces the table bit for bit.
    """
    if episodes < 0:
        raise ValueError("episodes must be non-negative")
    rng = as_generator(seed)
    T, A = env.horizon, env.n_actions
    q = table if table is not None else QTable.zeros(T, env.n_observations, A)
    for ep in range(episodes):
        lam_ep = _penalty_at(lam, ep)
        if lam_ep < 0:
            raise ValueError("penalty weight must be non-negative")
        state = env.reset(rng)
        obs = env.observe(state)
        for t in range(T):
            if rng.random() < epsilon:
                a = int(rng.integers(A))
            else:
                a = q.greedy(t, obs)
            nxt, r, d, _ = env.step(state, a, t, rng)
            nxt_obs = env.observe(nxt)
            target = r - lam_ep * d
            if t + 1 < T:
                target += env.gamma * q.values[t + 1, nxt_obs].max()
            q.visits[t, obs, a] += 1
            q.values[t, obs, a] += (target - q.values[t, obs, a]) / q.visits[t, obs, a]
            state, obs = nxt, nxt_obs
    return q


def penalized_q_learn(
    cmdp: Cmdp,
    lam: float | Callable[[int], float],
    episodes: int,
    seed: int,
    epsilon: float = 0.1,
    features: np.ndarray | None = None,
) -> Policy:
    """Greedy policy of Q-learning on ``r - lam * d`` for a tabular CMDP."""
    if not callable(lam) and lam < 0:
        raise ValueError("penalty weight must be non-negative")
    env = CmdpEnv(cmdp, features)
    q = train_q(env, lam, episodes, seed, epsilon)
    obs_actions = q.greedy_actions()  # (T, n_obs)
    return Policy.from_actions(obs_actions[:, env.features], cmdp.n_actions)


class QController:
    """Frozen greedy controller reading a trained table through ``env.observe``."""

    def __init__(self, table: QTable, observe: Callable[[object], int]):
        self.table = table
        self.observe = observe

    def act(self, t: int, state, rng=None) -> int:
        return self.table.greedy(t, self.observe(state))


# -- k-step lookahead MPC ------------------------------------------------------


@dataclass
class MpcStats:
    evaluations: int = 0


@dataclass(frozen=True)
class MpcDecision:
    action: int
    danger: np.ndarray  # worst-case lookahead danger per root action
    value: np.ndarray  # expected lookahead return per root action
    evaluations: int


class _Lookahead:
    """Exhaustive expectimax without memoization (so cost reflects the tree size)."""

    def __init__(self, cmdp: Cmdp, threshold: float, mode: Mode, stats: MpcStats):
        self.P = cmdp.dense_transition()
        self.cmdp = cmdp
        self.x = threshold
        self.mode = mode
        self.stats = stats

    def node(self, s: int, t: int, depth: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-action (worst-case danger, expected return) over ``depth`` steps."""
        c = self.cmdp
        A = c.n_actions
        danger = np.empty(A)
        value = np.empty(A)
        for a in range(A):
            self.stats.evaluations += 1
            d = c.danger[s, a]
            succ = np.flatnonzero(self.P[s, a] > 0)
            worst = 0.0
            cont = 0.0
            if depth > 1 and t + 1 < c.horizon:
                for s2 in succ:
                    sub_danger, sub_value = self.node(int(s2), t + 1, depth - 1)
                    choice = self.choose(sub_danger, sub_value)
                    worst = max(worst, sub_danger.min())
                    cont += self.P[s, a, s2] * sub_value[choice]
            if self.mode == "discounted-danger":
                danger[a] = c.beta * d + c.beta * worst
            else:
                danger[a] = d + (1.0 - d) * worst
            value[a] = c.gamma * (c.reward[s, a] + cont)
        return danger, value

    def choose(self, danger: np.ndarray, value: np.ndarray) -> int:
        safe = danger <= self.x
        if safe.any():
            return int(argmax_lowest(np.where(safe, value, -np.inf)))
        lowest = danger <= danger.min() + 1e-12
        return int(argmax_lowest(np.where(lowest, value, -np.inf)))


def mpc_decide(
    cmdp: Cmdp,
    state: int,
    t: int,
    k: int,
    threshold: float,
    mode: Mode = "discounted-danger",
) -> MpcDecision:
    """k-step safe lookahead.

    An action is safe when its worst-case danger over the next ``k`` steps
    (maximum over successor states of the best continuation) is within
    ``threshold``.  Among safe actions the best expected k-step return wins;
    with none safe the least dangerous action is taken (ties by return, then
    lowest index).
    """
    if k < 1:
        raise ValueError("lookahead depth k must be >= 1")
    if not 0 <= t < cmdp.horizon:
        raise ValueError("t outside the horizon")
    stats = MpcStats()
    search = _Lookahead(cmdp, threshold, mode, stats)
    danger, value = search.node(int(state), t, k)
    return MpcDecision(search.choose(danger, value), danger, value, stats.evaluations)


def mpc_action(
    cmdp: Cmdp,
    state: int,
    t: int,
    k: int,
    threshold: float,
    mode: Mode = "discounted-danger",
) -> int:
    return mpc_decide(cmdp, state, t, k, threshold, mode).action


class MpcController:
    def __init__(self, cmdp: Cmdp, k: int, threshold: float, mode: Mode = "discounted-danger"):
        self.cmdp, self.k, self.threshold, self.mode = cmdp, k, threshold, mode
        self.evaluations = 0

    def act(self, t: int, state, rng=None) -> int:
        decision = mpc_decide(self.cmdp, int(state), t, self.k, self.threshold, self.mode)
        self.evaluations += decision.evaluations
        return decision.action


class PolicyController:
    """Table lookup of a time-indexed tabular policy."""

    def __init__(self, policy: Policy):
        self.policy = policy
        self.deterministic = policy.is_deterministic()
        self._actions = policy.actions()

    def act(self, t: int, state, rng: np.random.Generator | None = None) -> int:
        if self.deterministic or rng is None:
            return int(self._actions[t, state])
        return int(rng.choice(self.policy.n_actions, p=self.policy.probs[t, state]))


__all__ = [
    "MpcController",
    "MpcDecision",
    "PolicyController",
    "QController",
    "QTable",
    "mpc_action",
    "mpc_decide",
    "penalized_q_learn",
    "train_q",
]
