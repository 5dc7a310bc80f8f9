"""Controllers for the factored Jam world built on per-obstacle threat tables.

The reconnaissance step solves one subsystem (agent plus a single obstacle)
under a shared agent-only baseline; the threat of the full system is then
bounded by summing the subsystem tables over the obstacles that are present.
The same tables serve any obstacle count, which is what makes transfer to
more crowded rooms free.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .cmdp import Policy, argmax_lowest, backward_optimal
from .envs.jam import N_ACTIONS, JamState, JamWorld
from .secure import accident_threshold
from .threat import compute_accident_threat


@dataclass(frozen=True, eq=False)
class JamRecon:
    """Per-obstacle accident threats of an agent-only baseline."""

    world: JamWorld
    eta: Policy  # (T, n_agent, A)
    moving: np.ndarray  # (T, n_agent, n_obs, A)
    static: np.ndarray  # (T, n_agent, A)

    def composed(self, state: JamState) -> np.ndarray:
        """``(T, A)`` summed threat at ``state`` for every time index, clipped at 1."""
        total = self.static[:, state.agent].copy()
        for o in state.obstacles:
            total += self.moving[:, state.agent, o]
        return np.minimum(total, 1.0)


def jam_recon(world: JamWorld, eta: Policy | None = None) -> JamRecon:
    eta = world.baseline_policy() if eta is None else eta
    sub = compute_accident_threat(world.subsystem_cmdp, world.lift_agent_policy(eta))
    T = world.config.horizon
    moving = sub.values.reshape(T, world.n_agent, world.n_obs_states, N_ACTIONS)
    static = compute_accident_threat(world.agent_cmdp, eta).values
    return JamRecon(world, eta, moving, static)


class JamRpController:
    """Pool member chosen online: best agent-only value among secure actions.

    An action is secure at a joint state when the summed threat stays within
    ``x`` at every time index; without a secure action the baseline's action
    is played, which keeps the non-secure-state condition of the deviation
    bound satisfied.  ``certified`` records the gate at the episode start.
    """

    def __init__(self, recon: JamRecon, budget: float, world: JamWorld | None = None):
        self.recon = recon
        self.world = world or recon.world
        T = self.world.config.horizon
        self.x = accident_threshold(budget, T)
        _, self.values = backward_optimal(self.world.agent_cmdp)
        self.agent_q = self._agent_q()
        self._eta_actions = recon.eta.actions()
        self.certified_log: list[bool] = []

    def _agent_q(self) -> np.ndarray:
        c = self.world.agent_cmdp
        T = c.horizon
        q = np.empty((T, c.n_states, c.n_actions))
        for t in range(T):
            q[t] = c.gamma * (c.reward + self.values[t + 1][self.world.agent_next])
        return q

    def secure_actions(self, state: JamState) -> np.ndarray:
        return np.all(self.recon.composed(state) <= self.x, axis=0)

    def gate(self, state: JamState) -> bool:
        a = self._eta_actions[0, state.agent]
        return bool(self.recon.composed(state)[0, a] <= self.x and self.secure_actions(state).any())

    def start_episode(self, state: JamState) -> None:
        self.certified_log.append(self.gate(state))

    def act(self, t: int, state: JamState, rng=None) -> int:
        secure = self.secure_actions(state)
        if not secure.any():
            return int(self._eta_actions[t, state.agent])
        return int(argmax_lowest(np.where(secure, self.agent_q[t, state.agent], -np.inf)))


class JamMpcController:
    """k-step search over agent action sequences with a worst-case obstacle check.

    A sequence is safe when no obstacle could possibly share a cell with the
    agent during it, assuming every obstacle moves one cell per step in the
    worst direction.  Among safe sequences the largest k-step agent reward
    wins; with none safe the sequence with the fewest threatened steps is
    taken.  ``evaluations`` counts simulated sequence steps.
    """

    def __init__(self, world: JamWorld, k: int):
        if k < 1:
            raise ValueError("lookahead depth k must be >= 1")
        self.world = world
        self.k = k
        self.evaluations = 0

    def act(self, t: int, state: JamState, rng=None) -> int:
        w = self.world
        depth = min(self.k, w.config.horizon - t)
        obstacles = [divmod(o, w.W) for o in state.obstacles if o != w.gone]
        best_key, best_first = None, 0
        for seq in itertools.product(range(N_ACTIONS), repeat=depth):
            ag = state.agent
            threatened = 0
            total = 0.0
            for j, a in enumerate(seq):
                self.evaluations += 1
                cells = []
                if ag != w.exited:
                    cells = [divmod(w.agent_cur_cell[ag], w.W), divmod(w.agent_new_cell[ag, a], w.W)]
                reach = j  # obstacle moves made before this step
                if any(
                    abs(cr - orow) + abs(cc - ocol) <= reach for cr, cc in cells for orow, ocol in obstacles
                ) or w.static_danger[ag, a]:
                    threatened += 1
                total += w.agent_reward[ag, a]
                ag = int(w.agent_next[ag, a])
            key = (-threatened, total)
            if best_key is None or key > best_key:
                best_key, best_first = key, seq[0]
        return int(best_first)


__all__ = ["JamMpcController", "JamRecon", "JamRpController", "jam_recon"]
