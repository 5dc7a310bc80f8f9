"""Grid Jam: leave a room through the exit while randomly moving obstacles roam.

Agent state is ``(cell, velocity)`` with velocity in ``{-1, 0, 1}^2`` plus an
absorbing *exited* state.  The nine actions are accelerations; velocity is
clipped to ``[-1, 1]`` and a move that would leave the field stops at the
border with that velocity component zeroed.  The exit is the top-left
corner; the other three corners hold safety zones (Manhattan radius
``zone_radius``) that swallow any obstacle entering them.

Each obstacle performs an independent lazy random walk (stay with
``stay_prob``, otherwise one of four neighbours).  A collision with an
obstacle happens when the agent's new cell equals the obstacle's current cell
or when both already share a cell; collisions are judged before obstacles
move, so the danger of a step is a 0/1 function of the current joint state
and action.

Three views of the same dynamics are exposed:

* the joint system, for simulation and (for few obstacles) exact joint
  threats computed with a factored backward pass;
* per-obstacle subsystem CMDPs over ``agent x one obstacle``;
* an agent-centred subsystem in relative coordinates, used for heatmaps.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from ..cmdp import Cmdp, Policy, _sample_categorical
from .layout import LayoutError

VELOCITIES = tuple((vr, vc) for vr in (-1, 0, 1) for vc in (-1, 0, 1))
ACCELERATIONS = VELOCITIES
N_VEL = len(VELOCITIES)
N_ACTIONS = len(ACCELERATIONS)
OBSTACLE_MOVES = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))


def velocity_index(vr: int, vc: int) -> int:
    return (vr + 1) * 3 + (vc + 1)


@dataclass(frozen=True)
class JamConfig:
    width: int = 5
    height: int = 5
    n_obstacles: int = 2
    horizon: int = 8
    stay_prob: float = 0.5
    zone_radius: int = 1
    static_obstacles: tuple[tuple[int, int], ...] = ()
    start: tuple[int, int] | None = None  # defaults to the bottom-centre cell
    min_start_distance: int = 2  # obstacles start at least this Chebyshev distance away
    shaping_total: float = 75.0
    goal_bonus: float = 10.0
    stop_penalty: float = 0.05
    collision_penalty: float = 50.0
    gamma: float = 1.0
    beta: float = 0.9


class JamWorld:
    """Factored Jam environment built from a :class:`JamConfig`."""

    def __init__(self, config: JamConfig = JamConfig()):
        self.config = config
        H, W = config.height, config.width
        if H < 3 or W < 3:
            raise LayoutError("Jam field must be at least 3x3")
        if not 0.0 <= config.stay_prob <= 1.0:
            raise ValueError("stay_prob must lie in [0, 1]")
        self.H, self.W = H, W
        self.n_cells = H * W
        self.exit_cell = (0, 0)
        self.start = tuple(config.start) if config.start is not None else (H - 1, W // 2)
        self.static = frozenset(tuple(c) for c in config.static_obstacles)
        zone_centres = [(0, W - 1), (H - 1, 0), (H - 1, W - 1)]
        self.zone = np.zeros((H, W), dtype=bool)
        for r in range(H):
            for c in range(W):
                self.zone[r, c] = any(abs(r - zr) + abs(c - zc) <= config.zone_radius for zr, zc in zone_centres)
        if self.start == self.exit_cell or self.start in self.static:
            raise LayoutError("start cell must be free and differ from the exit")
        allowed = self._obstacle_start_mask()
        if config.n_obstacles > int(allowed.sum()):
            raise LayoutError(f"{config.n_obstacles} obstacles exceed the {int(allowed.sum())} admissible start cells")
        self.n_agent = self.n_cells * N_VEL + 1
        self.exited = self.n_cells * N_VEL
        self.n_obs_states = self.n_cells + 1
        self.gone = self.n_cells
        self._build_agent()
        self._build_obstacle()
        self.obstacle_initial = np.zeros(self.n_obs_states)
        self.obstacle_initial[: self.n_cells] = allowed.ravel() / allowed.sum()

    # -- construction ----------------------------------------------------

    def _obstacle_start_mask(self) -> np.ndarray:
        H, W = self.H, self.W
        rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        cheb = np.maximum(abs(rr - self.start[0]), abs(cc - self.start[1]))
        mask = (cheb >= self.config.min_start_distance) & ~self.zone
        mask[self.exit_cell] = False
        for cell in self.static:
            mask[cell] = False
        return mask

    def agent_index(self, cell: tuple[int, int], velocity: tuple[int, int] = (0, 0)) -> int:
        return (cell[0] * self.W + cell[1]) * N_VEL + velocity_index(*velocity)

    def agent_cell(self, ag: int) -> tuple[int, int] | None:
        if ag == self.exited:
            return None
        return divmod(ag // N_VEL, self.W)

    def obstacle_index(self, cell: tuple[int, int] | None) -> int:
        return self.gone if cell is None else cell[0] * self.W + cell[1]

    def _build_agent(self) -> None:
        H, W, cfg = self.H, self.W, self.config
        n, A = self.n_agent, N_ACTIONS
        nxt = np.full((n, A), self.exited, dtype=int)
        new_cell = np.full((n, A), -1, dtype=int)  # flat cell entered by the move
        cur_cell = np.full(n, -1, dtype=int)
        reward = np.zeros((n, A))
        static_hit = np.zeros((n, A))
        start_dist = max(self.start)  # Chebyshev distance to (0, 0)
        unit = cfg.shaping_total / start_dist
        for r in range(H):
            for c in range(W):
                for vi, (vr, vc) in enumerate(VELOCITIES):
                    ag = (r * W + c) * N_VEL + vi
                    cur_cell[ag] = r * W + c
                    for a, (ar, ac) in enumerate(ACCELERATIONS):
                        nvr, nvc = int(np.clip(vr + ar, -1, 1)), int(np.clip(vc + ac, -1, 1))
                        r2, c2 = r + nvr, c + nvc
                        if not 0 <= r2 < H:
                            r2, nvr = r, 0
                        if not 0 <= c2 < W:
                            c2, nvc = c, 0
                        new_cell[ag, a] = r2 * W + c2
                        progress = max(r, c) - max(r2, c2)
                        reward[ag, a] = unit * progress
                        if (r2, c2) == (r, c):
                            reward[ag, a] -= cfg.stop_penalty
                        if (r2, c2) in self.static:
                            static_hit[ag, a] = 1.0
                        if (r2, c2) == self.exit_cell:
                            reward[ag, a] += cfg.goal_bonus
                            nxt[ag, a] = self.exited
                        else:
                            nxt[ag, a] = (r2 * W + c2) * N_VEL + velocity_index(nvr, nvc)
        self.agent_next = nxt
        self.agent_new_cell = new_cell
        self.agent_cur_cell = cur_cell
        self.agent_reward = reward
        self.static_danger = static_hit

    def _build_obstacle(self) -> None:
        H, W = self.H, self.W
        M = np.zeros((self.n_obs_states, self.n_obs_states))
        M[self.gone, self.gone] = 1.0
        move_p = (1.0 - self.config.stay_prob) / 4.0
        for r in range(H):
            for c in range(W):
                o = r * W + c
                M[o, o] += self.config.stay_prob
                for dr, dc in OBSTACLE_MOVES[1:]:
                    r2, c2 = r + dr, c + dc
                    if not (0 <= r2 < H and 0 <= c2 < W) or (r2, c2) in self.static:
                        M[o, o] += move_p
                    elif self.zone[r2, c2]:
                        M[o, self.gone] += move_p
                    else:
                        M[o, r2 * W + c2] += move_p
        self.obstacle_kernel = M

    # -- dynamics ---------------------------------------------------------

    def collision(self, ag: np.ndarray, a: np.ndarray, o: np.ndarray) -> np.ndarray:
        """0/1 collision indicator for agent state(s), action(s), obstacle state(s)."""
        ag, a, o = np.broadcast_arrays(np.asarray(ag), np.asarray(a), np.asarray(o))
        live = (ag != self.exited) & (o != self.gone)
        cur = self.agent_cur_cell[ag]
        new = self.agent_new_cell[ag, a]
        return (live & ((new == o) | (cur == o))).astype(float)

    @cached_property
    def agent_cmdp(self) -> Cmdp:
        """Agent-only CMDP: reward shaping and static-obstacle danger."""
        n, A = self.n_agent, N_ACTIONS
        rows = np.arange(n * A)
        kernel = sp.csr_matrix((np.ones(n * A), (rows, self.agent_next.ravel())), shape=(n * A, n))
        initial = np.zeros(n)
        initial[self.agent_index(self.start)] = 1.0
        cfg = self.config
        return Cmdp(kernel, self.agent_reward, self.static_danger, initial, cfg.horizon, gamma=cfg.gamma, beta=cfg.beta)

    @cached_property
    def subsystem_cmdp(self) -> Cmdp:
        """Agent plus one moving obstacle; state index ``agent * n_obs + obstacle``."""
        n_ag, n_o, A = self.n_agent, self.n_obs_states, N_ACTIONS
        M = sp.coo_matrix(self.obstacle_kernel)
        ag, a = np.meshgrid(np.arange(n_ag), np.arange(A), indexing="ij")
        ag, a = ag.ravel(), a.ravel()
        ag2 = self.agent_next[ag, a]
        # every (agent, action) pair crossed with every obstacle transition
        rows = ((ag[:, None] * n_o + M.row[None, :]) * A + a[:, None]).ravel()
        cols = (ag2[:, None] * n_o + M.col[None, :]).ravel()
        vals = np.broadcast_to(M.data[None, :], (ag.size, M.nnz)).ravel()
        kernel = sp.csr_matrix((vals, (rows, cols)), shape=(n_ag * n_o * A, n_ag * n_o))
        S = n_ag * n_o
        s_ag, s_o = np.divmod(np.arange(S), n_o)
        danger = self.collision(s_ag[:, None], np.arange(A)[None, :], s_o[:, None])
        reward = self.agent_reward[s_ag]
        initial = np.kron(self.agent_cmdp.initial, self.obstacle_initial)
        cfg = self.config
        return Cmdp(kernel, reward, danger, initial, cfg.horizon, gamma=cfg.gamma, beta=cfg.beta)

    def lift_agent_policy(self, policy: Policy) -> Policy:
        """Agent-only policy viewed as a subsystem policy (ignores the obstacle)."""
        return Policy(np.repeat(policy.probs, self.n_obs_states, axis=1))

    def tiny_joint_cmdp(self, n_obstacles: int | None = None) -> Cmdp:
        """Explicit joint CMDP (agent x all obstacles); only for very small fields."""
        N = self.config.n_obstacles if n_obstacles is None else n_obstacles
        n_ag, n_o, A = self.n_agent, self.n_obs_states, N_ACTIONS
        S = n_ag * n_o**N
        if S * A > 2_000_000:
            raise MemoryError(f"joint CMDP with {S} states is too large to build explicitly")
        obs_kernel = sp.csr_matrix(np.ones((1, 1)))
        for _ in range(N):
            obs_kernel = sp.kron(obs_kernel, sp.csr_matrix(self.obstacle_kernel), format="csr")
        blocks = []
        for a in range(A):
            agent_kernel = sp.csr_matrix((np.ones(n_ag), (np.arange(n_ag), self.agent_next[:, a])), shape=(n_ag, n_ag))
            blocks.append(sp.kron(agent_kernel, obs_kernel, format="csr"))
        # interleave to row order s * A + a
        stacked = sp.vstack(blocks, format="csr")
        order = (np.arange(S)[:, None] + S * np.arange(A)[None, :]).ravel()
        kernel = stacked[order]
        ag = np.arange(S) // n_o**N
        danger = np.zeros((S, A))
        miss = np.ones((S, A))
        for n in range(N):
            o_n = (np.arange(S) // n_o ** (N - 1 - n)) % n_o
            miss *= 1.0 - self.collision(ag[:, None], np.arange(A)[None, :], o_n[:, None])
        danger = np.maximum(1.0 - miss, self.static_danger[ag])
        initial = self.agent_cmdp.initial
        for _ in range(N):
            initial = np.kron(initial, self.obstacle_initial)
        cfg = self.config
        return Cmdp(kernel, self.agent_reward[ag], danger, initial, cfg.horizon, gamma=cfg.gamma, beta=cfg.beta)

    def baseline_policy(self, obstacle_distribution: np.ndarray | None = None) -> Policy:
        """Agent-only policy minimizing the expected number of obstacle contacts.

        Obstacles are represented by their marginal distribution at each time
        (propagated from ``obstacle_distribution``, the start distribution by
        default) and counted ``n_obstacles`` times.  Ties favour the larger
        immediate reward, then the lowest action index.  Because it ignores
        the obstacles' actual positions it meets the agent-only hypothesis of
        the sum bound.
        """
        T, A = self.config.horizon, N_ACTIONS
        mu = self.obstacle_initial if obstacle_distribution is None else np.asarray(obstacle_distribution, float)
        marginals = []
        for _ in range(T):
            marginals.append(mu)
            mu = mu @ self.obstacle_kernel
        ag = np.arange(self.n_agent)
        live = ag != self.exited
        cur = np.maximum(self.agent_cur_cell, 0)
        new = np.maximum(self.agent_new_cell, 0)
        moved = self.agent_new_cell != self.agent_cur_cell[:, None]
        actions = np.zeros((T, self.n_agent), dtype=int)
        V = np.zeros(self.n_agent)
        N = max(self.config.n_obstacles, 1)
        for t in range(T - 1, -1, -1):
            m = marginals[t]
            contact = np.where(live, m[cur], 0.0)[:, None] + np.where(live[:, None] & moved, m[new], 0.0)
            Q = N * contact + self.static_danger + V[self.agent_next]
            near = Q <= Q.min(axis=1, keepdims=True) + 1e-12
            actions[t] = np.argmax(np.where(near, self.agent_reward, -np.inf), axis=1)
            V = Q[ag, actions[t]]
        return Policy.from_actions(actions, A)

    # -- exact joint threat -----------------------------------------------

    def joint_threat(self, agent_policy: Policy, n_obstacles: int | None = None):
        """Exact joint accident threat under an agent-only policy.

        Yields ``(t, Q_t)`` for ``t = T-1 .. 0`` where ``Q_t`` has shape
        ``(n_agent, n_obs, ..., n_obs, A)``.  Obstacles are integrated out one
        axis at a time, which keeps the cost far below an explicit joint CMDP.
        """
        N = self.config.n_obstacles if n_obstacles is None else n_obstacles
        T, A = self.config.horizon, N_ACTIONS
        n_ag, n_o = self.n_agent, self.n_obs_states
        if agent_policy.probs.shape != (T, n_ag, A):
            raise ValueError("agent policy must be (T, n_agent, A)")
        M = self.obstacle_kernel
        ag = np.arange(n_ag)
        # per-obstacle collision indicator, broadcast to the joint shape
        coll = self.collision(ag[:, None, None], np.arange(A)[None, None, :], np.arange(n_o)[None, :, None])
        miss = np.ones((n_ag,) + (n_o,) * N + (A,))
        for n in range(N):
            shape = [n_ag] + [1] * N + [A]
            shape[1 + n] = n_o
            miss = miss * (1.0 - coll.reshape(shape))
        static = self.static_danger.reshape((n_ag,) + (1,) * N + (A,))
        d = 1.0 - miss * (1.0 - static)
        V = np.zeros((n_ag,) + (n_o,) * N)
        for t in range(T - 1, -1, -1):
            W_ = V
            for n in range(N):
                W_ = np.moveaxis(np.tensordot(M, W_, axes=([1], [1 + n])), 0, 1 + n)
            cont = np.moveaxis(W_[self.agent_next], 1, -1)  # (n_ag, o..., A)
            Q = d + (1.0 - d) * cont
            yield t, Q
            V = np.einsum("a...k,ak->a...", Q, agent_policy.probs[t])

    def reachable_agent(self, agent_policy: Policy) -> np.ndarray:
        """``(T, n_agent)`` boolean: agent states reachable at each t."""
        mu = np.zeros(self.n_agent, dtype=bool)
        mu[self.agent_index(self.start)] = True
        out = np.zeros((self.config.horizon, self.n_agent), dtype=bool)
        for t in range(self.config.horizon):
            out[t] = mu
            acts = agent_policy.probs[t] > 0
            nxt = np.zeros(self.n_agent, dtype=bool)
            nxt[self.agent_next[acts & mu[:, None]]] = True
            mu = nxt
        return out

    def reachable_obstacle(self) -> np.ndarray:
        out = np.zeros((self.config.horizon, self.n_obs_states), dtype=bool)
        mu = self.obstacle_initial > 0
        for t in range(self.config.horizon):
            out[t] = mu
            mu = (mu.astype(float) @ self.obstacle_kernel) > 0
        return out

    # -- simulation -------------------------------------------------------

    def env(self, n_obstacles: int | None = None) -> "JamEnv":
        return JamEnv(self, self.config.n_obstacles if n_obstacles is None else n_obstacles)


@dataclass(frozen=True)
class JamState:
    agent: int
    obstacles: tuple[int, ...]


class JamEnv:
    """Joint simulator following :class:`EpisodicEnv`."""

    OFFSET_RADIUS = 2

    def __init__(self, world: JamWorld, n_obstacles: int):
        self.world = world
        self.n_obstacles = n_obstacles
        self.n_actions = N_ACTIONS
        self.horizon = world.config.horizon
        self.gamma = world.config.gamma
        self._obs_cdf = np.cumsum(world.obstacle_kernel, axis=1)

    def reset(self, rng: np.random.Generator) -> JamState:
        w = self.world
        probs = np.broadcast_to(w.obstacle_initial, (self.n_obstacles, w.n_obs_states))
        obstacles = _sample_categorical(probs, rng.random(self.n_obstacles))
        return JamState(w.agent_index(w.start), tuple(int(o) for o in obstacles))

    def collisions(self, state: JamState, action: int) -> int:
        w = self.world
        obs = np.asarray(state.obstacles, dtype=int)
        hits = int(w.collision(state.agent, action, obs).sum()) if obs.size else 0
        return hits + int(w.static_danger[state.agent, action])

    def step(self, state: JamState, action: int, t: int, rng: np.random.Generator):
        w = self.world
        hits = self.collisions(state, action)
        reward = float(w.agent_reward[state.agent, action]) - w.config.collision_penalty * hits
        obs = np.asarray(state.obstacles, dtype=int)
        u = rng.random(obs.size)
        new_obs = np.minimum((u[:, None] >= self._obs_cdf[obs]).sum(axis=1), w.n_obs_states - 1)
        nxt = JamState(int(w.agent_next[state.agent, action]), tuple(int(o) for o in new_obs))
        danger = float(hits > 0)
        return nxt, reward, danger, hits > 0

    # observation for tabular learners: agent state x offset of the nearest obstacle
    @property
    def n_observations(self) -> int:
        side = 2 * self.OFFSET_RADIUS + 1
        return self.world.n_agent * (side * side + 1)

    def observe(self, state: JamState) -> int:
        w = self.world
        side = 2 * self.OFFSET_RADIUS + 1
        bucket = side * side
        cell = w.agent_cell(state.agent)
        if cell is not None:
            best = None
            for o in state.obstacles:
                if o == w.gone:
                    continue
                orow, ocol = divmod(o, w.W)
                dr, dc = orow - cell[0], ocol - cell[1]
                dist = max(abs(dr), abs(dc))
                if dist <= self.OFFSET_RADIUS and (best is None or dist < best[0]):
                    best = (dist, dr, dc)
            if best is not None:
                bucket = (best[1] + self.OFFSET_RADIUS) * side + best[2] + self.OFFSET_RADIUS
        return state.agent * (side * side + 1) + bucket


# -- agent-centred subsystem ------------------------------------------------


@dataclass(frozen=True, eq=False)
class RelativeModel:
    """Agent velocity x obstacle offset on an unbounded field.

    States are ``velocity * side^2 + (dr + R) * side + (dc + R)`` plus a final
    *far* state for offsets beyond ``radius``.  With ``radius >= 2 * horizon``
    an obstacle that leaves the window can never come back in time, so the
    truncation is exact.
    """

    radius: int
    cmdp: Cmdp

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    def state_index(self, velocity: tuple[int, int], offset: tuple[int, int]) -> int:
        R = self.radius
        return velocity_index(*velocity) * self.side**2 + (offset[0] + R) * self.side + offset[1] + R

    @property
    def far(self) -> int:
        return N_VEL * self.side**2


def relative_model(
    horizon: int,
    stay_prob: float = 0.5,
    radius: int | None = None,
    beta: float = 0.9,
) -> RelativeModel:
    R = 2 * horizon if radius is None else radius
    if R < 1:
        raise ValueError("radius must be >= 1")
    side = 2 * R + 1
    n = N_VEL * side * side + 1
    far = n - 1
    A = N_ACTIONS
    move_p = (1.0 - stay_prob) / 4.0
    rows, cols, vals = [], [], []
    danger = np.zeros((n, A))
    for vi, (vr, vc) in enumerate(VELOCITIES):
        for dr in range(-R, R + 1):
            for dc in range(-R, R + 1):
                s = vi * side * side + (dr + R) * side + dc + R
                for a, (ar, ac) in enumerate(ACCELERATIONS):
                    nvr, nvc = int(np.clip(vr + ar, -1, 1)), int(np.clip(vc + ac, -1, 1))
                    danger[s, a] = float((dr, dc) == (0, 0) or (dr, dc) == (nvr, nvc))
                    nvi = velocity_index(nvr, nvc)
                    for m, (mr, mc) in enumerate(OBSTACLE_MOVES):
                        p = stay_prob if m == 0 else move_p
                        if p == 0:
                            continue
                        r2, c2 = dr + mr - nvr, dc + mc - nvc
                        if max(abs(r2), abs(c2)) > R:
                            s2 = far
                        else:
                            s2 = nvi * side * side + (r2 + R) * side + c2 + R
                        rows.append(s * A + a)
                        cols.append(s2)
                        vals.append(p)
    for a in range(A):
        rows.append(far * A + a)
        cols.append(far)
        vals.append(1.0)
    kernel = sp.csr_matrix((vals, (rows, cols)), shape=(n * A, n))
    initial = np.zeros(n)
    initial[far] = 1.0
    cmdp = Cmdp(kernel, np.zeros((n, A)), danger, initial, horizon, gamma=1.0, beta=beta)
    return RelativeModel(R, cmdp)


__all__ = [
    "ACCELERATIONS",
    "JamConfig",
    "JamEnv",
    "JamState",
    "JamWorld",
    "N_ACTIONS",
    "RelativeModel",
    "VELOCITIES",
    "relative_model",
    "velocity_index",
]
