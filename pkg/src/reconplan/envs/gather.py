"""Grid gather: collect apples, avoid bombs.

State is ``(cell, collected-apple bitmask)``.  Five moves (stay, up, down,
left, right); with probability ``slip`` the move is replaced by a uniformly
random one.  The danger of a step is the probability of landing on a bomb;
the reward is the expected apple reward collected by the step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cmdp import Cmdp, episode_rng
from .layout import APPLE, BOMB, START, WALL, LayoutError, cells_of, parse_layout

MOVES = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True)
class GatherConfig:
    width: int = 6
    height: int = 6
    n_apples: int = 2
    n_bombs: int = 10
    apple_reward: float = 10.0
    slip: float = 0.1
    horizon: int = 10
    gamma: float = 0.99
    beta: float = 0.9
    seed: int = 0
    layout: str | None = None  # overrides random placement when given


@dataclass(frozen=True, eq=False)
class GatherWorld:
    config: GatherConfig
    grid: np.ndarray
    apples: tuple[tuple[int, int], ...]
    bombs: tuple[tuple[int, int], ...]
    start: tuple[int, int]
    cmdp: Cmdp

    def state_index(self, cell: tuple[int, int], mask: int) -> int:
        r, c = cell
        return (r * self.grid.shape[1] + c) * (1 << len(self.apples)) + mask

    def decode(self, s: int) -> tuple[tuple[int, int], int]:
        n_masks = 1 << len(self.apples)
        cell, mask = divmod(s, n_masks)
        return divmod(cell, self.grid.shape[1]), mask


def _placed_grid(cfg: GatherConfig) -> np.ndarray:
    if cfg.layout is not None:
        return parse_layout(cfg.layout)
    n_cells = cfg.width * cfg.height
    need = cfg.n_apples + cfg.n_bombs + 1
    if need > n_cells:
        raise LayoutError(f"{need} placements do not fit a {cfg.width}x{cfg.height} field")
    grid = np.full((cfg.height, cfg.width), ".")
    rng = episode_rng(cfg.seed)
    order = rng.permutation(n_cells)
    grid.flat[order[0]] = START
    grid.flat[order[1 : 1 + cfg.n_apples]] = APPLE
    grid.flat[order[1 + cfg.n_apples : need]] = BOMB
    return grid


def grid_gather(config: GatherConfig = GatherConfig()) -> GatherWorld:
    grid = _placed_grid(config)
    H, W = grid.shape
    apples = tuple(cells_of(grid, APPLE))
    bombs = tuple(cells_of(grid, BOMB))
    starts = cells_of(grid, START)
    if len(starts) != 1:
        raise LayoutError("layout needs exactly one start cell")
    if len(apples) > 10:
        raise LayoutError("too many apples for a bitmask state")
    n_masks = 1 << len(apples)
    S, A = H * W * n_masks, len(MOVES)
    apple_id = {cell: i for i, cell in enumerate(apples)}
    bomb_set = set(bombs)

    def land(r, c, dr, dc):
        r2, c2 = r + dr, c + dc
        if not (0 <= r2 < H and 0 <= c2 < W) or grid[r2, c2] == WALL:
            return r, c
        return r2, c2

    P = np.zeros((S, A, S))
    reward = np.zeros((S, A))
    danger = np.zeros((S, A))
    slip = config.slip
    for r in range(H):
        for c in range(W):
            if grid[r, c] == WALL:
                for mask in range(n_masks):
                    s = (r * W + c) * n_masks + mask
                    P[s, :, s] = 1.0
                continue
            for mask in range(n_masks):
                s = (r * W + c) * n_masks + mask
                for a in range(A):
                    outcome = np.full(A, slip / A)
                    outcome[a] += 1.0 - slip
                    for m, p in enumerate(outcome):
                        r2, c2 = land(r, c, *MOVES[m])
                        mask2 = mask
                        if (r2, c2) in apple_id and not mask >> apple_id[(r2, c2)] & 1:
                            mask2 = mask | 1 << apple_id[(r2, c2)]
                            reward[s, a] += p * config.apple_reward
                        if (r2, c2) in bomb_set:
                            danger[s, a] += p
                        P[s, a, (r2 * W + c2) * n_masks + mask2] += p
    initial = np.zeros(S)
    sr, sc = starts[0]
    initial[(sr * W + sc) * n_masks] = 1.0
    cmdp = Cmdp(P, reward, danger, initial, config.horizon, gamma=config.gamma, beta=config.beta)
    return GatherWorld(config, grid, apples, bombs, starts[0], cmdp)
