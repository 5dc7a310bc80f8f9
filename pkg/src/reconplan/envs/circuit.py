"""Grid race circuit with momentum.

State is ``(cell, heading, speed)`` with headings east/south/west/north and
speed in {0, 1, 2}.  Each step first moves ``speed`` cells along the current
heading; touching a wall is a crash that leaves the car on the last free cell
with speed 0.  The action then steers (left / straight / right) and
accelerates (-1 / 0 / +1), and with probability ``surge`` a new speed of 1
jumps to 2.  Because the move only depends on the state, the crash indicator
is a deterministic function of ``(s, a)``, which keeps the accident
probability recursion exact.

Progress is measured by the angle swept around the layout's centre, scaled
so that one lap is worth ``lap_reward``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cmdp import Cmdp
from .layout import START, WALL, LayoutError, parse_layout

HEADINGS = ((0, 1), (1, 0), (0, -1), (-1, 0))  # E, S, W, N in (row, col)
STEERS = (-1, 0, 1)  # left, straight, right (clockwise on screen is +1)
ACCELS = (-1, 0, 1)
N_SPEEDS = 3
N_ACTIONS = len(STEERS) * len(ACCELS)

RING_12 = "######/#S...#/#.##.#/#.##.#/#....#/######"
RING_WIDE = "########/#S.....#/#......#/#..##..#/#..##..#/#......#/#......#/########"
RING_WIDE_NARROWED = "########/#S.....#/#.####.#/#.####.#/#.####.#/#.####.#/#......#/########"
RING_LONG = "##########/#S.......#/#........#/#..####..#/#........#/#........#/##########"
RING_LONG_NARROWED = "##########/#S.......#/#.######.#/#.######.#/#.######.#/#........#/##########"


@dataclass(frozen=True)
class CircuitConfig:
    layout: str = RING_LONG
    horizon: int = 16
    surge: float = 0.2
    lap_reward: float = 1250.0
    crash_penalty: float = 200.0
    stop_penalty: float = 1.0
    max_speed: int = 2
    start_heading: int = 0
    gamma: float = 1.0
    beta: float = 0.9


def action_index(steer: int, accel: int) -> int:
    return STEERS.index(steer) * len(ACCELS) + ACCELS.index(accel)


@dataclass(frozen=True, eq=False)
class CircuitWorld:
    config: CircuitConfig
    grid: np.ndarray
    track: tuple[tuple[int, int], ...]
    cmdp: Cmdp
    features: np.ndarray  # (S,) feature index per state for transfer learners
    n_features: int

    def state_index(self, cell: tuple[int, int], heading: int, speed: int) -> int:
        return (self.track.index(cell) * 4 + heading) * N_SPEEDS + speed

    def decode(self, s: int) -> tuple[tuple[int, int], int, int]:
        cell_i, rest = divmod(s, 4 * N_SPEEDS)
        heading, speed = divmod(rest, N_SPEEDS)
        return self.track[cell_i], heading, speed

    @property
    def start_state(self) -> int:
        return int(np.flatnonzero(self.cmdp.initial)[0])


def _check_connected(grid: np.ndarray, track: list[tuple[int, int]]) -> None:
    cells = set(track)
    seen = {track[0]}
    stack = [track[0]]
    while stack:
        r, c = stack.pop()
        for dr, dc in HEADINGS:
            nb = (r + dr, c + dc)
            if nb in cells and nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != len(cells):
        raise LayoutError("track is disconnected")


def _is_free(grid: np.ndarray, r: int, c: int) -> bool:
    H, W = grid.shape
    return 0 <= r < H and 0 <= c < W and grid[r, c] != WALL


def _move(grid, cell, heading, speed):
    """Advance ``speed`` cells; returns (cell, crashed)."""
    r, c = cell
    dr, dc = HEADINGS[heading]
    for _ in range(speed):
        if not _is_free(grid, r + dr, c + dc):
            return (r, c), True
        r, c = r + dr, c + dc
    return (r, c), False


def _free_ahead(grid, cell, heading, cap=3) -> int:
    r, c = cell
    dr, dc = HEADINGS[heading]
    n = 0
    while n < cap and _is_free(grid, r + dr * (n + 1), c + dc * (n + 1)):
        n += 1
    return n


def grid_circuit(config: CircuitConfig = CircuitConfig()) -> CircuitWorld:
    grid = parse_layout(config.layout)
    track = [tuple(int(v) for v in rc) for rc in np.argwhere(grid != WALL)]
    if not track:
        raise LayoutError("layout has no track cells")
    _check_connected(grid, track)
    starts = [cell for cell in track if grid[cell] == START]
    if len(starts) != 1:
        raise LayoutError("layout needs exactly one start cell")
    if not 0 <= config.max_speed < N_SPEEDS:
        raise ValueError(f"max_speed must lie in [0, {N_SPEEDS - 1}]")
    if not 0.0 <= config.surge <= 1.0:
        raise ValueError("surge probability must lie in [0, 1]")
    index = {cell: i for i, cell in enumerate(track)}
    centre = np.array(grid.shape, dtype=float) / 2.0 - 0.5
    angle = {cell: np.arctan2(cell[0] - centre[0], cell[1] - centre[1]) for cell in track}

    # lap direction: sign of the angle swept by one step along the start heading
    s_cell = starts[0]
    probe, _ = _move(grid, s_cell, config.start_heading, 1)
    sweep = np.angle(np.exp(1j * (angle[probe] - angle[s_cell])))
    direction = 1.0 if sweep >= 0 else -1.0
    scale = config.lap_reward / (2 * np.pi)

    n_cells = len(track)
    S = n_cells * 4 * N_SPEEDS
    A = N_ACTIONS
    P = np.zeros((S, A, S))
    reward = np.zeros((S, A))
    danger = np.zeros((S, A))
    features = np.zeros(S, dtype=int)
    for cell in track:
        for heading in range(4):
            for speed in range(N_SPEEDS):
                s = (index[cell] * 4 + heading) * N_SPEEDS + speed
                landed, crashed = _move(grid, cell, heading, speed)
                progress = direction * np.angle(np.exp(1j * (angle[landed] - angle[cell])))
                r = scale * progress - config.crash_penalty * crashed - config.stop_penalty * (speed == 0)
                reward[s] = r
                danger[s] = float(crashed)
                carried = 0 if crashed else speed
                for steer in STEERS:
                    new_heading = (heading + steer) % 4
                    for accel in ACCELS:
                        a = action_index(steer, accel)
                        new_speed = int(np.clip(carried + accel, 0, config.max_speed))
                        base = (index[landed] * 4 + new_heading) * N_SPEEDS
                        if new_speed == 1 and config.max_speed >= 2 and config.surge > 0:
                            P[s, a, base + 1] += 1.0 - config.surge
                            P[s, a, base + 2] += config.surge
                        else:
                            P[s, a, base + new_speed] += 1.0
                ahead = _free_ahead(grid, cell, heading)
                left = int(_is_free(grid, cell[0] + HEADINGS[(heading - 1) % 4][0], cell[1] + HEADINGS[(heading - 1) % 4][1]))
                right = int(_is_free(grid, cell[0] + HEADINGS[(heading + 1) % 4][0], cell[1] + HEADINGS[(heading + 1) % 4][1]))
                features[s] = ((ahead * 2 + left) * 2 + right) * N_SPEEDS + speed
    initial = np.zeros(S)
    initial[(index[s_cell] * 4 + config.start_heading) * N_SPEEDS] = 1.0
    cmdp = Cmdp(P, reward, danger, initial, config.horizon, gamma=config.gamma, beta=config.beta)
    return CircuitWorld(config, grid, tuple(track), cmdp, features, 4 * 2 * 2 * N_SPEEDS)
