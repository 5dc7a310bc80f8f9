"""ASCII grid layouts and JSON environment configs."""

from __future__ import annotations

import json
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

WALL = "#"
FREE = "."
START = "S"
EXIT = "E"
SAFE_ZONE = "Z"
APPLE = "A"
BOMB = "B"
OBSTACLE = "O"


class LayoutError(ValueError):
    pass


def parse_layout(text: str) -> np.ndarray:
    """Character grid from newline- or slash-separated rows."""
    rows = [r for r in text.replace("/", "\n").strip().splitlines() if r.strip()]
    if not rows:
        raise LayoutError("empty layout")
    width = max(len(r) for r in rows)
    if any(len(r) != width for r in rows):
        raise LayoutError("layout rows must have equal length")
    return np.array([list(r) for r in rows])


def load_layout(path: str | Path) -> np.ndarray:
    return parse_layout(Path(path).read_text())


def render_layout(grid: np.ndarray) -> str:
    return "\n".join("".join(row) for row in grid)


def cells_of(grid: np.ndarray, char: str) -> list[tuple[int, int]]:
    return [tuple(int(v) for v in rc) for rc in np.argwhere(grid == char)]


def config_to_json(config) -> str:
    return json.dumps(asdict(config), indent=2, sort_keys=True)


def config_from_dict(cls, doc: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    converted = {}
    for key, value in doc.items():
        # JSON has no tuples; coordinate lists come back as lists of lists
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        converted[key] = value
    return cls(**converted)
