"""Seeded random CMDPs used as property-test substrate."""

from __future__ import annotations

import numpy as np

from ..cmdp import Cmdp, episode_rng


def random_cmdp(
    n_states: int,
    n_actions: int,
    horizon: int,
    hazard_density: float = 0.3,
    seed: int = 0,
    gamma: float = 0.95,
    beta: float = 0.9,
    concentration: float = 1.0,
    sparsity: float = 0.0,
    random_initial: bool = False,
) -> Cmdp:
    """Dirichlet transition rows, uniform rewards in [0, 1), Bernoulli dangers.

    ``sparsity`` zeroes a fraction of each transition row before
    renormalizing (at least one entry always survives).  The initial
    distribution is a point mass on state 0 unless ``random_initial``.
    """
    if min(n_states, n_actions, horizon) < 1:
        raise ValueError("sizes must be >= 1")
    if not 0.0 <= hazard_density <= 1.0:
        raise ValueError("hazard_density must lie in [0, 1]")
    rng = episode_rng(seed)
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    if sparsity > 0:
        mask = rng.random(P.shape) >= sparsity
        keep = rng.integers(n_states, size=(n_states, n_actions))
        np.put_along_axis(mask, keep[..., None], True, axis=2)
        P = np.where(mask, P, 0.0)
        P /= P.sum(axis=2, keepdims=True)
    reward = rng.random((n_states, n_actions))
    danger = (rng.random((n_states, n_actions)) < hazard_density).astype(float)
    if random_initial:
        initial = rng.dirichlet(np.ones(n_states))
    else:
        initial = np.zeros(n_states)
        initial[0] = 1.0
    return Cmdp(P, reward, danger, initial, horizon, gamma=gamma, beta=beta)
