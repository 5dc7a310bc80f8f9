"""Episodic environment protocol shared by learners, controllers and the runner."""

from __future__ import annotations

from typing import Any, Protocol

import numpy as np

from ..cmdp import Cmdp


class EpisodicEnv(Protocol):
    """Minimal simulator interface.

    ``step`` returns ``(next_state, reward, danger, accident)`` where ``danger``
    is the CMDP danger value of the step and ``accident`` a realized boolean
    (drawn as Bernoulli(``danger``) when danger is fractional).
    """

    n_actions: int
    horizon: int
    gamma: float

    def reset(self, rng: np.random.Generator) -> Any: ...

    def step(self, state: Any, action: int, t: int, rng: np.random.Generator) -> tuple[Any, float, float, bool]: ...

    def observe(self, state: Any) -> int: ...

    @property
    def n_observations(self) -> int: ...


class CmdpEnv:
    """Simulate a tabular :class:`Cmdp` one step at a time.

    ``features`` optionally maps each state to an observation index (state
    aggregation); learners that read ``observe`` then generalize across
    states sharing a feature, which is what makes transfer possible.
    ``n_features`` fixes the observation count when some features may not
    occur on a particular layout.
    """

    def __init__(self, cmdp: Cmdp, features: np.ndarray | None = None, n_features: int | None = None):
        self.cmdp = cmdp
        self.n_actions = cmdp.n_actions
        self.horizon = cmdp.horizon
        self.gamma = cmdp.gamma
        if features is None:
            features = np.arange(cmdp.n_states)
        self.features = np.asarray(features, dtype=int)
        if self.features.shape != (cmdp.n_states,):
            raise ValueError("need one feature index per state")
        self._n_features = int(self.features.max()) + 1 if n_features is None else int(n_features)
        if self.features.min() < 0 or self.features.max() >= self._n_features:
            raise ValueError("feature indices must lie in [0, n_features)")
        csr = cmdp.csr
        self._indptr = csr.indptr
        self._indices = csr.indices
        # within-row cumulative probabilities for inverse-CDF sampling
        data = csr.data.copy()
        for lo, hi in zip(csr.indptr[:-1], csr.indptr[1:]):
            data[lo:hi] = np.cumsum(data[lo:hi])
        self._cum = data
        self._initial_cdf = np.cumsum(cmdp.initial)

    @property
    def n_observations(self) -> int:
        return self._n_features

    def reset(self, rng: np.random.Generator) -> int:
        u = rng.random() * self._initial_cdf[-1]
        return int(min(np.searchsorted(self._initial_cdf, u, side="right"), self.cmdp.n_states - 1))

    def step(self, state: int, action: int, t: int, rng: np.random.Generator):
        row = state * self.cmdp.n_actions + action
        lo, hi = self._indptr[row], self._indptr[row + 1]
        cum = self._cum[lo:hi]
        pos = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), hi - lo - 1)
        nxt = int(self._indices[lo + pos])
        d = float(self.cmdp.danger[state, action])
        accident = bool(rng.random() < d)
        return nxt, float(self.cmdp.reward[state, action]), d, accident

    def observe(self, state: int) -> int:
        return int(self.features[state])
