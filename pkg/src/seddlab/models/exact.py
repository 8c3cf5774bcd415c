"""Oracle-backed score provider: the ground-truth concrete score as a model."""

from __future__ import annotations

import numpy as np

from seddlab.noise import NoiseKernel, Schedule
from seddlab.oracle import EnumeratedDistribution, exact_pt, exact_score_table, sequence_to_index
from .transformer import Counters


class ExactScoreModel:
    """Serves p_t(y)/p_t(x) from the enumeration oracle, batched by state index."""

    def __init__(self, p0: EnumeratedDistribution, kernel: NoiseKernel):
        self.p0 = p0
        self.kernel = kernel
        self.counters = Counters()
        self._cache: dict[float, np.ndarray] = {}

    def _table(self, sigma_bar: float) -> np.ndarray:
        key = round(float(sigma_bar), 12)
        if key not in self._cache:
            pt = exact_pt(self.p0, self.kernel, float(sigma_bar))
            self._cache[key] = exact_score_table(pt)
        return self._cache[key]

    def score_array(self, tokens: np.ndarray, sigma_bar: float) -> np.ndarray:
        tokens = np.atleast_2d(np.asarray(tokens))
        self.counters.forward_passes += 1
        table = self._table(sigma_bar)
        return table[sequence_to_index(tokens, self.kernel.n)]
