"""Exact-capacity tabular score model for enumerable toys.

One positive score field per (sequence state, noise bucket). Buckets are
log-spaced in cumulative noise; queries snap to the nearest bucket knot.
Fitting minimizes the exact expected score-entropy objective (enumerated
over all clean/corrupted pairs), so the optimum at each knot is the true
concrete score there.
"""

from __future__ import annotations

import numpy as np

from seddlab import engine as E
from seddlab.noise import NoiseKernel, Schedule, T_FLOOR
from seddlab.oracle import (
    EnumeratedDistribution,
    enumerate_sequences,
    sequence_to_index,
)
from .transformer import Counters


def noise_buckets(schedule: Schedule, n_buckets: int, t_floor: float = T_FLOOR) -> np.ndarray:
    """Log-spaced cumulative-noise knots covering sigma_bar([t_floor, 1])."""
    lo = float(schedule.total(t_floor))
    hi = float(schedule.total(1.0))
    return np.exp(np.linspace(np.log(lo), np.log(hi), n_buckets))


class TabularScoreModel:
    """Dense lookup (state, bucket) -> positive L x N score field."""

    def __init__(self, n: int, length: int, bucket_sigmas: np.ndarray, dtype=np.float64):
        self.n = n
        self.length = length
        self.bucket_sigmas = np.asarray(bucket_sigmas, dtype=np.float64)
        self.n_states = n ** length
        self.n_buckets = len(self.bucket_sigmas)
        self.counters = Counters()
        self.dtype = dtype
        self.table = E.parameter(
            np.zeros((self.n_states * self.n_buckets, length * n)), dtype=dtype)

    def param_list(self) -> list[E.Tensor]:
        return [self.table]

    def bucket_index(self, sigma_bar: float) -> int:
        return int(np.abs(np.log(self.bucket_sigmas) - np.log(max(sigma_bar, 1e-300))).argmin())

    def score_forward(self, tokens: np.ndarray, sigma_bar: float) -> E.Tensor:
        tokens = np.atleast_2d(np.asarray(tokens))
        b = tokens.shape[0]
        self.counters.forward_passes += 1
        states = sequence_to_index(tokens, self.n)
        rows = states * self.n_buckets + self.bucket_index(float(sigma_bar))
        logits = E.embedding(self.table, rows)
        return E.exp(E.reshape(logits, (b, self.length, self.n)))

    def score_array(self, tokens: np.ndarray, sigma_bar: float) -> np.ndarray:
        with E.no_grad():
            return self.score_forward(tokens, sigma_bar).data

    def dense_scores(self, bucket: int) -> np.ndarray:
        """All score fields at one bucket knot: (n_states, L, N)."""
        rows = np.arange(self.n_states) * self.n_buckets + bucket
        with E.no_grad():
            return np.exp(self.table.data[rows].reshape(self.n_states, self.length, self.n))


def fit_tabular_score(p0: EnumeratedDistribution, kernel: NoiseKernel, schedule: Schedule,
                      n_buckets: int = 24, iters: int = 400, lr: float = 0.25,
                      seed: int = 0) -> TabularScoreModel:
    """Train the lookup on the exact expected DSE objective at each knot.

    Enumerates every (clean, corrupted) pair with its joint probability and
    runs full-batch adaptive gradient descent; the objective is convex in
    the log-score table.
    """
    from seddlab.training import dse_loss

    n, length = kernel.n, p0.length
    buckets = noise_buckets(schedule, n_buckets)
    model = TabularScoreModel(n, length, buckets)

    clean_seqs = enumerate_sequences(p0.n, length)
    full_seqs = enumerate_sequences(n, length)
    per_bucket = []
    for sig in buckets:
        trans = kernel.transition_matrix(float(sig))
        rows_x0, rows_xt, joint = [], [], []
        for ci, x0 in enumerate(clean_seqs):
            if p0.probs[ci] == 0:
                continue
            probs = p0.probs[ci]
            lik = np.ones(len(full_seqs))
            for pos in range(length):
                lik *= trans[x0[pos], full_seqs[:, pos]]
            keep = lik > 1e-14
            rows_x0.append(np.repeat(x0[None, :], keep.sum(), axis=0))
            rows_xt.append(full_seqs[keep])
            joint.append(probs * lik[keep])
        per_bucket.append((float(sig), np.concatenate(rows_x0),
                           np.concatenate(rows_xt), np.concatenate(joint)))

    state = E.OptimState(model.param_list(), lr=lr)
    # invert the schedule at each knot to get the matching instantaneous rate
    ts = np.linspace(T_FLOOR, 1.0, 4097)
    sig_of_t = np.asarray(schedule.total(ts))
    for step in range(iters):
        state.lr = lr / (1.0 + 4.0 * step / iters)
        with E.record() as tape:
            total = None
            for sig, x0_rows, xt_rows, joint in per_bucket:
                t_at = float(np.interp(np.log(sig), np.log(sig_of_t), ts))
                sig_t = float(schedule.rate(t_at))
                field = model.score_forward(xt_rows, sig)
                part = dse_loss(field, x0_rows, xt_rows, sig, sig_t, kernel,
                                sequence_weights=joint).loss
                total = part if total is None else E.add(total, part)
        grads = tape.backward(total, params=model.param_list())
        E.optimizer_step(model.param_list(), grads, state)
    return model
