"""Exact brute-force reference for tiny state spaces (N^L <= 4096).

Everything here is dense enumeration: sequence-level distributions as flat
tables, corruption applied through a matrix exponential, concrete scores
and reverse kernels by direct division. The rest of the package is tested
against this module, never the other way around.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .noise import NoiseKernel, Schedule

STATE_BUDGET = 4096


class OracleError(ValueError):
    pass


def matrix_exponential(q_scaled: np.ndarray) -> np.ndarray:
    """exp(A) for a scaled generator A, by scaling-and-squaring with Taylor terms.

    Rows of A must sum to zero; rows of the result sum to one.
    """
    a = np.asarray(q_scaled, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise OracleError(f"generator must be square, got {a.shape}")
    if np.abs(a.sum(axis=1)).max() > 1e-9:
        raise OracleError("generator rows must sum to zero")
    norm = np.abs(a).sum(axis=1).max()
    squarings = max(0, int(np.ceil(np.log2(max(norm, 1e-16)))) + 1)
    small = a / (2 ** squarings)
    result = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for k in range(1, 40):
        term = term @ small / k
        result = result + term
        if np.abs(term).max() < 1e-18:
            break
    for _ in range(squarings):
        result = result @ result
    return result


def enumerate_sequences(n: int, length: int) -> np.ndarray:
    """All sequences in X^L as an (n^length, length) int array, row i encoding i in base n."""
    _check_budget(n, length)
    idx = np.arange(n ** length)
    out = np.empty((idx.size, length), dtype=np.int64)
    for pos in range(length - 1, -1, -1):
        out[:, pos] = idx % n
        idx = idx // n
    return out


def sequence_to_index(seq: np.ndarray, n: int) -> np.ndarray:
    seq = np.asarray(seq)
    length = seq.shape[-1]
    weights = n ** np.arange(length - 1, -1, -1)
    return (seq * weights).sum(axis=-1)


def _check_budget(n: int, length: int) -> None:
    if n ** length > STATE_BUDGET:
        raise OracleError(f"state space {n}^{length} exceeds oracle budget {STATE_BUDGET}")


@dataclass
class EnumeratedDistribution:
    """Dense probability table over X^L."""

    probs: np.ndarray
    n: int
    length: int

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        _check_budget(self.n, self.length)
        if self.probs.shape != (self.n ** self.length,):
            raise OracleError(
                f"table must have {self.n ** self.length} entries, got {self.probs.shape}")
        if self.probs.min() < 0:
            raise OracleError("probabilities must be nonnegative")
        if abs(self.probs.sum() - 1.0) > 1e-10:
            raise OracleError(f"probabilities sum to {self.probs.sum()}, not 1")

    def tv_distance(self, other: "EnumeratedDistribution") -> float:
        return 0.5 * float(np.abs(self.probs - other.probs).sum())


def exact_pt(p0: EnumeratedDistribution, kernel: NoiseKernel, sigma_bar: float) -> EnumeratedDistribution:
    """Corruption marginal at noise sigma_bar, each position corrupted independently.

    p_t(x) = sum_x0 p_0(x0) prod_i P[x0_i, x_i], applied axis by axis.
    """
    if kernel.kind == "uniform":
        compatible = kernel.n == p0.n
    else:
        compatible = kernel.n in (p0.n, p0.n + 1)
    if not compatible:
        raise OracleError(f"kernel over {kernel.n} states incompatible with data over {p0.n}")
    n, length = kernel.n, p0.length
    _check_budget(n, length)
    transition = matrix_exponential(sigma_bar * kernel.generator())
    grid = p0.probs.reshape((p0.n,) * length)
    if kernel.n > p0.n:  # absorbing MASK extends the state space
        padded = np.zeros((n,) * length)
        padded[(slice(0, p0.n),) * length] = grid
        grid = padded
    for _ in range(length):
        # contract the leading axis against P and move the result last
        grid = np.tensordot(transition.T, grid, axes=([1], [0]))
        grid = np.moveaxis(grid, 0, -1)
    return EnumeratedDistribution(grid.reshape(-1), n, length)


def exact_concrete_score(pt: EnumeratedDistribution, x: np.ndarray) -> np.ndarray:
    """True ratios p_t(x with position i replaced by y) / p_t(x), shape (L, N)."""
    x = np.asarray(x)
    n, length = pt.n, pt.length
    base = sequence_to_index(x, n)
    px = pt.probs[base]
    if px <= 0.0:
        raise OracleError("conditioning sequence has zero probability")
    scores = np.empty((length, n))
    weights = n ** np.arange(length - 1, -1, -1)
    for i in range(length):
        neighbor = base + (np.arange(n) - x[i]) * weights[i]
        scores[i] = pt.probs[neighbor] / px
    return scores


def exact_score_table(pt: EnumeratedDistribution) -> np.ndarray:
    """Concrete scores for every sequence: (n^L, L, N). Zero-prob rows are zero."""
    n, length = pt.n, pt.length
    seqs = enumerate_sequences(n, length)
    table = np.zeros((seqs.shape[0], length, n))
    for s in range(seqs.shape[0]):
        if pt.probs[s] > 0:
            table[s] = exact_concrete_score(pt, seqs[s])
    return table


def exact_forward_table(kernel: NoiseKernel, length: int, dsigma: float) -> np.ndarray:
    """Sequence-level forward transition over a noise increment: (n^L, n^L)."""
    n = kernel.n
    _check_budget(n, length)
    per_token = matrix_exponential(dsigma * kernel.generator())
    table = np.ones((1, 1))
    for _ in range(length):
        table = np.kron(table, per_token)
    return table


def exact_reverse_tables(p0: EnumeratedDistribution, kernel: NoiseKernel,
                         schedule: Schedule, time_grid: np.ndarray) -> list[np.ndarray]:
    """Exact reverse transition tables along a decreasing time grid.

    Entry k maps time_grid[k] -> time_grid[k+1]: rows indexed by x_t, columns
    by x_s, via Bayes over the exact marginals. Rows conditioned on
    zero-probability states are left as point masses on themselves.
    """
    time_grid = np.asarray(time_grid, dtype=np.float64)
    if np.any(np.diff(time_grid) >= 0):
        raise OracleError("time grid must be strictly decreasing")
    tables = []
    for t, s in zip(time_grid[:-1], time_grid[1:]):
        sig_t = float(schedule.total(t))
        sig_s = float(schedule.total(s))
        p_t = exact_pt(p0, kernel, sig_t)
        p_s = exact_pt(p0, kernel, sig_s)
        forward = exact_forward_table(kernel, p0.length, sig_t - sig_s)  # rows x_s, cols x_t
        joint = p_s.probs[:, None] * forward  # P(x_s, x_t)
        reverse = np.zeros_like(joint.T)
        alive = p_t.probs > 0
        reverse[alive] = joint.T[alive] / p_t.probs[alive, None]
        dead = np.where(~alive)[0]
        reverse[dead, dead] = 1.0
        tables.append(reverse)
    return tables


def exact_nll(p0: EnumeratedDistribution, sequence: np.ndarray) -> float:
    """-log p_0(sequence) / L in nats per token; +inf for unsupported sequences."""
    idx = int(sequence_to_index(np.asarray(sequence), p0.n))
    p = p0.probs[idx]
    if p <= 0.0:
        return float("inf")
    return float(-np.log(p) / p0.length)


def product_distribution(marginals: np.ndarray) -> EnumeratedDistribution:
    """Build a product-form p_0 from per-position marginals of shape (L, n)."""
    marginals = np.asarray(marginals, dtype=np.float64)
    length, n = marginals.shape
    probs = np.ones(1)
    for i in range(length):
        probs = np.kron(probs, marginals[i])
    return EnumeratedDistribution(probs, n, length)
