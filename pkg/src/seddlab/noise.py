"""Forward corruption machinery.

Two token-level corruption kernels (uniform resampling, absorbing MASK) and
two cumulative noise schedules. Per-token marginals, posterior ratios and
reverse transition rates all have closed forms; the enumeration oracle
cross-checks every one of them against a matrix exponential.

Conventions: the generator Q is row-stochastic-style, Q[a, b] = rate of
jumping a -> b, rows summing to zero. The reverse rate out of token ``a``
into ``y`` pairs the score with the opposite-direction forward rate,
score[y] * Q[y, a]; for the absorbing kernel this is the only pairing under
which reverse moves go MASK -> token and revealed tokens stay frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

T_FLOOR = 1e-5  # loss/time integrals sample t from (T_FLOOR, 1]


class NoiseError(ValueError):
    pass


@dataclass(frozen=True)
class LogLinearSchedule:
    """Cumulative noise -log(1 - (1-eps) t); total noise at t=1 is -log(eps)."""

    eps: float = 1e-3
    kind: str = "loglinear"

    def total(self, t):
        t = _check_time(t)
        return -np.log1p(-(1.0 - self.eps) * t)

    def rate(self, t):
        t = _check_time(t)
        return (1.0 - self.eps) / (1.0 - (1.0 - self.eps) * t)


@dataclass(frozen=True)
class GeometricSchedule:
    """Cumulative noise sigma_min^(1-t) sigma_max^t (geometric interpolation)."""

    sigma_min: float = 1e-3
    sigma_max: float = 20.0
    kind: str = "geometric"

    def total(self, t):
        t = _check_time(t)
        return self.sigma_min ** (1.0 - t) * self.sigma_max ** t

    def rate(self, t):
        return self.total(t) * np.log(self.sigma_max / self.sigma_min)


Schedule = LogLinearSchedule | GeometricSchedule


def make_schedule(kind: str, **kwargs) -> Schedule:
    if kind == "loglinear":
        return LogLinearSchedule(**kwargs)
    if kind == "geometric":
        return GeometricSchedule(**kwargs)
    raise NoiseError(f"unknown schedule kind: {kind!r}")


def _check_time(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise NoiseError(f"time must lie in [0, 1], got {t}")
    return t


def cumulative_noise(schedule: Schedule, t):
    """Integrated noise at time t (scalar in, scalar out; arrays pass through)."""
    return schedule.total(t)


@dataclass(frozen=True)
class NoiseKernel:
    """Token corruption process: kind 'uniform' or 'absorb', over N states.

    For 'absorb' the last id is the MASK symbol and clean data never
    contains it.
    """

    kind: str
    n: int

    def __post_init__(self):
        if self.kind not in ("uniform", "absorb"):
            raise NoiseError(f"unknown kernel kind: {self.kind!r}")
        if self.n < 2:
            raise NoiseError(f"kernel needs at least 2 states, got {self.n}")

    @property
    def mask_id(self) -> int | None:
        return self.n - 1 if self.kind == "absorb" else None

    def generator(self) -> np.ndarray:
        """Rate matrix Q, rows summing to zero."""
        n = self.n
        if self.kind == "uniform":
            q = np.full((n, n), 1.0 / n)
            np.fill_diagonal(q, 1.0 / n - 1.0)
        else:
            q = np.zeros((n, n))
            q[: n - 1, n - 1] = 1.0
            np.fill_diagonal(q[: n - 1, : n - 1], -1.0)
        return q

    def transition_matrix(self, sigma_bar: float) -> np.ndarray:
        """Closed-form exp(sigma_bar * Q); rows sum to 1."""
        n = self.n
        decay = np.exp(-float(sigma_bar))
        if self.kind == "uniform":
            return decay * np.eye(n) + (1.0 - decay) / n
        p = np.eye(n) * decay
        p[:, n - 1] += 1.0 - decay
        p[n - 1, n - 1] = 1.0
        return p


def marginal(kernel: NoiseKernel, sigma_bar: float, x0: int) -> np.ndarray:
    """Per-token corruption marginal p(x_t = . | x_0), a length-N probability row."""
    if sigma_bar < 0:
        raise NoiseError(f"sigma_bar must be >= 0, got {sigma_bar}")
    if not 0 <= x0 < kernel.n:
        raise NoiseError(f"token id {x0} out of range for N={kernel.n}")
    if kernel.kind == "absorb" and x0 == kernel.mask_id:
        raise NoiseError("clean data never contains MASK; marginal undefined for x0=MASK")
    decay = np.exp(-sigma_bar)
    probs = np.zeros(kernel.n)
    if kernel.kind == "absorb":
        probs[x0] = decay
        probs[kernel.mask_id] = 1.0 - decay
    else:
        probs[:] = (1.0 - decay) / kernel.n
        probs[x0] += decay
    return probs


def posterior_ratio(kernel: NoiseKernel, sigma_bar: float, x0: int, x: int, y: int) -> float:
    """p(y | x0) / p(x | x0) for single tokens; x must be reachable from x0."""
    probs = marginal(kernel, sigma_bar, x0)
    px = probs[x]
    if px <= 0.0:
        raise NoiseError(f"zero-probability conditioning state: p({x}|{x0}) = 0 at sigma_bar={sigma_bar}")
    return float(probs[y] / px)


def reverse_rate_row(kernel: NoiseKernel, sigma_t: float, score_row: np.ndarray,
                     current: int) -> np.ndarray:
    """Reverse transition rates out of ``current``, one per destination token.

    Off-diagonal entry y is score_row[y] * sigma_t * Q[y, current]; diagonal
    is minus the row sum so the row is a generator row.
    """
    score_row = np.asarray(score_row, dtype=np.float64)
    if score_row.shape != (kernel.n,):
        raise NoiseError(f"score row must have shape ({kernel.n},), got {score_row.shape}")
    if sigma_t <= 0:
        raise NoiseError(f"sigma_t must be positive, got {sigma_t}")
    q_into_current = kernel.generator()[:, current]
    rates = sigma_t * q_into_current * score_row
    rates[current] = 0.0
    needed = q_into_current > 0
    needed[current] = False
    if np.any(score_row[needed] <= 0.0):
        raise NoiseError("score must be positive wherever a positive reverse rate is required")
    rates[current] = -rates.sum()
    return rates


# ---------------------------------------------------------------------------
# batched helpers used by training and sampling (same math, array shapes)

def sample_marginal(kernel: NoiseKernel, sigma_bar: np.ndarray, x0: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """Draw x_t ~ p(.|x0) per position. sigma_bar: (B,) per sequence; x0: (B, L)."""
    x0 = np.asarray(x0)
    decay = np.exp(-np.asarray(sigma_bar, dtype=np.float64))[:, None]
    corrupt = rng.random(x0.shape) >= decay
    if kernel.kind == "absorb":
        return np.where(corrupt, kernel.mask_id, x0)
    resampled = rng.integers(0, kernel.n, size=x0.shape)
    return np.where(corrupt, resampled, x0)


def ratio_table(kernel: NoiseKernel, sigma_bar: np.ndarray, x0: np.ndarray,
                x_t: np.ndarray) -> np.ndarray:
    """Posterior ratios p(y|x0)/p(x_t|x0) for all y: shape (B, L, N).

    The entry at y = x_t is 1 by construction (it is the diagonal and is
    never used by the loss).
    """
    b, length = x_t.shape
    n = kernel.n
    decay = np.exp(-np.asarray(sigma_bar, dtype=np.float64))[:, None, None]
    onehot_x0 = np.zeros((b, length, n))
    np.put_along_axis(onehot_x0, x0[..., None], 1.0, axis=-1)
    if kernel.kind == "absorb":
        p_y = onehot_x0 * decay
        p_y[..., kernel.mask_id] = 1.0 - decay[..., 0]
    else:
        p_y = onehot_x0 * decay + (1.0 - decay) / n
    p_x = np.take_along_axis(p_y, x_t[..., None], axis=-1)
    ratios = p_y / np.maximum(p_x, 1e-300)
    np.put_along_axis(ratios, x_t[..., None], 1.0, axis=-1)
    return ratios


def weight_table(kernel: NoiseKernel, sigma_t: np.ndarray, x_t: np.ndarray) -> np.ndarray:
    """Loss weights sigma_t * Q[y, x_t] for all y, zero on the diagonal: (B, L, N).

    For 'absorb' only masked positions carry weight, which is the kernel's
    no-loss-on-revealed-tokens rule.
    """
    b, length = x_t.shape
    n = kernel.n
    sig = np.asarray(sigma_t, dtype=np.float64).reshape(b, 1, 1)
    if kernel.kind == "absorb":
        masked = (x_t == kernel.mask_id)[..., None]
        w = np.broadcast_to(sig, (b, length, n)) * masked
        w[..., kernel.mask_id] = 0.0
    else:
        w = np.broadcast_to(sig / n, (b, length, n)).copy()
        np.put_along_axis(w, x_t[..., None], 0.0, axis=-1)
    return w
