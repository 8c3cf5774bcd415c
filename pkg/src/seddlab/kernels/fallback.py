"""Pure-numpy reference implementations of the hot kernels.

Every function here has a compiled twin in ``_core.pyx``; the dispatcher in
``seddlab.kernels`` picks whichever is available. Keep the two in exact
semantic agreement — the test suite asserts it.
"""

import numpy as np


def softmax2d(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array."""
    shifted = x - x.max(axis=1, keepdims=True)
    y = np.exp(shifted)
    y /= y.sum(axis=1, keepdims=True)
    return y


def softmax2d_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """VJP of softmax2d given its output ``y``."""
    inner = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - inner)


def layernorm2d(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise normalization (no affine). Returns (y, rstd)."""
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = centered * rstd[:, None]
    return y, rstd.astype(x.dtype, copy=False)


def layernorm2d_backward(y: np.ndarray, rstd: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """VJP of layernorm2d given output ``y`` and saved ``rstd``."""
    mean_dy = dy.mean(axis=1, keepdims=True)
    mean_dyy = (dy * y).mean(axis=1, keepdims=True)
    return (dy - mean_dy - y * mean_dyy) * rstd[:, None]


def scatter_add_rows(table: np.ndarray, ids: np.ndarray, grads: np.ndarray) -> None:
    """table[ids[i]] += grads[i], accumulating duplicate ids. In place."""
    np.add.at(table, ids, grads)


def categorical_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF categorical draw per row.

    ``probs`` rows need not be exactly normalized; each draw uses
    u[i] * row_sum as the threshold. Returns int64 indices.
    """
    cdf = np.cumsum(probs, axis=1)
    thresholds = u * cdf[:, -1]
    idx = (cdf < thresholds[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1).astype(np.int64)
