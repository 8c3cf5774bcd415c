"""Central finite-difference gradient checking.

Runs in float64: fp32 forward noise would swamp an O(h^2) difference
quotient at the tolerances we care about.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, record


def finite_difference_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-3) -> np.ndarray:
    """d f / d param by central differences, elementwise."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f().data)
        flat[i] = orig - h
        down = float(f().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), 1e-12)
    return float(np.abs(a - b).max(initial=0.0)) / scale


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor],
                    h: float = 1e-3) -> float:
    """Compare reverse-mode grads of scalar f() against central differences.

    Returns the worst per-parameter relative error (sup-norm, scaled by the
    larger gradient magnitude).
    """
    with record() as tape:
        loss = f()
    auto = tape.backward(loss, params=list(params))
    worst = 0.0
    for p, g in zip(params, auto):
        fd = finite_difference_grad(f, p, h=h)
        worst = max(worst, max_relative_error(g.astype(np.float64), fd))
    return worst
