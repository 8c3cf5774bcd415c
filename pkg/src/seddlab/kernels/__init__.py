"""Kernel backend selection.

The compiled Cython core is used when present (and inputs are the dtype it
supports); otherwise the numpy fallback runs. Set SEDDLAB_FORCE_FALLBACK=1
to force the fallback, e.g. to benchmark one backend against the other.
"""

import importlib
import os
from contextlib import contextmanager

import numpy as np

from . import fallback

_core = None
if os.environ.get("SEDDLAB_FORCE_FALLBACK", "") != "1":
    try:
        _core = importlib.import_module(__name__ + "._core")
    except ImportError:
        _core = None

_forced_fallback = False


def compiled_available() -> bool:
    return _core is not None


def active_backend() -> str:
    return "compiled" if (_core is not None and not _forced_fallback) else "fallback"


@contextmanager
def force_fallback():
    """Run a block on the numpy fallback regardless of what is compiled."""
    global _forced_fallback
    prev = _forced_fallback
    _forced_fallback = True
    try:
        yield
    finally:
        _forced_fallback = prev


def _use_core(*arrays) -> bool:
    if _core is None or _forced_fallback:
        return False
    return all(a.dtype == np.float32 and a.flags.c_contiguous for a in arrays)


def softmax2d(x: np.ndarray) -> np.ndarray:
    if _use_core(x):
        return _core.softmax2d_f32(x)
    return fallback.softmax2d(x)


def softmax2d_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if _use_core(y, dy):
        return _core.softmax2d_backward_f32(y, dy)
    return fallback.softmax2d_backward(y, dy)


def layernorm2d(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    if _use_core(x):
        return _core.layernorm2d_f32(x, eps)
    return fallback.layernorm2d(x, eps)


def layernorm2d_backward(y: np.ndarray, rstd: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if _use_core(y, dy) and rstd.dtype == np.float32:
        return _core.layernorm2d_backward_f32(y, rstd, dy)
    return fallback.layernorm2d_backward(y, rstd, dy)


def scatter_add_rows(table: np.ndarray, ids: np.ndarray, grads: np.ndarray) -> None:
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    if _use_core(table, grads):
        _core.scatter_add_rows_f32(table, ids, grads)
        return
    fallback.scatter_add_rows(table, ids, grads)


def categorical_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    if _core is not None and not _forced_fallback:
        return _core.categorical_rows_f64(probs, u)
    return fallback.categorical_rows(probs, u)
