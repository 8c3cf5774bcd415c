"""Dense-tensor arithmetic with tape-based reverse-mode differentiation.

Float32 is the working precision for model state; float64 tensors are
supported so tests can run finite-difference checks without fp32 noise.
Broadcasting is deliberately restricted: two shapes combine only when equal
or when one is a trailing suffix of the other (a "leading batch" broadcast).
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from seddlab import kernels

LOG_FLOOR = 1e-30


class EngineError(ValueError):
    """Shape or usage error in a tensor primitive."""


class Tensor:
    """A dense array plus autodiff metadata. Data is immutable by convention."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are folded in without tape entries for constants
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, dtype=dtype)


class Tape:
    """Ordered log of primitive applications for one forward pass.

    Entries are appended in execution order, so every node's inputs appear
    before the node itself; backward walks the list once in reverse.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.entries.append((out, inputs, vjp))

    def backward(self, loss: Tensor, params: Optional[Sequence[Tensor]] = None):
        """Accumulate gradients of a scalar loss into every reachable leaf.

        Returns a list of gradient arrays aligned with ``params`` (zeros for
        parameters the loss never touched) and also sets ``.grad`` on them.
        """
        if loss.data.size != 1:
            raise EngineError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self.entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, ginp in zip(inputs, vjp(g)):
                if ginp is None or not inp.requires_grad:
                    continue
                acc = grads.get(id(inp))
                grads[id(inp)] = ginp if acc is None else acc + ginp
        if params is None:
            return None
        out_grads = []
        for p in params:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            p.grad = g
            out_grads.append(g)
        return out_grads


_active_tape: Optional[Tape] = None
_grad_enabled = True


@contextmanager
def record():
    """Open a fresh tape and make it the recording target."""
    global _active_tape
    prev = _active_tape
    tape = Tape()
    _active_tape = tape
    try:
        yield tape
    finally:
        _active_tape = prev


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _register(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    needs = _grad_enabled and _active_tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        _active_tape.record(out, inputs, vjp)
    return out


def _suffix_compatible(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    return big[len(big) - len(small):] == small


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if not _suffix_compatible(a.shape, b.shape):
        raise EngineError(f"{op}: shapes {a.shape} and {b.shape} are not leading-batch compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _register("add", out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _register("sub", out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary("mul", a, b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _register("mul", out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * np.asarray(c, dtype=a.dtype)

    def vjp(g):
        return (g * c,)

    return _register("scale", out, (a,), vjp)


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant array (no gradient tracked for the constant)."""
    out = a.data + c

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _register("add_const", out, (a,), vjp)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array (no gradient tracked for the constant)."""
    out = a.data * c

    def vjp(g):
        return (_unbroadcast(g * c, a.shape),)

    return _register("mul_const", out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise EngineError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise EngineError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.data.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise EngineError(f"matmul: leading batch dims differ for {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            db = a2.T @ g2
        else:
            db = np.swapaxes(a.data, -1, -2) @ g
        return da, db

    return _register("matmul", out, (a, b), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _register("exp", out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    clamped = np.maximum(a.data, LOG_FLOOR)
    out = np.log(clamped)

    def vjp(g):
        return (np.where(a.data >= LOG_FLOOR, g / clamped, 0.0).astype(a.dtype),)

    return _register("log", out, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; derivative is analytic below
    c = np.sqrt(2.0 / np.pi).astype(a.dtype) if a.dtype == np.float32 else np.sqrt(2.0 / np.pi)
    x = a.data
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = (0.5 * x * (1.0 + t)).astype(a.dtype)

    def vjp(g):
        sech2 = 1.0 - t * t
        dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
        return ((g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner)).astype(a.dtype),)

    return _register("gelu", out, (a,), vjp)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    flat = np.ascontiguousarray(a.data.reshape(-1, a.shape[-1]))
    y = kernels.softmax2d(flat).reshape(a.shape)

    def vjp(g):
        y2 = np.ascontiguousarray(y.reshape(-1, a.shape[-1]))
        g2 = np.ascontiguousarray(g.reshape(-1, a.shape[-1]))
        return (kernels.softmax2d_backward(y2, g2).reshape(a.shape),)

    return _register("softmax", y, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def vjp(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _register("log_softmax", out, (a,), vjp)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    n = a.shape[-1]
    flat = np.ascontiguousarray(a.data.reshape(-1, n))
    y2, rstd = kernels.layernorm2d(flat, eps)
    out = y2.reshape(a.shape)

    def vjp(g):
        g2 = np.ascontiguousarray(g.reshape(-1, n))
        return (kernels.layernorm2d_backward(y2, rstd, g2).reshape(a.shape),)

    return _register("layer_norm", out, (a,), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise EngineError(
            f"embedding: id out of range for table with {table.shape[0]} rows "
            f"(got min {ids.min()}, max {ids.max()})")
    out = table.data[ids]

    def vjp(g):
        dtab = np.zeros_like(table.data)
        kernels.scatter_add_rows(dtab, ids.reshape(-1),
                                 np.ascontiguousarray(g.reshape(-1, table.shape[-1])))
        return (dtab,)

    return _register("embedding", out, (table,), vjp)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if not _suffix_compatible(a.shape, mask.shape):
        raise EngineError(f"masked_fill: mask shape {mask.shape} incompatible with {a.shape}")
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)

    def vjp(g):
        return (np.where(mask, 0.0, g).astype(a.dtype),)

    return _register("masked_fill", out, (a,), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _register("reshape", out, (a,), vjp)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _register("transpose", out, (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    # reductions accumulate in float64 to limit summation error
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(a.dtype),)

    return _register("sum", out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def take_last(a: Tensor, ids: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    ids = np.asarray(ids)
    if ids.shape != a.shape[:-1]:
        raise EngineError(f"take_last: ids shape {ids.shape} must match {a.shape[:-1]}")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[-1]):
        raise EngineError(f"take_last: id out of range for last axis of size {a.shape[-1]}")
    out = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]

    def vjp(g):
        da = np.zeros_like(a.data)
        np.put_along_axis(da, ids[..., None], g[..., None], axis=-1)
        return (da,)

    return _register("take_last", out, (a,), vjp)


def modulate(x: Tensor, scale_t: Tensor, shift_t: Tensor) -> Tensor:
    """Conditioning hook: y = x * (1 + scale) + shift, scale/shift per batch row.

    x: (B, L, D); scale, shift: (B, D), broadcast over the sequence axis.
    """
    if x.data.ndim != 3 or scale_t.shape != (x.shape[0], x.shape[2]) or shift_t.shape != scale_t.shape:
        raise EngineError(
            f"modulate: expected x (B,L,D) with scale/shift (B,D); got {x.shape}, "
            f"{scale_t.shape}, {shift_t.shape}")
    s = scale_t.data[:, None, :]
    out = x.data * (1.0 + s) + shift_t.data[:, None, :]

    def vjp(g):
        dx = g * (1.0 + s)
        dscale = (g * x.data).sum(axis=1)
        dshift = g.sum(axis=1)
        return dx, dscale, dshift

    return _register("modulate", out, (x, scale_t, shift_t), vjp)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position twist on the last axis (half-split pairing).

    x: (..., L, D) with D even; cos/sin: (L, D/2) constants.
    """
    d = x.shape[-1]
    if d % 2 != 0 or cos.shape != (x.shape[-2], d // 2) or sin.shape != cos.shape:
        raise EngineError(f"rope: bad shapes x {x.shape}, cos {cos.shape}, sin {sin.shape}")
    x1, x2 = x.data[..., : d // 2], x.data[..., d // 2:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1).astype(x.dtype)

    def vjp(g):
        g1, g2 = g[..., : d // 2], g[..., d // 2:]
        dx1 = g1 * cos + g2 * sin
        dx2 = -g1 * sin + g2 * cos
        return (np.concatenate([dx1, dx2], axis=-1).astype(x.dtype),)

    return _register("rope", out, (x,), vjp)


def global_grad_norm(grads: Iterable[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        total += float((g.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = global_grad_norm(grads)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        grads = [g * factor for g in grads]
    return grads, norm
