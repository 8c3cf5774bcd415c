"""Adaptive optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class OptimState:
    """First/second moment accumulators plus hyperparameters for AdamW."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def state_arrays(self) -> list[np.ndarray]:
        return self.m + self.v

    def load_state_arrays(self, arrays: list[np.ndarray], step_count: int) -> None:
        n = len(self.m)
        if len(arrays) != 2 * n:
            raise ValueError(f"optimizer state: expected {2 * n} arrays, got {len(arrays)}")
        self.m = [a.copy() for a in arrays[:n]]
        self.v = [a.copy() for a in arrays[n:]]
        self.step_count = step_count


def optimizer_step(params: list[Tensor], grads: list[np.ndarray], state: OptimState) -> OptimState:
    """One AdamW update, in place on the parameter tensors.

    Bias-corrected moments; the decay term multiplies the weights directly
    and never enters the moment accumulators.
    """
    if len(params) != len(grads):
        raise ValueError(f"optimizer_step: {len(params)} params but {len(grads)} grads")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.data.shape != g.shape:
            raise ValueError(f"optimizer_step: grad shape {g.shape} != param shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= (state.lr * update).astype(p.data.dtype)
    return state
