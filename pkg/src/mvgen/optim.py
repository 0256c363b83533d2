"""Bias-corrected Adam over named parameter dicts.

Parameters are immutable tensors, so each step returns fresh tensors; the
moment buffers live in :class:`AdamState` and are updated in place (the
training loop is their single writer).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GradTape, Tensor


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


def adam_step(
    params: dict[str, Tensor],
    grads: GradTape | dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, Tensor], AdamState]:
    """One Adam update; returns new parameter tensors and the mutated state."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads.grad(p) if isinstance(grads, GradTape) else grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        g = g.astype(np.float64, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new = p.data.astype(np.float64) - update
        new_params[name] = Tensor(new.astype(p.dtype), requires_grad=True)
    return new_params, state
