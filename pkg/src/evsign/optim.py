"""Adam with additive L2 weight decay, and cosine learning-rate annealing."""

from __future__ import annotations

from dataclasses import dataclass, field

import math

import numpy as np

from .autodiff import NumericsError, Tensor


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.001, checked: bool = False) -> None:
    """One classic Adam update in place; decay is added to the gradient."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    # update = lr * (m/bc1) / (sqrt(v/bc2) + eps), with the bias
    # corrections folded into the scalar factors (identical algebra)
    alpha = lr * math.sqrt(bc2) / bc1
    denom_eps = eps * math.sqrt(bc2)
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if checked and not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}")
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        denom = np.sqrt(v)
        denom += denom_eps
        np.divide(m, denom, out=denom)
        denom *= alpha
        p.data -= denom.astype(p.data.dtype, copy=False)


def cosine_lr(epoch: int, total_epochs: int, lr0: float,
              lr_min: float = 0.0) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi * epoch/total)) / 2."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))
