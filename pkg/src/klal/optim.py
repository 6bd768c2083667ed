"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    rejected: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> AdamState:
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adamw_step(
    params: list[np.ndarray],
    grads: list[np.ndarray | None],
    state: AdamState,
    hyper: AdamHyper,
    lr: float | None = None,
    decay_mask: list[bool] | None = None,
) -> bool:
    """Update ``params`` in place.  Returns False (and counts it) when any
    gradient is non-finite, in which case nothing changes."""
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("optimizer state does not match parameter shapes")
    if any(g is not None and not np.isfinite(g).all() for g in grads):
        state.rejected += 1
        return False
    lr = hyper.lr if lr is None else lr
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if hyper.weight_decay and (decay_mask is None or decay_mask[i]):
            p *= 1.0 - lr * hyper.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return True


def cosine_lr(step: int, total: int, base: float, warmup: int = 0, floor: float = 0.1) -> float:
    """Linear warmup then cosine decay to ``floor * base``."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    if total <= warmup:
        return base
    t = min(1.0, (step - warmup) / max(1, total - warmup))
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * t)))


class AdamW:
    """Thin stateful wrapper used by the training loop."""

    def __init__(self, params: list[Tensor], hyper: AdamHyper = AdamHyper(), decay_mask=None):
        self.params = params
        self.hyper = hyper
        self.decay_mask = decay_mask
        self.state = AdamState.zeros_like([p.data for p in params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> bool:
        return adamw_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.hyper,
            lr=lr,
            decay_mask=self.decay_mask,
        )
