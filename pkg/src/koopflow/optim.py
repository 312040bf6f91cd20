"""Adam with bias correction, plus global gradient-norm clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import NonFiniteError, Tensor


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Update ``params`` in place. A non-finite gradient aborts before anything changes."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ValueError("betas must lie in [0, 1)")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient; optimizer step aborted")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: list[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
        )


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Rescale all gradients jointly so their global 2-norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if np.isfinite(total) and total > max_norm > 0:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total
