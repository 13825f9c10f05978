"""Adam with bias-corrected moments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or Inf; training must stop."""


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_state(params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: OptimizerState,
              names: list[str] | None = None) -> OptimizerState:
    """Apply one Adam update in place on ``params``; returns ``state``.

    A ``None`` gradient is treated as zero. Raises NonFiniteGradientError
    before touching any parameter if a gradient is not finite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} slots")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            label = names[i] if names else (p.name or f"#{i}")
            raise NonFiniteGradientError(f"non-finite gradient for parameter {label}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return state


class Adam:
    """Stateful wrapper that reads ``.grad`` from each parameter."""

    def __init__(self, params: dict[str, Tensor] | list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if isinstance(params, dict):
            self.names = list(params)
            self.params = list(params.values())
        else:
            self.params = list(params)
            self.names = [p.name or f"#{i}" for i, p in enumerate(self.params)]
        self.state = init_state(self.params, lr, betas[0], betas[1], eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.names)
