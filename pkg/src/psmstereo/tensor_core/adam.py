from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter

ADAM_EPS = 1e-8


def adam_step(params: Iterable[Parameter], learning_rate: float, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = ADAM_EPS) -> None:
    """One bias-corrected Adam update, in place, using each parameter's own m/v/step."""
    params = list(params)
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {', '.join(missing[:5])}"
                         + (" ..." if len(missing) > 5 else ""))
    for p in params:
        g = p.grad
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.data -= learning_rate * m_hat / (np.sqrt(v_hat) + epsilon)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = ADAM_EPS):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps

    def step(self) -> None:
        adam_step(self.params, self.lr, self.betas[0], self.betas[1], self.eps)

    def zero_grad(self) -> None:
        zero_grad(self.params)
