"""SGD with momentum for network weights, Adam for quantizer clip bounds."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import NonFiniteError, Tensor


class Optimizer:
    kind = ""

    def __init__(self, params: Iterable[Tensor], lr: float):
        self.params = list(params)
        self.lr = float(lr)
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def _selected(self, active):
        # parameters outside ``active`` (ids) are left alone, buffers included
        for i, p in enumerate(self.params):
            if active is None or id(p) in active:
                yield i, p

    def _check(self, p: Tensor) -> None:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"{self.kind}: nonfinite gradient for parameter {p.name or p!r}")


class SGDMomentum(Optimizer):
    """``v <- mu*v + g + wd*theta``; ``theta <- theta - lr*v``."""

    kind = "sgd-momentum"

    def __init__(self, params: Iterable[Tensor], lr: float = 0.1, momentum: float = 0.9, weight_decay: float = 1e-4):
        super().__init__(params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, active=None) -> None:
        self.step_count += 1
        for i, p in self._selected(active):
            v = self.velocity[i]
            self._check(p)
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v


class Adam(Optimizer):
    kind = "adam"

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        super().__init__(params, lr)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, active=None) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        for i, p in self._selected(active):
            m, v = self.m[i], self.v[i]
            self._check(p)
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
