"""SGD and Adam over lists of parameter tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import AutodiffError


class Optimizer:
    def __init__(self, params: list[Tensor], lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = float(lr)

    def _grads(self) -> list[np.ndarray]:
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise AutodiffError(f"step() with missing gradients for parameters {missing}")
        return [p.grad for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def step(self) -> None:
        for p, g in zip(self.params, self._grads()):
            p.data = p.data - self.lr * g
        self.zero_grad()


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        b1, b2 = betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        self.b1, self.b2, self.eps = float(b1), float(b2), float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            m, v = self.m[i], self.v[i]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.data = p.data - self.lr * (m / c1) / denom
        self.zero_grad()


def make_optimizer(kind: str, params, lr: float, **kwargs) -> Optimizer:
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr, **kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")


def step(opt: Optimizer) -> None:
    opt.step()
