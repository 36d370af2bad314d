"""SGD and Adam over explicit parameter groups with per-group learning rates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class ParamGroup:
    params: List[Tensor]
    lr: float
    name: str = ""


class Optimizer:
    def __init__(self, groups: Sequence[ParamGroup]):
        if not groups or not any(g.params for g in groups):
            raise ContractError("optimizer needs at least one parameter")
        for g in groups:
            if g.lr < 0:
                raise ContractError(f"learning rate for group {g.name!r} must be >= 0, got {g.lr}")
        self.groups = list(groups)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.params:
                p.grad = None

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, groups: Sequence[ParamGroup], momentum: float = 0.0):
        super().__init__(groups)
        self.momentum = momentum
        self._velocity: dict = {}

    def step(self) -> None:
        for g in self.groups:
            if g.lr == 0:
                continue
            for p in g.params:
                if p.grad is None:
                    continue
                d = p.grad
                if self.momentum:
                    v = self._velocity.get(id(p))
                    v = d.copy() if v is None else self.momentum * v + d
                    self._velocity[id(p)] = v
                    d = v
                p.data = p.data - g.lr * d


class Adam(Optimizer):
    def __init__(self, groups: Sequence[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(groups)
        self.b1, self.b2 = betas
        self.eps = eps
        self._m: dict = {}
        self._v: dict = {}
        self._t: dict = {}

    def step(self) -> None:
        b1, b2 = self.b1, self.b2
        for g in self.groups:
            if g.lr == 0:
                continue
            for p in g.params:
                if p.grad is None:
                    continue
                k = id(p)
                t = self._t.get(k, 0) + 1
                m = b1 * self._m.get(k, 0.0) + (1 - b1) * p.grad
                v = b2 * self._v.get(k, 0.0) + (1 - b2) * p.grad * p.grad
                self._t[k], self._m[k], self._v[k] = t, m, v
                mhat = m / (1 - b1**t)
                vhat = v / (1 - b2**t)
                p.data = p.data - g.lr * mhat / (np.sqrt(vhat) + self.eps)
