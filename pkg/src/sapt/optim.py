"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .autograd import Value
from .errors import ContractError


class AdamW:
    """AdamW over one or more parameter groups.

    ``params`` is either a flat sequence of leaves or a list of dicts with
    ``params`` and optional ``lr`` / ``weight_decay`` overrides. Frozen leaves
    are rejected at `step` time rather than silently skipped.
    """

    def __init__(self, params: Sequence[Value] | Sequence[dict], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: float | None = None):
        if params and isinstance(params[0], dict):
            groups = [dict(g) for g in params]
        else:
            groups = [{"params": list(params)}]
        for g in groups:
            g.setdefault("lr", lr)
            g.setdefault("weight_decay", weight_decay)
            g["params"] = list(g["params"])
        self.groups = groups
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    @property
    def params(self) -> list[Value]:
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params if p.grad is not None)))

    def step(self) -> None:
        for p in self.params:
            if p.frozen:
                raise ContractError(f"optimizer step on frozen parameter {p.name or p.shape}")
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for g in self.groups:
            lr, wd = g["lr"], g["weight_decay"]
            for p in g["params"]:
                if p.grad is None:
                    continue
                grad = p.grad * scale
                key = id(p)
                m = self._m.get(key)
                if m is None:
                    m = self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                v = self._v[key]
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * grad * grad
                if wd:
                    p.data *= 1.0 - lr * wd
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def trainable(values: Iterable[Value]) -> list[Value]:
    return [v for v in values if v.requires_grad]
