"""RMSProp with per-group learning rates and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractError, Tensor

__all__ = ["ParamGroup", "OptimState", "RMSProp", "rmsprop_step", "zero_grads"]


@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float
    weight_decay: float = 0.0
    name: str = ""

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError(f"learning rate must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ContractError(f"weight decay must be >= 0, got {self.weight_decay}")


@dataclass
class OptimState:
    """Running mean-square cache per parameter (zeros at start) and a step counter."""

    cache: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], 0)


def rmsprop_step(params: Sequence[Tensor], cache: Sequence[np.ndarray], lr: float,
                 rho: float = 0.9, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """In-place update of ``params`` and their caches.

    cache <- rho*cache + (1-rho)*g^2
    param <- param - lr*g/(sqrt(cache)+eps) - lr*weight_decay*param
    """
    for p, c in zip(params, cache, strict=True):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape or c.shape != p.data.shape:
            raise ContractError(f"shape mismatch: param {p.data.shape}, grad {g.shape}, cache {c.shape}")
        c *= rho
        c += (1.0 - rho) * g * g
        update = lr * g / (np.sqrt(c) + eps)
        if weight_decay:
            update = update + (lr * weight_decay) * p.data
        p.data -= update


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad.fill(0.0)


class RMSProp:
    """Optimizer over disjoint parameter groups."""

    def __init__(self, groups: Sequence[ParamGroup], rho: float = 0.9, eps: float = 1e-8,
                 state: OptimState | None = None):
        if not 0.0 <= rho < 1.0 or eps <= 0:
            raise ContractError(f"invalid rho={rho} / eps={eps}")
        seen: set[int] = set()
        for g in groups:
            for p in g.params:
                if id(p) in seen:
                    raise ContractError("a parameter belongs to more than one group")
                seen.add(id(p))
        self.groups = list(groups)
        self.rho, self.eps = rho, eps
        params = self.parameters()
        self.state = state if state is not None else OptimState.zeros_like(params)
        if len(self.state.cache) != len(params) or any(
                c.shape != p.data.shape for c, p in zip(self.state.cache, params)):
            raise ContractError("optimizer state does not mirror the parameter shapes")

    def parameters(self) -> list[Tensor]:
        return [p for g in self.groups for p in g.params]

    def zero_grad(self) -> None:
        zero_grads(self.parameters())

    def step(self) -> None:
        k = 0
        for g in self.groups:
            n = len(g.params)
            rmsprop_step(g.params, self.state.cache[k:k + n], g.lr, self.rho, self.eps, g.weight_decay)
            k += n
        self.state.step += 1
