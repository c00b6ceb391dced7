"""Adam / AdamW and the cosine-annealing learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, p: np.ndarray) -> AdamState:
        return cls(np.zeros_like(p, dtype=np.float64), np.zeros_like(p, dtype=np.float64))


def _check(grad: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              weight_decay: float = 0.0, name: str = "?") -> np.ndarray:
    """One Adam update; weight decay is the classic L2 term added to the gradient."""
    _check(grad, name)
    g = grad + weight_decay * param if weight_decay else grad
    state.step += 1
    state.m = BETA1 * state.m + (1 - BETA1) * g
    state.v = BETA2 * state.v + (1 - BETA2) * g * g
    m_hat = state.m / (1 - BETA1 ** state.step)
    v_hat = state.v / (1 - BETA2 ** state.step)
    return param - lr * m_hat / (np.sqrt(v_hat) + EPS)


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
               weight_decay: float = 0.0, name: str = "?") -> np.ndarray:
    """One AdamW update with decoupled weight decay applied first."""
    _check(grad, name)
    param = param * (1 - lr * weight_decay) if weight_decay else param
    state.step += 1
    state.m = BETA1 * state.m + (1 - BETA1) * grad
    state.v = BETA2 * state.v + (1 - BETA2) * grad * grad
    m_hat = state.m / (1 - BETA1 ** state.step)
    v_hat = state.v / (1 - BETA2 ** state.step)
    return param - lr * m_hat / (np.sqrt(v_hat) + EPS)


@dataclass
class Optimizer:
    """Adam or AdamW over a named set of leaf tensors, updated in place."""

    params: dict[str, Tensor]
    kind: str = "adamw"
    weight_decay: float = 0.0
    state: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        update = adamw_step if self.kind == "adamw" else adam_step
        for name, t in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = AdamState.zeros_like(t.data)
            t.data = update(t.data, np.asarray(g, dtype=np.float64), st, lr,
                            self.weight_decay, name)


def cosine_lr(t: float, base_lr: float, t_max: float, eta_min: float = 0.0) -> float:
    """Cosine annealing from ``base_lr`` at t=0 to ``eta_min`` at t=t_max (clamped)."""
    if t_max <= 0:
        return base_lr
    t = min(max(t, 0.0), t_max)
    return eta_min + 0.5 * (base_lr - eta_min) * (1.0 + math.cos(math.pi * t / t_max))
