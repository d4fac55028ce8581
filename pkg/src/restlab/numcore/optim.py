from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    lr: float
    rule: str = "sgd"  # "sgd" or "adam"
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.rule not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer rule {self.rule!r}")


def sgd(lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> OptimizerState:
    return OptimizerState(lr=lr, rule="sgd", momentum=momentum, weight_decay=weight_decay)


def adam(lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
         weight_decay: float = 0.0) -> OptimizerState:
    return OptimizerState(lr=lr, rule="adam", beta1=beta1, beta2=beta2, eps=eps,
                          weight_decay=weight_decay)


def optimizer_step(state: OptimizerState, params: list[Tensor]) -> list[Tensor]:
    """Apply one update in place and clear the gradients.

    Accumulators are keyed by position in ``params``, so always pass the
    same list in the same order.
    """
    for i, p in enumerate(params):
        if p.grad is None:
            label = p.name or f"#{i}"
            raise MissingGradError(f"parameter {label} {p.shape} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"parameter {p.name or i} has a non-finite gradient")

    state.step_count += 1
    t = state.step_count
    for i, p in enumerate(params):
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if state.rule == "sgd":
            if state.momentum:
                v = state.first.get(i)
                v = g.copy() if v is None else state.momentum * v + g
                state.first[i] = v
                g = v
            p.data -= (state.lr * g).astype(p.dtype)
        else:
            m = state.first.get(i, np.zeros_like(p.data))
            v = state.second.get(i, np.zeros_like(p.data))
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.first[i], state.second[i] = m, v
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
        p.grad = None
    return params
