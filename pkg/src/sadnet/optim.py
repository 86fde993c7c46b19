"""ADAM optimizer with bias correction.

Defaults follow the training protocol: lr 1e-4, beta1 0.9, beta2 0.999,
eps 1e-8.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[tuple[str, Tensor]], state: AdamState,
              lr: float | None = None) -> None:
    """One bias-corrected ADAM update, in place on the parameter tensors.

    ``lr`` overrides ``state.lr`` for this step (used by the LR schedule).
    Raises UsageError naming the first parameter without a gradient.
    """
    for name, p in params:
        if p.grad is None:
            raise UsageError(f"adam_step: parameter {name!r} has no gradient")
    state.t += 1
    step_lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= step_lr * m_hat / (np.sqrt(v_hat) + state.eps)
