"""AdamW: Adam with decoupled weight decay and bias correction."""

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from app.errors import MissingGrad
from app.services.autograd import Tensor


@dataclass
class OptimizerState:
    """Moments per parameter name, the step counter and hyperparameters."""
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, Tensor], state: OptimizerState) -> OptimizerState:
    """Apply one AdamW update in place to ``params`` and advance ``state``.

    Gradients are left untouched; the caller zeroes them.
    """
    for name, p in params.items():
        if p.grad is None:
            raise MissingGrad(name)

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t

    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or m.shape != p.shape:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v

        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps) + state.weight_decay * p.data
        p.data = (p.data - state.lr * update).astype(p.data.dtype, copy=False)
    return state


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
