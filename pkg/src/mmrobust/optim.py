"""Adam with decoupled weight decay, and plain SGD."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradientError


@dataclass
class AdamState:
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("lr, eps and weight_decay must be non-negative (eps positive)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")


def check_grads(params, grads):
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise KeyError(f"grads and params are not keyed 1:1 (mismatch: {missing[:5]})")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} shape {params[name].shape}")
        bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
        if bad:
            raise NonFiniteGradientError(name, bad)


def adam_step(params, grads, state: AdamState):
    """In-place update of ``params`` (name -> Tensor) from ``grads`` (name -> array).

    ``p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    check_grads(params, grads)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * update
    return params, state


def sgd_step(params, grads, lr):
    check_grads(params, grads)
    for name, p in params.items():
        p.data -= lr * grads[name]
    return params
