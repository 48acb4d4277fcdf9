from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, applied in place to ``params``.

    Keys present in ``params`` but absent from ``grads`` are left untouched.
    Returns the (mutated) state.
    """
    if lr <= 0:
        raise ConfigError("optim.lr", f"learning rate must be positive, got {lr}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grad_norm(grads, max_norm):
    norm = global_norm(grads)
    if max_norm is not None and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        grads = {k: g * s for k, g in grads.items()}
    return grads, norm


class Adam:
    """Adam bound to one parameter dict (usually ``module.parameters()``)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, max_grad_norm=None):
        if lr <= 0:
            raise ConfigError("optim.lr", f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.max_grad_norm = max_grad_norm
        self.state = AdamState()

    def step(self, grads):
        norm = None
        if self.max_grad_norm is not None:
            grads, norm = clip_grad_norm(grads, self.max_grad_norm)
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        return norm
