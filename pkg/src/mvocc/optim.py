"""Adam with decoupled weight decay over a named parameter dict."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ParameterError


class AdamW:
    """Standard bias-corrected Adam; weight decay applied directly to the
    parameter, not through the gradient moments.

    Parameters are visited in sorted-name order so a step is a pure
    function of (parameter values, gradients, moment state).
    """

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        if not params:
            raise ParameterError("optimizer needs at least one parameter")
        if not lr > 0:
            raise ParameterError(f"lr must be positive, got {lr}")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ParameterError(f"betas must be in [0, 1), got {betas}")
        if weight_decay < 0:
            raise ParameterError(f"weight_decay must be nonnegative, got {weight_decay}")
        for name, p in params.items():
            if not isinstance(p, Tensor) or not p.requires_grad:
                raise ParameterError(f"parameter {name!r} is not a trainable Tensor")
        self.params = params
        self.lr = float(lr)
        self.betas = (float(b1), float(b2))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * update - self.lr * self.weight_decay * p.data

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
