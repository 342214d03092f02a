"""Adam and global-norm gradient clipping."""
from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float = 1.0):
    """Scale all gradients by ``max_norm / norm`` when the global L2 norm exceeds it.

    Returns the (possibly new) gradient list and the norm observed before clipping.
    """
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        return [g * g.dtype.type(factor) for g in grads], norm
    return list(grads), norm


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 2e-5,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, grads: Mapping[str, np.ndarray] | None = None):
        """Apply one update from ``grads`` (default: each parameter's ``.grad``).

        Parameters without a gradient are treated as having a zero gradient.
        Raises ``NonFiniteGradientError`` before touching any state if a
        gradient contains inf/nan.
        """
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise NonFiniteGradientError(f"non-finite gradient in {', '.join(sorted(bad))}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            m, v = self.m[k], self.v[k]
            m *= b1
            v *= b2
            if g is not None:
                m += (1 - b1) * g
                v += (1 - b2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr, "m": self.m, "v": self.v}
