"""AdamW with per-parameter learning rates.

Parameters live in a dict keyed by path; tensors are immutable, so a step
returns a fresh dict of updated tensors. Weight decay is decoupled (applied
directly to the weights, not through the moment estimates) and defaults to
zero for the regression task.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    """Classic Adam moments with bias correction plus decoupled decay.

    lrs maps parameter path -> learning rate; every path passed to step()
    must have one. Moment state is allocated lazily on the first step.
    """

    def __init__(self, lrs: dict[str, float], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError(f"betas must lie in [0, 1), got ({beta1}, {beta2})")
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        out = {}
        for path, p in params.items():
            if path not in self.lrs:
                raise KeyError(f"no learning rate registered for parameter {path!r}")
            g = np.asarray(grads[path], dtype=p.data.dtype)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} at {path!r}")
            m = self._m.get(path)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self._v[path]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._m[path] = m
            self._v[path] = v
            lr = self.lrs[path]
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new = p.data - lr * update
            if self.weight_decay:
                new = new - lr * self.weight_decay * p.data
            out[path] = Tensor(new, requires_grad=True)
        return out
