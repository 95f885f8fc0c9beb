"""SGD with Nesterov momentum and a polynomial learning-rate schedule."""

from __future__ import annotations

import numpy as np


class SGD:
    """Stochastic gradient descent over a name -> Tensor parameter dict.

    With ``nesterov``, the update matches the common deep-learning variant:
    ``v = mu * v + g`` then ``w -= lr * (g + mu * v)``; without it the step
    is ``w -= lr * v``.  Weight decay is added to the raw gradient first.
    Momentum 0 reduces to plain ``w -= lr * grad`` either way.
    """

    def __init__(self, params, lr, momentum=0.99, nesterov=True, weight_decay=3e-5):
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.nesterov = bool(nesterov)
        self.weight_decay = float(weight_decay)
        self._velocity = {name: None for name in self.params}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self._velocity[name]
                if v is None:
                    v = np.zeros_like(p.data)
                v *= self.momentum
                v += g
                self._velocity[name] = v
                update = g + self.momentum * v if self.nesterov else v
            else:
                update = g
            p.data -= (self.lr * update).astype(p.dtype, copy=False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def sgd_step(params, lr, momentum=0.0, weight_decay=0.0):
    """One-shot update for callers that do not keep optimizer state."""
    SGD(params, lr=lr, momentum=momentum, nesterov=False, weight_decay=weight_decay).step()


def poly_lr(base_lr, step, total_steps, power=0.9):
    """nnU-Net style polynomial decay from ``base_lr`` down to 0."""
    if total_steps <= 0:
        return base_lr
    frac = min(step, total_steps) / total_steps
    return base_lr * (1.0 - frac) ** power
