"""Adam optimizer and the warmup/step-decay learning-rate schedule."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import Tensor


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 3.5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / bias1
            vhat = v / bias2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def lr_at_epoch(base_lr: float, epoch: int, warmup_epochs: int,
                decay_epochs: Sequence[int], decay_factor: float) -> float:
    """Linear warmup from base_lr/10, then step decay.

    Epochs are 0-indexed; the rate reaches base_lr at the end of warmup and
    is multiplied by decay_factor at each decay epoch.
    """
    if warmup_epochs > 0 and epoch < warmup_epochs:
        factor = 0.1 + 0.9 * (epoch / warmup_epochs)
    else:
        factor = 1.0
        for d in decay_epochs:
            if epoch >= d:
                factor *= decay_factor
    return base_lr * factor
