"""First-order adaptive optimizer over flat parameter vectors."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, pv, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, mask=None):
        self.pv = pv
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.mask = mask  # optional bool array: update only these entries
        self.m = np.zeros_like(pv.values)
        self.v = np.zeros_like(pv.values)
        self.t = 0

    def step(self):
        self.t += 1
        g = self.pv.grad
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        update = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        if self.mask is not None:
            update = update * self.mask
        self.pv.values -= update
