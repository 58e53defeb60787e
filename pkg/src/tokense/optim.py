"""Adam optimizer and global gradient-norm clipping for Tensor parameters."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm.  Parameters without a gradient are skipped.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= np.asarray(scale, dtype=p.grad.dtype)
    return norm


class Adam:
    """Adam with bias correction. Moments are kept in the parameter dtype so
    checkpointed training state round-trips exactly."""

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data -= np.asarray(self.lr, dtype=p.data.dtype) * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
