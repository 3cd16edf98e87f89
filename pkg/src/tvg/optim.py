"""Adaptive-moment gradient steps on flat parameter arrays."""

import numpy as np


class Adam:
    """Per-coordinate Adam; ``lr`` may be a scalar or an array matching the parameters."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, grad):
        """Return the update to subtract from the parameters."""
        grad = np.asarray(grad, dtype=float)
        if self.m is None or self.m.shape != grad.shape:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
            self.t = 0
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
