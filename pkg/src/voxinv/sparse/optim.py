import numpy as np


class Adam:
    """Adam with bias correction. ``step`` applies the update and clears gradients."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data, dtype=np.float64) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data, dtype=np.float64) for p in self.params}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)
            p.grad = None

