"""AdamW with decoupled weight decay and polynomial learning-rate decay."""

import numpy as np


class AdamW:
    def __init__(self, params, lr, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params  # OrderedDict name -> Tensor
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr=None):
        """One update; decay is applied directly to the weights, not the gradient."""
        if lr is None:
            lr = self.lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update


def poly_lr(base_lr, step, total, power=0.9):
    """base_lr * (1 - step/total)^power, step counted from 0."""
    if total < 1:
        raise ValueError(f"total steps must be >= 1, got {total}")
    frac = min(max(step / total, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power
