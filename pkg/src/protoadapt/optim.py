"""SGD with momentum and decoupled-from-nothing classic weight decay.

v <- mu*v + (g + wd*theta); theta <- theta - lr*v. Frozen parameters are
rejected at construction: the optimizer's parameter set may contain only
trainable weights.
"""

import numpy as np

from .tensor import Parameter


class SGD:
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        params = list(params)
        for p in params:
            if not isinstance(p, Parameter):
                raise TypeError(f"SGD expects Parameters, got {type(p).__name__}")
            if p.frozen:
                raise ValueError(f"frozen parameter {p.name!r} passed to optimizer")
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity = {id(p): np.zeros_like(p.data) for p in params}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self._velocity[id(p)]
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v
