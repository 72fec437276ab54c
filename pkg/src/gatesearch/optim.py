"""Parameter optimizers: Nesterov-momentum SGD and Adam.

Both operate on ``Tensor`` parameters with preallocated gradient buffers and
expose their state as named float arrays for checkpointing.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

__all__ = ["SGD", "Adam", "make_optimizer"]


class SGD:
    """SGD with optional Nesterov momentum and L2 weight decay."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=1e-4, nesterov=True):
        if lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.nesterov = nesterov
        self._buf = [None] * len(self.params)

    def step(self):
        for i, p in enumerate(self.params):
            g = p.grad_array()
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                if self._buf[i] is None:
                    self._buf[i] = np.zeros_like(p.data)
                buf = self._buf[i]
                buf *= self.momentum
                buf += g
                d = g + self.momentum * buf if self.nesterov else buf
            else:
                d = g
            p.data -= self.lr * d

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self):
        out = {}
        for i, buf in enumerate(self._buf):
            if buf is not None:
                out[f"{i}.momentum"] = buf
        return out

    def load_state_arrays(self, arrays):
        for key, arr in arrays.items():
            idx = int(key.split(".")[0])
            self._buf[idx] = np.array(arr, dtype=self.params[idx].data.dtype)


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        if lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad_array()
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self._m[i], self._v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self):
        out = {}
        for i in range(len(self.params)):
            out[f"{i}.m"] = self._m[i]
            out[f"{i}.v"] = self._v[i]
        return out

    def load_state_arrays(self, arrays):
        for key, arr in arrays.items():
            idx, kind = key.split(".")
            target = self._m if kind == "m" else self._v
            target[int(idx)] = np.array(arr, dtype=self.params[int(idx)].data.dtype)


def make_optimizer(kind, params, lr, momentum=0.9, weight_decay=1e-4):
    if kind == "sgd":
        return SGD(params, lr, momentum=momentum, weight_decay=weight_decay, nesterov=True)
    if kind == "adam":
        return Adam(params, lr, weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {kind!r} (expected 'sgd' or 'adam')")
