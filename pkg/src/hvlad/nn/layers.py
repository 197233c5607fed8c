"""Stateful layer wrappers around the functional ops.

Layers keep no tensors of their own: weights live in a shared `LayerParams`
store and are looked up by name on every call, so loading a checkpoint or
sharing a layer between branches needs no extra bookkeeping. Each forward
pushes a cache and each backward pops one, which lets a layer be applied
several times per pass (the shared FC head does exactly that).
"""
from __future__ import annotations

import numpy as np

from . import functional as F


class LayerParams:
    """Named tensors of a model plus gradient accumulators for the trainable ones."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.tensors: dict[str, np.ndarray] = {}
        self.trainable: list[str] = []
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name, value, trainable=True):
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.tensors[name] = np.ascontiguousarray(value, dtype=self.dtype)
        if trainable:
            self.trainable.append(name)
        return name

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def parameters(self) -> dict:
        return {n: self.tensors[n] for n in self.trainable}

    def count(self, trainable_only=True) -> int:
        names = self.trainable if trainable_only else self.tensors
        return int(sum(self.tensors[n].size for n in names))

    def zero_grad(self):
        self.grads = {}

    def accumulate(self, name, g):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = np.array(g, dtype=self.dtype)

    def astype(self, dtype):
        """Copy of the store (tensors only) converted to ``dtype``."""
        out = LayerParams(dtype)
        for n, t in self.tensors.items():
            out.add(n, t, trainable=n in self.trainable)
        return out


def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    def __init__(self, store: LayerParams, name: str):
        self.store = store
        self.name = name
        self._caches = []

    def reset(self):
        self._caches.clear()


class Conv2d(Layer):
    """Convolution; ``bias=False`` when a batch norm follows and would cancel it."""

    def __init__(self, store, name, c_in, c_out, k, stride=1, pad=0, rng=None, need_dx=True,
                 bias=True):
        super().__init__(store, name)
        self.stride, self.pad, self.need_dx, self.bias = stride, pad, need_dx, bias
        fan_in = c_in * k * k
        store.add(f"{name}.weight", he_uniform(rng, (c_out, c_in, k, k), fan_in))
        if bias:
            store.add(f"{name}.bias", np.zeros(c_out))
        else:
            self._zero_bias = np.zeros(c_out, dtype=store.dtype)

    def forward(self, x, train=True):
        s = self.store
        b = s[f"{self.name}.bias"] if self.bias else self._zero_bias
        out, cache = F.conv2d_forward(x, s[f"{self.name}.weight"], b, self.stride, self.pad)
        if train:
            self._caches.append(cache)
        return out

    def backward(self, dout):
        dx, dw, db = F.conv2d_backward(dout, self._caches.pop(), need_dx=self.need_dx)
        self.store.accumulate(f"{self.name}.weight", dw)
        if self.bias:
            self.store.accumulate(f"{self.name}.bias", db)
        return dx


class BatchNorm2d(Layer):
    def __init__(self, store, name, channels, momentum=0.1, eps=1e-5):
        super().__init__(store, name)
        self.momentum, self.eps = momentum, eps
        store.add(f"{name}.gamma", np.ones(channels))
        store.add(f"{name}.beta", np.zeros(channels))
        store.add(f"{name}.running_mean", np.zeros(channels), trainable=False)
        store.add(f"{name}.running_var", np.ones(channels), trainable=False)

    def forward(self, x, train=True):
        s, n = self.store, self.name
        out, cache = F.batchnorm2d_forward(
            x, s[f"{n}.gamma"], s[f"{n}.beta"], s[f"{n}.running_mean"], s[f"{n}.running_var"],
            train=train, momentum=self.momentum, eps=self.eps)
        if train:
            self._caches.append(cache)
        return out

    def backward(self, dout):
        dx, dg, db = F.batchnorm2d_backward(dout, self._caches.pop())
        self.store.accumulate(f"{self.name}.gamma", dg)
        self.store.accumulate(f"{self.name}.beta", db)
        return dx


class ReLU(Layer):
    def __init__(self):
        super().__init__(None, "relu")

    def forward(self, x, train=True):
        out, mask = F.relu_forward(x)
        if train:
            self._caches.append(mask)
        return out

    def backward(self, dout):
        return F.relu_backward(dout, self._caches.pop())


class MaxPool2d(Layer):
    """Max pooling; ``k=None`` on an axis pools over that whole axis."""

    def __init__(self, k=2, stride=None):
        super().__init__(None, "maxpool")
        self.k, self.stride = k, stride

    def forward(self, x, train=True):
        kh, kw = self.k if isinstance(self.k, tuple) else (self.k, self.k)
        kh = x.shape[2] if kh is None else kh
        kw = x.shape[3] if kw is None else kw
        stride = self.stride if self.stride is not None else (kh, kw)
        out, cache = F.maxpool2d_forward(x, (kh, kw), stride)
        if train:
            self._caches.append(cache)
        return out

    def backward(self, dout):
        return F.maxpool2d_backward(dout, self._caches.pop())


class Linear(Layer):
    def __init__(self, store, name, d_in, d_out, rng=None):
        super().__init__(store, name)
        store.add(f"{name}.weight", he_uniform(rng, (d_out, d_in), d_in))
        store.add(f"{name}.bias", np.zeros(d_out))

    def forward(self, x, train=True):
        s = self.store
        out, cache = F.linear_forward(x, s[f"{self.name}.weight"], s[f"{self.name}.bias"])
        if train:
            self._caches.append(cache)
        return out

    def backward(self, dout):
        dx, dw, db = F.linear_backward(dout, self._caches.pop())
        self.store.accumulate(f"{self.name}.weight", dw)
        self.store.accumulate(f"{self.name}.bias", db)
        return dx
