"""Parameterised layers built on :mod:`speckle_lab.nn.tensor`."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .optim import xavier_init
from .tensor import Tensor


class Module:
    """Container with named parameters, buffers and a train/eval flag."""

    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def __call__(self, x, **kw):
        return self.forward(x, **kw)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=None, seed=0, dtype=np.float32):
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = k // 2 if pad is None else pad
        self.weight = Tensor(xavier_init((cout, cin, k, k), seed, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def forward(self, x, **kw):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c, momentum=0.9, eps=1e-5, dtype=np.float32):
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def forward(self, x, **kw):
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    """Convolution followed by batch normalisation and ReLU."""

    def __init__(self, cin, cout, k, stride=1, seed=0, dtype=np.float32):
        self.conv = Conv2d(cin, cout, k, stride, seed=seed, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    @property
    def out_channels(self):
        return self.conv.cout

    def forward(self, x, **kw):
        return T.relu(self.bn(self.conv(x)))


class MaxPool(Module):
    def __init__(self, k=3, stride=2, pad=1):
        self.k, self.stride, self.pad = k, stride, pad

    def forward(self, x, **kw):
        return T.maxpool2d(x, self.k, self.stride, self.pad)


class AvgPool(Module):
    def __init__(self, k=3, stride=1, pad=1):
        self.k, self.stride, self.pad = k, stride, pad

    def forward(self, x, **kw):
        return T.avgpool2d(x, self.k, self.stride, self.pad)


class Dropout(Module):
    def __init__(self, p=0.5):
        self.p = p

    def forward(self, x, rng=None, **kw):
        return T.dropout(x, self.p, rng, self.training)


class Upsample(Module):
    def __init__(self, factor=2):
        self.factor = factor

    def forward(self, x, **kw):
        return T.upsample_nearest(x, self.factor)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x, **kw):
        for layer in self.layers:
            x = layer(x, **kw)
        return x
