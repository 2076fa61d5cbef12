"""Parameterized layers with Xavier-uniform initialization."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class Conv2d:
    def __init__(self, cin: int, cout: int, kernel: int, stride: int, rng, dtype=np.float32):
        fan_in = kernel * kernel * cin
        fan_out = kernel * kernel * cout
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        self.w = ad.Tensor(
            rng.uniform(-limit, limit, (kernel, kernel, cin, cout)).astype(dtype),
            requires_grad=True,
        )
        self.b = ad.Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.stride = stride

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride)

    def params(self):
        return [self.w, self.b]


class Dense:
    def __init__(self, nin: int, nout: int, rng, dtype=np.float32):
        limit = np.sqrt(6.0 / (nin + nout))
        self.w = ad.Tensor(
            rng.uniform(-limit, limit, (nin, nout)).astype(dtype), requires_grad=True
        )
        self.b = ad.Tensor(np.zeros(nout, dtype=dtype), requires_grad=True)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self):
        return [self.w, self.b]
