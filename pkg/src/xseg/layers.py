"""Stateful layer wrappers around the functional primitives: each layer
registers its parameters, caches what its backward needs, and accumulates
parameter gradients in place."""

from __future__ import annotations

import numpy as np

from . import ops
from .params import ParamStore
from .tensor import he_uniform


class Conv2dLayer:
    def __init__(
        self,
        store: ParamStore,
        name: str,
        c_in: int,
        c_out: int,
        kernel_size: int,
        rng,
        dtype,
        *,
        init: str = "he",
        bias: bool = True,
        padding: str = "same",
    ):
        shape = (c_out, c_in, kernel_size, kernel_size)
        if init == "he":
            weights = he_uniform(rng, shape, c_in * kernel_size * kernel_size, dtype)
        elif init == "zeros":
            weights = np.zeros(shape, dtype=dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = store.add(f"{name}.weight", weights)
        self.bias = store.add(f"{name}.bias", np.zeros(c_out, dtype=dtype)) if bias else None
        self.kernel = ops.ConvKernel(
            self.weight.value,
            self.bias.value if self.bias is not None else None,
            padding=padding,
        )
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return ops.conv2d(x, self.kernel)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        grad_x, grad_w, grad_b = ops.conv2d_backward(self._x, self.kernel, grad_out)
        self.weight.grad += grad_w
        if self.bias is not None:
            self.bias.grad += grad_b
        return grad_x


class BatchNormLayer:
    def __init__(self, store: ParamStore, name: str, channels: int, dtype, *, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = store.add(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = store.add(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = store.add_buffer(f"{name}.running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = store.add_buffer(f"{name}.running_var", np.ones(channels, dtype=dtype))
        self.eps = eps
        self.momentum = momentum
        self._cache = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        y, self._cache = ops.batchnorm_forward(
            x,
            self.gamma.value,
            self.beta.value,
            self.running_mean,
            self.running_var,
            eps=self.eps,
            momentum=self.momentum,
            train=train,
        )
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        grad_x, grad_gamma, grad_beta = ops.batchnorm_backward(grad_out, self._cache)
        self.gamma.grad += grad_gamma
        self.beta.grad += grad_beta
        return grad_x


class ConvBnRelu:
    """One conv stage unit; the normalization/activation order is a config
    switch (conv-bn-relu by default).

    When normalization directly follows the convolution, the conv bias is
    omitted: the batch-mean subtraction cancels any per-channel shift, so
    the bias would be a dead parameter (beta plays its role). With the
    relu-first order the bias is meaningful and kept."""

    def __init__(self, store, name, c_in, c_out, rng, dtype, *, kernel_size=3, bn_before_relu=True):
        self.conv = Conv2dLayer(
            store, f"{name}.conv", c_in, c_out, kernel_size, rng, dtype, bias=not bn_before_relu
        )
        self.bn = BatchNormLayer(store, f"{name}.bn", c_out, dtype)
        self.bn_before_relu = bn_before_relu
        self._pre_relu = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        y = self.conv.forward(x)
        if self.bn_before_relu:
            y = self.bn.forward(y, train)
            self._pre_relu = y
            return ops.relu(y)
        self._pre_relu = y
        return self.bn.forward(ops.relu(y), train)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self.bn_before_relu:
            g = ops.relu_backward(grad_out, self._pre_relu)
            g = self.bn.backward(g)
        else:
            g = self.bn.backward(grad_out)
            g = ops.relu_backward(g, self._pre_relu)
        return self.conv.backward(g)

    def relu_input_margin(self) -> float:
        """Distance of the cached pre-activation from the ReLU kink."""
        return float(np.abs(self._pre_relu).min()) if self._pre_relu is not None else np.inf
