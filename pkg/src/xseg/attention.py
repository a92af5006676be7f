"""The two attention mechanisms used on the input and the skip paths:
pixel-wise cross-slice attention and additive sigmoid attention gates."""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import DimensionError
from .layers import Conv2dLayer
from .params import ParamStore


class CrossSliceAttention:
    """Residual per-pixel channel attention: x + x * softmax_c(proj(x)).

    The projection is strictly a 1x1 convolution over the channel (slice)
    axis, so at every spatial location the attention weights form a
    distribution over channels. Weights and bias start at zero, which makes
    the block the exact map x -> x + x / C until training moves it.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, dtype):
        self.proj = Conv2dLayer(store, f"{name}.proj", channels, channels, 1, None, dtype, init="zeros")
        self._x = None
        self._attention = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        logits = self.proj.forward(x)
        self._attention = ops.softmax_channels(logits)
        return x + x * self._attention

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        a = self._attention
        grad_x = grad_out + grad_out * a
        grad_logits = ops.softmax_channels_backward(grad_out * self._x, a)
        grad_x += self.proj.backward(grad_logits)
        return grad_x

    @property
    def attention(self) -> np.ndarray:
        """Attention map from the most recent forward (sums to 1 per pixel)."""
        return self._attention


class AttentionGate:
    """Additive gate on skip features: sigmoid(theta(x) + phi(g) + b) * x.

    theta and phi are bias-free 1x1 convolutions that map the skip features
    x and the gating signal g to a shared channel count (x's), and b is the
    single shared bias of the sum. x and g must already be spatially
    aligned; this block does not resample.
    """

    def __init__(self, store: ParamStore, name: str, x_channels: int, g_channels: int, rng, dtype):
        self.theta = Conv2dLayer(store, f"{name}.theta", x_channels, x_channels, 1, rng, dtype, bias=False)
        self.phi = Conv2dLayer(store, f"{name}.phi", g_channels, x_channels, 1, rng, dtype, bias=False)
        self.bias = store.add(f"{name}.bias", np.zeros(x_channels, dtype=dtype))
        self._x = None
        self._alpha = None

    def forward(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if x.shape[0] != g.shape[0] or x.shape[2:] != g.shape[2:]:
            raise DimensionError(
                f"gate inputs must share (B, H, W): x {x.shape} vs g {g.shape};"
                " this block does not resample"
            )
        s = self.theta.forward(x) + self.phi.forward(g) + self.bias.value[None, :, None, None]
        self._x = x
        self._alpha = ops.sigmoid(s)
        return self._alpha * x

    def backward(self, grad_out: np.ndarray):
        """Returns (grad_x, grad_g)."""
        alpha = self._alpha
        grad_s = ops.sigmoid_backward(grad_out * self._x, alpha)
        self.bias.grad += grad_s.sum(axis=(0, 2, 3))
        grad_x = grad_out * alpha + self.theta.backward(grad_s)
        grad_g = self.phi.backward(grad_s)
        return grad_x, grad_g

    @property
    def alpha(self) -> np.ndarray:
        return self._alpha
