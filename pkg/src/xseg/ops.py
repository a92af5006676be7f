"""Differentiable rank-4 array primitives.

Everything operates on arrays shaped (batch, channels, height, width).
Forward passes are vectorized numpy (convolution goes through an im2col
buffer and a single matmul); each primitive has a hand-derived backward
that the layer wrappers compose. There is no graph-building autodiff.

Convolution uses the cross-correlation convention (no kernel flip)
throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError
from .tensor import assert_finite, require_tensor4


@dataclass
class ConvKernel:
    """Convolution parameters.

    weights: (C_out, C_in, k_h, k_w); bias: (C_out,) or None for bias-free
    convolutions; padding: "same" (preserves H, W at stride 1) or "valid".
    """

    weights: np.ndarray
    bias: np.ndarray | None = None
    padding: str = "same"
    stride: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise DimensionError(f"kernel weights must be rank-4, got shape {self.weights.shape}")
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match C_out={self.weights.shape[0]}"
            )
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")


def _pad_widths(kh: int, kw: int, padding: str) -> tuple[int, int, int, int]:
    if padding == "valid":
        return 0, 0, 0, 0
    return (kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2


def _im2col(x: np.ndarray, kh: int, kw: int, padding: str, stride: int):
    """Flatten every kernel-sized window into a row: (B, Ho*Wo, C*kh*kw)."""
    b, c, h, w = x.shape
    pt, pb, pl, pr = _pad_widths(kh, kw, padding)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    hp, wp = x.shape[2], x.shape[3]
    if hp < kh or wp < kw:
        raise DimensionError(f"input {h}x{w} too small for {kh}x{kw} kernel with {padding} padding")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d_output_shape(h: int, w: int, kernel: ConvKernel) -> tuple[int, int]:
    kh, kw = kernel.weights.shape[2], kernel.weights.shape[3]
    pt, pb, pl, pr = _pad_widths(kh, kw, kernel.padding)
    ho = (h + pt + pb - kh) // kernel.stride + 1
    wo = (w + pl + pr - kw) // kernel.stride + 1
    return ho, wo


def conv2d(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """2D cross-correlation of x (B, C_in, H, W) with the kernel."""
    require_tensor4(x)
    co, ci, kh, kw = kernel.weights.shape
    if x.shape[1] != ci:
        raise DimensionError(
            f"channel mismatch: input shape {x.shape} vs kernel shape {kernel.weights.shape}"
        )
    b = x.shape[0]
    cols, ho, wo = _im2col(x, kh, kw, kernel.padding, kernel.stride)
    y = cols @ kernel.weights.reshape(co, ci * kh * kw).T
    if kernel.bias is not None:
        y += kernel.bias
    y = y.transpose(0, 2, 1).reshape(b, co, ho, wo)
    return assert_finite(y, "conv2d")


def conv2d_backward(x: np.ndarray, kernel: ConvKernel, grad_out: np.ndarray):
    """Gradients of a scalar loss through conv2d.

    Returns (grad_input, grad_weights, grad_bias); grad_bias is None for
    bias-free kernels.
    """
    require_tensor4(x)
    require_tensor4(grad_out, "grad_out")
    co, ci, kh, kw = kernel.weights.shape
    b, c, h, w = x.shape
    ho, wo = conv2d_output_shape(h, w, kernel)
    if grad_out.shape != (b, co, ho, wo):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match conv output {(b, co, ho, wo)}"
        )
    cols, _, _ = _im2col(x, kh, kw, kernel.padding, kernel.stride)

    g2 = grad_out.reshape(b, co, ho * wo).transpose(0, 2, 1)  # (B, P, C_out)
    grad_w = (
        g2.reshape(-1, co).T @ cols.reshape(-1, ci * kh * kw)
    ).reshape(kernel.weights.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if kernel.bias is not None else None

    gcols = g2 @ kernel.weights.reshape(co, ci * kh * kw)  # (B, P, C_in*kh*kw)
    gcols = gcols.reshape(b, ho, wo, ci, kh, kw).transpose(0, 3, 1, 2, 4, 5)

    pt, pb, pl, pr = _pad_widths(kh, kw, kernel.padding)
    gxp = np.zeros((b, ci, h + pt + pb, w + pl + pr), dtype=grad_out.dtype)
    s = kernel.stride
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, :, :, :, i, j]
    grad_x = gxp[:, :, pt : pt + h, pl : pl + w]
    return grad_x, grad_w, grad_b


def maxpool2x2(x: np.ndarray):
    """2x2 max pooling with stride 2. Returns (output, argmax indices).

    Ties go to the first element in row-major window order, so a constant
    window reports its top-left corner.
    """
    require_tensor4(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even H and W, got {h}x{w}")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h // 2, w // 2, 4
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(grad_out: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Route output gradients to the stored argmax positions, zero elsewhere."""
    require_tensor4(grad_out, "grad_out")
    if grad_out.shape != idx.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} vs argmax shape {idx.shape}")
    b, c, h2, w2 = grad_out.shape
    win = np.zeros((b, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, idx[..., None], grad_out[..., None], axis=-1)
    return win.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)


def upsample2x2(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor 2x upsampling: each cell becomes a 2x2 block."""
    require_tensor4(x)
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2x2_backward(grad_out: np.ndarray) -> np.ndarray:
    """Each parent cell collects the sum of its four children's gradients."""
    require_tensor4(grad_out, "grad_out")
    b, c, h, w = grad_out.shape
    if h % 2 or w % 2:
        raise DimensionError(f"upsample2x2 gradient must have even dims, got {h}x{w}")
    return grad_out.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    eps: float = 1e-5,
    momentum: float = 0.1,
    train: bool = True,
):
    """Per-channel batch normalization over the (B, H, W) axes.

    Train mode normalizes with batch statistics and updates the running
    stats in place: running = (1 - momentum) * running + momentum * batch.
    Eval mode uses the running stats (initialized to mean 0, var 1, so an
    eval pass before any training step is well defined). Returns
    (output, cache) where the cache drives batchnorm_backward.
    """
    require_tensor4(x)
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"gamma/beta must have shape ({x.shape[1]},), got {gamma.shape} and {beta.shape}"
        )
    if eps <= 0:
        raise ConfigError(f"eps must be > 0, got {eps}")
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, inv_std, gamma, train)
    return assert_finite(y, "batchnorm"), cache


def batchnorm_backward(grad_out: np.ndarray, cache):
    """Gradients for input, gamma and beta from a batchnorm forward cache."""
    xhat, inv_std, gamma, train = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    gxhat = grad_out * gamma[None, :, None, None]
    if not train:
        return gxhat * inv_std[None, :, None, None], grad_gamma, grad_beta
    b, c, h, w = grad_out.shape
    n = b * h * w
    sum_g = gxhat.sum(axis=(0, 2, 3))
    sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3))
    grad_x = (inv_std[None, :, None, None] / n) * (
        n * gxhat - sum_g[None, :, None, None] - xhat * sum_gx[None, :, None, None]
    )
    return grad_x, grad_gamma, grad_beta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Subgradient 0 at exactly 0.
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out: np.ndarray, y: np.ndarray) -> np.ndarray:
    return grad_out * y * (1.0 - y)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Softmax over the channel axis, independently at every (b, h, w).

    Max-subtracted for stability; output channels sum to 1 per pixel.
    """
    require_tensor4(x)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    return assert_finite(out, "softmax_channels")


def softmax_channels_backward(grad_out: np.ndarray, softmax_out: np.ndarray) -> np.ndarray:
    s = softmax_out
    return s * (grad_out - (grad_out * s).sum(axis=1, keepdims=True))


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

_SQRT_GUARD = 1e-12


def _sobel_responses(x: np.ndarray):
    """Horizontal/vertical Sobel responses with edge-replicated borders.

    Grouped as paired differences so a constant image yields exactly zero.
    """
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    gx = (
        (p[:, :, :-2, 2:] - p[:, :, :-2, :-2])
        + 2.0 * (p[:, :, 1:-1, 2:] - p[:, :, 1:-1, :-2])
        + (p[:, :, 2:, 2:] - p[:, :, 2:, :-2])
    )
    gy = (
        (p[:, :, 2:, :-2] - p[:, :, :-2, :-2])
        + 2.0 * (p[:, :, 2:, 1:-1] - p[:, :, :-2, 1:-1])
        + (p[:, :, 2:, 2:] - p[:, :, :-2, 2:])
    )
    return gx, gy


def sobel_gradient_magnitude(x: np.ndarray) -> np.ndarray:
    """Per-pixel sqrt(Gx^2 + Gy^2) of a single-channel map.

    Borders are edge-replicated so the output matches the input size; a
    constant image therefore maps to exactly zero.
    """
    require_tensor4(x)
    if x.shape[1] != 1:
        raise DimensionError(f"sobel magnitude expects a single channel, got shape {x.shape}")
    gx, gy = _sobel_responses(x)
    return np.sqrt(gx * gx + gy * gy)


def sobel_backward(x: np.ndarray, grad_mag: np.ndarray) -> np.ndarray:
    """Backward of sobel_gradient_magnitude; sqrt guarded at zero magnitude."""
    require_tensor4(x)
    if grad_mag.shape != x.shape:
        raise DimensionError(f"grad shape {grad_mag.shape} does not match input {x.shape}")
    gx, gy = _sobel_responses(x)
    mag = np.sqrt(gx * gx + gy * gy)
    scale = grad_mag / (mag + _SQRT_GUARD)
    ggx = scale * gx
    ggy = scale * gy

    b, c, h, w = x.shape
    gp = np.zeros((b, c, h + 2, w + 2), dtype=grad_mag.dtype)
    taps = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    for di, dj in taps:
        wx = SOBEL_X[di + 1, dj + 1]
        wy = SOBEL_Y[di + 1, dj + 1]
        block = gp[:, :, 1 + di : 1 + di + h, 1 + dj : 1 + dj + w]
        if wx:
            block += wx * ggx
        if wy:
            block += wy * ggy

    # Fold the replicated border back onto the edge pixels.
    g = gp[:, :, 1 : 1 + h, 1 : 1 + w].copy()
    g[:, :, 0, :] += gp[:, :, 0, 1 : 1 + w]
    g[:, :, -1, :] += gp[:, :, -1, 1 : 1 + w]
    g[:, :, :, 0] += gp[:, :, 1 : 1 + h, 0]
    g[:, :, :, -1] += gp[:, :, 1 : 1 + h, -1]
    g[:, :, 0, 0] += gp[:, :, 0, 0]
    g[:, :, 0, -1] += gp[:, :, 0, -1]
    g[:, :, -1, 0] += gp[:, :, -1, 0]
    g[:, :, -1, -1] += gp[:, :, -1, -1]
    return g
