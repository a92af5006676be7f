"""Finite-difference verification of every hand-written backward.

All checks run in double precision. The analytic gradient comes from the
backward under test; the reference is a central difference of a scalar
probe loss (the sum of the output against a fixed random projection), so
the reference never touches the backward path. Errors are reported as
max|analytic - reference| / max(scale of either), per parameter array.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .attention import AttentionGate, CrossSliceAttention
from .losses import boundary_loss_grad, combined_loss_grad, dice_loss_grad
from .network import CrossSliceUNet, NetworkConfig
from .params import ParamStore

FD_STEP = 1e-5
PRIMITIVE_TOL = 1e-5
CONV_TOL = 1e-6
LOSS_TOL = 1e-6
BLOCK_TOL = 1e-5
NETWORK_TOL = 1e-4
PARAM_SAMPLES_PER_LAYER = 50


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def rel_err(analytic: np.ndarray, reference: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(reference).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - reference).max(initial=0.0) / scale)


def fd_grad(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f with respect to every entry of x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def _probe(rng, shape):
    return rng.standard_normal(shape)


# ------------------------------------------------------------------ primitives


def check_conv(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    kernel = ops.ConvKernel(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4))
    r = _probe(rng, ops.conv2d(x, kernel).shape)

    def loss():
        return float((ops.conv2d(x, kernel) * r).sum())

    gx, gw, gb = ops.conv2d_backward(x, kernel, r)
    err = max(
        rel_err(gx, fd_grad(loss, x)),
        rel_err(gw, fd_grad(loss, kernel.weights)),
        rel_err(gb, fd_grad(loss, kernel.bias)),
    )
    return CheckResult("conv2d", err, CONV_TOL)


def check_maxpool(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 8, 8))

    def loss():
        return float((ops.maxpool2x2(x)[0] * r).sum())

    out, idx = ops.maxpool2x2(x)
    r = _probe(rng, out.shape)
    gx = ops.maxpool2x2_backward(r, idx)
    return CheckResult("maxpool2x2", rel_err(gx, fd_grad(loss, x)), PRIMITIVE_TOL)


def check_upsample(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    r = _probe(rng, (2, 3, 8, 8))

    def loss():
        return float((ops.upsample2x2(x) * r).sum())

    gx = ops.upsample2x2_backward(r)
    return CheckResult("upsample2x2", rel_err(gx, fd_grad(loss, x)), PRIMITIVE_TOL)


def check_batchnorm(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    gamma = rng.uniform(0.5, 1.5, 3)
    beta = rng.standard_normal(3)
    r = _probe(rng, x.shape)

    def loss():
        rm, rv = np.zeros(3), np.ones(3)
        y, _ = ops.batchnorm_forward(x, gamma, beta, rm, rv, train=True)
        return float((y * r).sum())

    rm, rv = np.zeros(3), np.ones(3)
    _, cache = ops.batchnorm_forward(x, gamma, beta, rm, rv, train=True)
    gx, gg, gb = ops.batchnorm_backward(r, cache)
    err = max(
        rel_err(gx, fd_grad(loss, x)),
        rel_err(gg, fd_grad(loss, gamma)),
        rel_err(gb, fd_grad(loss, beta)),
    )
    return CheckResult("batchnorm", err, PRIMITIVE_TOL)


def check_relu(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 1e-3  # keep the probe away from the kink
    r = _probe(rng, x.shape)

    def loss():
        return float((ops.relu(x) * r).sum())

    return CheckResult("relu", rel_err(ops.relu_backward(r, x), fd_grad(loss, x)), PRIMITIVE_TOL)


def check_sigmoid(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    r = _probe(rng, x.shape)

    def loss():
        return float((ops.sigmoid(x) * r).sum())

    gx = ops.sigmoid_backward(r, ops.sigmoid(x))
    return CheckResult("sigmoid", rel_err(gx, fd_grad(loss, x)), PRIMITIVE_TOL)


def check_softmax(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4, 4, 4))
    r = _probe(rng, x.shape)

    def loss():
        return float((ops.softmax_channels(x) * r).sum())

    gx = ops.softmax_channels_backward(r, ops.softmax_channels(x))
    return CheckResult("softmax_channels", rel_err(gx, fd_grad(loss, x)), PRIMITIVE_TOL)


def check_sobel(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 1, 6, 6))
    r = _probe(rng, x.shape)

    def loss():
        return float((ops.sobel_gradient_magnitude(x) * r).sum())

    gx = ops.sobel_backward(x, r)
    return CheckResult("sobel_magnitude", rel_err(gx, fd_grad(loss, x)), PRIMITIVE_TOL)


def check_primitives(seed: int = 0) -> list[CheckResult]:
    return [
        check_conv(seed),
        check_maxpool(seed),
        check_upsample(seed),
        check_batchnorm(seed),
        check_relu(seed),
        check_sigmoid(seed),
        check_softmax(seed),
        check_sobel(seed),
    ]


# ---------------------------------------------------------------------- blocks


def check_cross_slice_attention(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    block = CrossSliceAttention(store, "csa", 3, np.float64)
    block.proj.weight.value[...] = 0.3 * rng.standard_normal(block.proj.weight.value.shape)
    block.proj.bias.value[...] = 0.1 * rng.standard_normal(3)
    x = rng.standard_normal((2, 3, 5, 5))
    r = _probe(rng, x.shape)

    def loss():
        return float((block.forward(x) * r).sum())

    block.forward(x)
    store.zero_grads()
    gx = block.backward(r)
    errs = [rel_err(gx, fd_grad(loss, x))]
    for p in store.params():
        errs.append(rel_err(p.grad, fd_grad(loss, p.value)))
    return CheckResult("cross_slice_attention", max(errs), BLOCK_TOL)


def check_attention_gate(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    block = AttentionGate(store, "gate", 3, 6, rng, np.float64)
    x = rng.standard_normal((2, 3, 5, 5))
    g = rng.standard_normal((2, 6, 5, 5))
    r = _probe(rng, x.shape)

    def loss():
        return float((block.forward(x, g) * r).sum())

    block.forward(x, g)
    store.zero_grads()
    gx, gg = block.backward(r)
    errs = [rel_err(gx, fd_grad(loss, x)), rel_err(gg, fd_grad(loss, g))]
    for p in store.params():
        errs.append(rel_err(p.grad, fd_grad(loss, p.value)))
    return CheckResult("attention_gate", max(errs), BLOCK_TOL)


def check_blocks(seed: int = 0) -> list[CheckResult]:
    return [check_cross_slice_attention(seed), check_attention_gate(seed)]


# ---------------------------------------------------------------------- losses


def check_loss_grads(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    y_true = y_pred = None
    for _ in range(50):
        y_true = (rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(np.float64)
        y_pred = rng.uniform(0.05, 0.95, size=(1, 1, 8, 8))
        diff = ops.sobel_gradient_magnitude(y_true) - ops.sobel_gradient_magnitude(y_pred)
        # Keep the |.| kink of the boundary loss out of FD reach.
        if np.abs(diff).min() > 1e-3:
            break
    results = []
    for name, fn in (
        ("dice_loss", dice_loss_grad),
        ("boundary_loss", boundary_loss_grad),
        ("combined_loss", combined_loss_grad),
    ):
        _, grad = fn(y_true, y_pred)
        fd = fd_grad(lambda: fn(y_true, y_pred)[0], y_pred)
        results.append(CheckResult(name, rel_err(grad, fd), LOSS_TOL))
    return results


# --------------------------------------------------------------------- network


DESK_CONFIG = NetworkConfig(input_size=(32, 32), base_filters=4, depth=2, seed=0)


def check_network(config: NetworkConfig | None = None, seed: int = 0, samples: int = PARAM_SAMPLES_PER_LAYER):
    """Sampled finite-difference check of the full network.

    The training loss (combined Dice + boundary vs a random binary target)
    probes `samples` randomly chosen entries of every parameter array. A
    central difference is only a valid derivative estimate while the
    network's piecewise decisions (ReLU signs, pool argmaxes, the boundary
    loss's absolute value) are unchanged. A probe whose +/- evaluations
    straddle a kink is retried at a tenth of the step (the crossing window
    shrinks with the step); if it still straddles, it is skipped. At least
    a third of the samples per array (never fewer than 3) must remain
    measurable; early layers reach every downstream activation and so skip
    the most.
    """
    cfg = replace(config or DESK_CONFIG, seed=seed)
    net = CrossSliceUNet(cfg, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)

    x = rng.standard_normal((2, cfg.in_slices, *cfg.input_size))
    target = (rng.uniform(size=(2, 1, *cfg.input_size)) > 0.5).astype(np.float64)
    target_mag = ops.sobel_gradient_magnitude(target)

    def loss_and_signature():
        pred = net.forward(x, train=True)
        loss, _ = combined_loss_grad(target, pred)
        boundary_sign = np.sign(target_mag - ops.sobel_gradient_magnitude(pred))
        return loss, net.decision_signature() + (boundary_sign,)

    pred = net.forward(x, train=True)
    _, grad = combined_loss_grad(target, pred)
    net.params.zero_grads()
    net.backward(grad)

    def same_signature(a, b):
        return all(np.array_equal(u, v) for u, v in zip(a, b))

    results = []
    step = FD_STEP
    for p in net.params.params():
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        k = min(samples, flat.size)
        picks = rng.choice(flat.size, size=k, replace=False)
        analytic = []
        reference = []
        for i in picks:
            orig = flat[i]
            for h in (step, step / 10.0):
                flat[i] = orig + h
                fp, sig_p = loss_and_signature()
                flat[i] = orig - h
                fm, sig_m = loss_and_signature()
                flat[i] = orig
                if same_signature(sig_p, sig_m):
                    analytic.append(gflat[i])
                    reference.append((fp - fm) / (2.0 * h))
                    break
        if len(analytic) < min(k, max(3, k // 3)):
            raise RuntimeError(
                f"too few kink-free probes for {p.name}: {len(analytic)}/{k}"
            )
        results.append(
            CheckResult(
                f"network:{p.name}",
                rel_err(np.array(analytic), np.array(reference)),
                NETWORK_TOL,
            )
        )
    return results


def run_all(config: NetworkConfig | None = None, seed: int = 0) -> list[CheckResult]:
    results = check_primitives(seed)
    results += check_blocks(seed)
    results += check_loss_grads(seed)
    results += check_network(config, seed)
    return results
