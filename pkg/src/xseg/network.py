"""Assembly of the full 2.5D segmentation network: optional input
cross-slice attention, a doubling-filter encoder, a bottleneck, and a
decoder whose skip fusion concatenates the upsampled decoder feature with
attention-refined (and/or gated) encoder features. Every attention site is
an independent switch so the 2^3 ablation grid is structurally exhaustive;
with all switches off the model reduces to a plain 2.5D U-Net."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .attention import AttentionGate, CrossSliceAttention
from .errors import ConfigError, DimensionError, StateError
from .layers import Conv2dLayer, ConvBnRelu
from .params import ParamStore, load_checkpoint, save_checkpoint
from .tensor import DEFAULT_DTYPE


@dataclass
class NetworkConfig:
    input_size: tuple[int, int] = (256, 256)
    in_slices: int = 3
    base_filters: int = 64
    depth: int = 4
    use_input_csa: bool = True
    use_skip_csa: bool = True
    use_skip_ag: bool = True
    convs_per_stage: int = 2
    bn_before_relu: bool = True
    seed: int = 0

    def validate(self) -> None:
        if min(self.in_slices, self.base_filters, self.depth, self.convs_per_stage) < 1:
            raise ConfigError("in_slices, base_filters, depth and convs_per_stage must be >= 1")
        factor = 2 ** self.depth
        h, w = self.input_size
        if h % factor:
            raise ConfigError(f"input height {h} is not divisible by 2^depth = {factor}")
        if w % factor:
            raise ConfigError(f"input width {w} is not divisible by 2^depth = {factor}")

    def encoder_channels(self) -> list[int]:
        return [self.base_filters * 2 ** i for i in range(self.depth)]

    def bottleneck_channels(self) -> int:
        return self.base_filters * 2 ** self.depth

    def with_flags(self, use_input_csa: bool, use_skip_csa: bool, use_skip_ag: bool) -> "NetworkConfig":
        return replace(
            self,
            use_input_csa=use_input_csa,
            use_skip_csa=use_skip_csa,
            use_skip_ag=use_skip_ag,
        )


class _EncoderStage:
    def __init__(self, blocks):
        self.blocks = blocks
        self.pool_idx = None
        self.skip = None


class _DecoderStage:
    def __init__(self, blocks, csa, gate):
        self.blocks = blocks
        self.csa = csa
        self.gate = gate
        self.part_channels = None


class CrossSliceUNet:
    """The full network with hand-composed forward and backward passes.

    A train-mode forward caches every intermediate the backward needs and
    is the only call that mutates batchnorm running statistics; eval-mode
    forwards are pure. Parameters are built deterministically from
    config.seed.
    """

    def __init__(self, config: NetworkConfig, dtype=DEFAULT_DTYPE):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.params = ParamStore()
        rng = np.random.default_rng(config.seed)

        cfg = config
        self.input_csa = (
            CrossSliceAttention(self.params, "input_csa", cfg.in_slices, dtype)
            if cfg.use_input_csa
            else None
        )

        chans = cfg.encoder_channels()
        self.encoder = []
        c_in = cfg.in_slices
        for i, c_out in enumerate(chans):
            blocks = []
            for j in range(cfg.convs_per_stage):
                blocks.append(
                    ConvBnRelu(
                        self.params, f"enc{i}.block{j}",
                        c_in if j == 0 else c_out, c_out,
                        rng, dtype, bn_before_relu=cfg.bn_before_relu,
                    )
                )
            self.encoder.append(_EncoderStage(blocks))
            c_in = c_out

        c_bottle = cfg.bottleneck_channels()
        self.bottleneck = []
        for j in range(cfg.convs_per_stage):
            self.bottleneck.append(
                ConvBnRelu(
                    self.params, f"bottleneck.block{j}",
                    chans[-1] if j == 0 else c_bottle, c_bottle,
                    rng, dtype, bn_before_relu=cfg.bn_before_relu,
                )
            )

        # decoder[i] corresponds to encoder stage i; built deepest-first so
        # parameter creation follows the forward pass order.
        self.decoder: list[_DecoderStage | None] = [None] * cfg.depth
        c_up = c_bottle
        for i in reversed(range(cfg.depth)):
            c_skip = chans[i]
            csa = (
                CrossSliceAttention(self.params, f"dec{i}.csa", c_skip, dtype)
                if cfg.use_skip_csa
                else None
            )
            gate = (
                AttentionGate(self.params, f"dec{i}.gate", c_skip, c_up, rng, dtype)
                if cfg.use_skip_ag
                else None
            )
            c_fused = c_up + (c_skip if csa else 0) + (c_skip if gate else 0)
            if csa is None and gate is None:
                c_fused += c_skip  # plain skip concatenation
            blocks = []
            for j in range(cfg.convs_per_stage):
                blocks.append(
                    ConvBnRelu(
                        self.params, f"dec{i}.block{j}",
                        c_fused if j == 0 else c_skip, c_skip,
                        rng, dtype, bn_before_relu=cfg.bn_before_relu,
                    )
                )
            self.decoder[i] = _DecoderStage(blocks, csa, gate)
            c_up = c_skip

        self.final = Conv2dLayer(self.params, "final", chans[0], 1, 1, rng, dtype)

        self._output = None
        self._backward_ready = False

    # ----------------------------------------------------------------- forward

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_slices or x.shape[2:] != tuple(cfg.input_size):
            raise DimensionError(
                f"input shape {getattr(x, 'shape', None)} does not match configured"
                f" (B, {cfg.in_slices}, {cfg.input_size[0]}, {cfg.input_size[1]})"
            )
        if x.dtype != self.dtype:
            x = x.astype(self.dtype)

        h = self.input_csa.forward(x) if self.input_csa is not None else x
        for stage in self.encoder:
            for blk in stage.blocks:
                h = blk.forward(h, train)
            stage.skip = h
            h, stage.pool_idx = ops.maxpool2x2(h)
        for blk in self.bottleneck:
            h = blk.forward(h, train)

        for i in reversed(range(cfg.depth)):
            dec = self.decoder[i]
            up = ops.upsample2x2(h)
            skip = self.encoder[i].skip
            parts = [up]
            channels = [up.shape[1]]
            if dec.csa is not None:
                parts.append(dec.csa.forward(skip))
                channels.append(skip.shape[1])
            if dec.gate is not None:
                parts.append(dec.gate.forward(skip, up))
                channels.append(skip.shape[1])
            if dec.csa is None and dec.gate is None:
                parts.append(skip)
                channels.append(skip.shape[1])
            dec.part_channels = channels
            h = np.concatenate(parts, axis=1)
            for blk in dec.blocks:
                h = blk.forward(h, train)

        logits = self.final.forward(h)
        out = ops.sigmoid(logits)
        self._output = out
        self._backward_ready = train
        return out

    # ---------------------------------------------------------------- backward

    def backward(self, grad_output: np.ndarray) -> np.ndarray:
        """Populate every parameter gradient; returns the input gradient."""
        if not self._backward_ready:
            raise StateError("backward requires a preceding train-mode forward")
        if grad_output.shape != self._output.shape:
            raise DimensionError(
                f"grad_output shape {grad_output.shape} does not match output {self._output.shape}"
            )
        cfg = self.config

        g = ops.sigmoid_backward(grad_output, self._output)
        g = self.final.backward(g)

        skip_grads: list[np.ndarray | None] = [None] * cfg.depth
        for i in range(cfg.depth):  # reverse of the deepest-first decode order
            dec = self.decoder[i]
            for blk in reversed(dec.blocks):
                g = blk.backward(g)
            splits = np.cumsum(dec.part_channels)[:-1]
            pieces = np.split(g, splits, axis=1)
            g_up = pieces[0]
            rest = pieces[1:]
            skip_grad = None
            if dec.csa is not None:
                skip_grad = dec.csa.backward(rest.pop(0))
            if dec.gate is not None:
                gx, gg = dec.gate.backward(rest.pop(0))
                skip_grad = gx if skip_grad is None else skip_grad + gx
                g_up = g_up + gg
            if dec.csa is None and dec.gate is None:
                skip_grad = rest.pop(0)
            skip_grads[i] = skip_grad
            g = ops.upsample2x2_backward(g_up)

        for blk in reversed(self.bottleneck):
            g = blk.backward(g)

        for i in reversed(range(cfg.depth)):
            stage = self.encoder[i]
            g = ops.maxpool2x2_backward(g, stage.pool_idx)
            g = g + skip_grads[i]
            for blk in reversed(stage.blocks):
                g = blk.backward(g)

        if self.input_csa is not None:
            g = self.input_csa.backward(g)
        return g

    # ------------------------------------------------------------- inspection

    def count_params(self) -> int:
        return self.params.count_values()

    def count_flops(self, input_size: tuple[int, int] | None = None) -> int:
        """Forward FLOPs for one sample.

        Counting rules: a convolution costs 2*k_h*k_w*C_in*C_out*H_out*W_out
        plus C_out*H_out*W_out bias adds; batchnorm 4 and sigmoid/softmax 4
        FLOPs per element; relu 1; max pooling 3 comparisons per output;
        nearest-neighbor upsampling is copy-only and counts 0. Attention
        blocks add their convolutions plus 2 (cross-slice: multiply + add)
        or 3 (gate: two adds + multiply) elementwise FLOPs per element.
        """
        cfg = self.config
        h, w = input_size if input_size is not None else cfg.input_size

        def conv_cost(layer: Conv2dLayer, h, w):
            co, ci, kh, kw = layer.kernel.weights.shape
            ho, wo = ops.conv2d_output_shape(h, w, layer.kernel)
            cost = 2 * kh * kw * ci * co * ho * wo
            if layer.kernel.bias is not None:
                cost += co * ho * wo
            return cost, ho, wo, co

        def block_cost(blk: ConvBnRelu, h, w):
            cost, ho, wo, co = conv_cost(blk.conv, h, w)
            n = co * ho * wo
            return cost + 4 * n + n, ho, wo  # + batchnorm + relu

        def csa_cost(csa: CrossSliceAttention, c, h, w):
            cost, _, _, _ = conv_cost(csa.proj, h, w)
            return cost + 6 * c * h * w  # softmax (4) + multiply + residual add

        def gate_cost(gate: AttentionGate, c, h, w):
            cost_t, _, _, _ = conv_cost(gate.theta, h, w)
            cost_p, _, _, _ = conv_cost(gate.phi, h, w)
            return cost_t + cost_p + 7 * c * h * w  # two adds + sigmoid (4) + multiply

        total = 0
        if self.input_csa is not None:
            total += csa_cost(self.input_csa, cfg.in_slices, h, w)
        skip_dims = []
        for stage in self.encoder:
            for blk in stage.blocks:
                cost, h, w = block_cost(blk, h, w)
                total += cost
            c = stage.blocks[-1].conv.kernel.weights.shape[0]
            skip_dims.append((c, h, w))
            total += 3 * c * (h // 2) * (w // 2)  # max pooling
            h, w = h // 2, w // 2
        for blk in self.bottleneck:
            cost, h, w = block_cost(blk, h, w)
            total += cost
        for i in reversed(range(cfg.depth)):
            dec = self.decoder[i]
            c_skip, hs, ws = skip_dims[i]
            h, w = hs, ws  # after 2x upsampling (copy only)
            if dec.csa is not None:
                total += csa_cost(dec.csa, c_skip, h, w)
            if dec.gate is not None:
                total += gate_cost(dec.gate, c_skip, h, w)
            for blk in dec.blocks:
                cost, h, w = block_cost(blk, h, w)
                total += cost
        cost, h, w, co = conv_cost(self.final, h, w)
        total += cost + 4 * co * h * w  # final sigmoid
        return total

    def _conv_blocks(self):
        blocks = [b for st in self.encoder for b in st.blocks]
        blocks += self.bottleneck
        blocks += [b for dec in self.decoder for b in dec.blocks]
        return blocks

    def relu_margins(self) -> float:
        """Smallest |pre-activation| cached at any ReLU (gradcheck guard)."""
        return min(b.relu_input_margin() for b in self._conv_blocks())

    def decision_signature(self) -> tuple[np.ndarray, ...]:
        """Sign/argmax pattern of every piecewise decision in the cached
        forward (ReLU signs and pooling argmaxes). Finite differencing is
        only valid while this signature is unchanged."""
        sigs = [b._pre_relu > 0 for b in self._conv_blocks()]
        sigs += [st.pool_idx for st in self.encoder]
        return tuple(sigs)

    def pool_margins(self) -> float:
        """Smallest gap between the top two values of any pooling window."""
        margin = np.inf
        for stage in self.encoder:
            s = stage.skip
            b, c, h, w = s.shape
            win = s.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
                b, c, h // 2, w // 2, 4
            )
            top2 = np.sort(win, axis=-1)[..., -2:]
            margin = min(margin, float((top2[..., 1] - top2[..., 0]).min()))
        return margin

    # ------------------------------------------------------------- persistence

    def save(self, path) -> None:
        save_checkpoint(path, self.params)

    def load(self, path) -> None:
        load_checkpoint(path, self.params)


def build_network(config: NetworkConfig, dtype=DEFAULT_DTYPE) -> CrossSliceUNet:
    return CrossSliceUNet(config, dtype)


def attention_param_counts(config: NetworkConfig) -> dict[str, int]:
    """Analytic parameter sizes of the attention additions for a config.

    Cross-slice attention on a C-channel site costs C*C + C (1x1 projection
    with bias); a gate on a C-channel skip fed by a 2C-channel decoder
    feature costs C*C (theta) + 2C*C (phi) + C (shared bias).
    """
    chans = config.encoder_channels()
    input_csa = config.in_slices * config.in_slices + config.in_slices
    skip_csa = sum(c * c + c for c in chans)
    skip_ag = sum(c * c + (2 * c) * c + c for c in chans)
    return {
        "input_csa": input_csa,
        "skip_csa": skip_csa,
        "skip_ag": skip_ag,
        "total": input_csa + skip_csa + skip_ag,
    }
