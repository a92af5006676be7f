"""Training and evaluation harness: Adam with bias correction, the epoch
loop with best-validation checkpointing, the metric evaluation driver, and
the 8-row ablation grid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import DataSplits, SliceTriplet
from .errors import ConfigError, StateError, TrainingAbort
from .losses import combined_loss_grad, dice_score
from .metrics import EvalReport, MetricRecord, binarize, hd95, iou_score
from .network import CrossSliceUNet, NetworkConfig
from .params import ParamStore


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dice_weight: float = 0.9
    boundary_weight: float = 0.1
    seed: int = 0
    desk_scale: bool = False

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if min(self.learning_rate, self.adam_eps) <= 0:
            raise ConfigError("learning_rate and adam_eps must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset: short runs sized for a single CPU core."""
        cfg = cls(epochs=15, desk_scale=True)
        return replace(cfg, **overrides)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float


@dataclass
class RunLog:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    checkpoint_path: str | None = None

    def write_csv(self, path) -> None:
        lines = ["epoch,train_loss,val_loss,val_dice"]
        for e in self.epochs:
            lines.append(f"{e.epoch},{e.train_loss!r},{e.val_loss!r},{e.val_dice!r}")
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def adam_step(
    params: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
) -> None:
    """Bias-corrected Adam update applied in place to every parameter; the
    gradient buffers are zeroed afterwards."""
    if t < 1:
        raise StateError("adam_step needs t >= 1 (bias correction divides by 1 - beta^t)")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params.params():
        g = p.grad
        if p.m is None:
            p.m = np.zeros_like(p.value)
            p.v = np.zeros_like(p.value)
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        m_hat = p.m / c1
        v_hat = p.v / c2
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad[...] = 0


def _batches(items: list, size: int):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def _stack_batch(triplets: list[SliceTriplet], dtype):
    x = np.concatenate([t.stack for t in triplets]).astype(dtype, copy=False)
    y = np.concatenate([t.target for t in triplets]).astype(dtype, copy=False)
    return x, y


def validation_pass(network: CrossSliceUNet, val: list[SliceTriplet], config: TrainConfig):
    """Per-slice combined loss and binarized dice, averaged over the set.

    Slices are forwarded in batches for speed; eval mode is per-sample
    independent so batching does not change the numbers."""
    losses = []
    dices = []
    for batch in _batches(val, config.batch_size):
        x, y = _stack_batch(batch, network.dtype)
        pred = network.forward(x, train=False)
        for i, t in enumerate(batch):
            loss, _ = combined_loss_grad(
                y[i : i + 1], pred[i : i + 1], config.dice_weight, config.boundary_weight
            )
            losses.append(loss)
            dices.append(dice_score(t.target[0, 0], binarize(pred[i, 0]).astype(np.float64)))
    return float(np.mean(losses)), float(np.mean(dices))


def train(
    network: CrossSliceUNet,
    splits: DataSplits,
    config: TrainConfig,
    out_dir=None,
    progress=None,
) -> RunLog:
    """Full training loop.

    Per epoch: shuffle the training triplets under the run seed, train on
    batches (the final partial batch included), then run a validation pass
    in eval mode. Whenever the validation loss strictly improves, the
    parameter state is snapshotted (and written to <out_dir>/best.ckpt when
    out_dir is given). The best state is restored into the network before
    returning, so the returned model is the one selected by validation."""
    config.validate()
    if not splits.train or not splits.val:
        raise ConfigError("training requires non-empty train and val sets")
    rng = np.random.default_rng(config.seed)
    log = RunLog()
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "best.ckpt"
    best_snapshot = None
    t = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(splits.train))
        batch_losses = []
        for batch_ids in _batches(list(order), config.batch_size):
            batch = [splits.train[i] for i in batch_ids]
            x, y = _stack_batch(batch, network.dtype)
            pred = network.forward(x, train=True)
            loss, grad = combined_loss_grad(y, pred, config.dice_weight, config.boundary_weight)
            if not math.isfinite(loss):
                raise TrainingAbort(
                    f"non-finite loss {loss} at epoch {epoch}, batch {len(batch_losses)}"
                )
            network.backward(grad)
            t += 1
            adam_step(network.params, config.learning_rate, config.beta1, config.beta2, config.adam_eps, t)
            batch_losses.append(loss)
        train_loss = float(np.mean(batch_losses))
        val_loss, val_dice = validation_pass(network, splits.val, config)
        if not math.isfinite(val_loss):
            raise TrainingAbort(f"non-finite validation loss at epoch {epoch}")
        log.epochs.append(EpochStats(epoch, train_loss, val_loss, val_dice))
        if val_loss < log.best_val_loss:
            log.best_val_loss = val_loss
            log.best_epoch = epoch
            best_snapshot = network.params.snapshot()
            if ckpt_path is not None:
                network.save(ckpt_path)
        if progress is not None:
            progress(log.epochs[-1])
    if best_snapshot is not None:
        network.params.restore(best_snapshot)
    log.checkpoint_path = str(ckpt_path) if ckpt_path is not None else None
    return log


def evaluate(
    network,
    test_sets: dict[str, list[SliceTriplet]],
    threshold: float = 0.5,
    batch_size: int = 4,
    predict_fn=None,
    return_predictions: bool = False,
):
    """Per-slice forward + binarize + DSC/IoU/HD95 over the full-scan set,
    with regional summaries recovered from the slice tags.

    predict_fn is a test hook: a callable mapping a SliceTriplet to a
    (1, 1, H, W) probability map, bypassing the network."""
    full = test_sets.get("full")
    if not full:
        raise ConfigError("evaluate needs a non-empty 'full' test set")
    records = []
    predictions = []
    if predict_fn is not None:
        predictions = [predict_fn(t) for t in full]
    else:
        for batch in _batches(full, batch_size):
            x, _ = _stack_batch(batch, network.dtype)
            pred = network.forward(x, train=False)
            predictions.extend(pred[i : i + 1] for i in range(len(batch)))
    for t, pred in zip(full, predictions):
        pred_mask = binarize(pred[0, 0], threshold)
        true_mask = t.target[0, 0].astype(np.uint8)
        records.append(
            MetricRecord(
                slice_id=t.slice_id,
                region=t.region,
                dice=dice_score(true_mask.astype(np.float64), pred_mask.astype(np.float64)),
                iou=iou_score(true_mask, pred_mask),
                hd95=hd95(true_mask, pred_mask),
            )
        )
    report = EvalReport.from_records(records)
    if return_predictions:
        return report, predictions
    return report


# Ablation rows in display order: no attention first, single sites, pairs,
# then the full configuration last.
ABLATION_ORDER = [
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
]


@dataclass
class AblationRow:
    input_csa: bool
    skip_csa: bool
    skip_ag: bool
    dsc: float
    iou: float
    per_seed_dsc: list[float] = field(default_factory=list)


def run_ablation_grid(
    base_network: NetworkConfig,
    splits: DataSplits,
    train_config: TrainConfig,
    seeds: list[int] | None = None,
    progress=None,
) -> list[AblationRow]:
    """Train every attention-flag combination on identical data and seeds;
    each row reports the mean full-scan DSC/IoU across the seeds."""
    seeds = list(seeds) if seeds else [train_config.seed]
    rows = []
    for flags in ABLATION_ORDER:
        dscs = []
        ious = []
        for seed in seeds:
            net_cfg = replace(base_network.with_flags(*flags), seed=seed)
            run_cfg = replace(train_config, seed=seed)
            network = CrossSliceUNet(net_cfg)
            train(network, splits, run_cfg)
            report = evaluate(network, splits.tests, batch_size=run_cfg.batch_size)
            dscs.append(report.summaries["full"].mean_dice)
            ious.append(report.summaries["full"].mean_iou)
            if progress is not None:
                progress(flags, seed, dscs[-1])
        rows.append(AblationRow(*flags, float(np.mean(dscs)), float(np.mean(ious)), dscs))
    return rows


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    lines = ["input_csa,skip_csa,skip_ag,dsc,iou"]
    for r in rows:
        lines.append(
            f"{int(r.input_csa)},{int(r.skip_csa)},{int(r.skip_ag)},{r.dsc!r},{r.iou!r}"
        )
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
