"""Command-line driver: gen, train, eval, ablate, gradcheck and cost.

Every run prints its fully resolved configuration before doing any work;
values come from built-in defaults, then an optional key=value config file,
then explicit flags (flags win). Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import os

# Cap worker threads before numpy loads its BLAS; single-threaded by
# default so results are reproducible on any machine.
_threads = os.environ.get("XSEG_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import figures, gradcheck
from .dataset import SplitSpec, build_splits, load_dataset
from .errors import XsegError
from .metrics import EvalReport
from .network import CrossSliceUNet, NetworkConfig, attention_param_counts
from .phantom import REGION_ORDER, REGION_PROPORTIONS, generate_phantom, volume_seed
from .training import (
    TrainConfig,
    evaluate,
    run_ablation_grid,
    train,
    write_ablation_csv,
)

# Published cost figures of the original full-scale model, printed for
# comparison only; they are not a match target for this implementation.
REFERENCE_PARAM_COUNT = 23_138_641
REFERENCE_FLOPS = 89_465_067_776


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from exc


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_seeds(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _parse_proportions(text: str) -> tuple[float, ...]:
    parts = tuple(float(p) for p in text.split(","))
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("expected four comma-separated proportions")
    return parts


# Option tables: (key, parser, default, help). argparse gets default=None so
# explicit flags can be told apart from defaults during resolution.
NETWORK_OPTIONS = [
    ("size", _parse_size, (256, 256), "network input size as HxW (divisible by 2^depth)"),
    ("in_slices", int, 3, "adjacent slices stacked as input channels"),
    ("base_filters", int, 64, "filters of the first encoder stage"),
    ("depth", int, 4, "number of encoder/decoder stages"),
    ("convs_per_stage", int, 2, "conv-bn-relu units per stage"),
    ("input_csa", _parse_bool, True, "cross-slice attention on the input stack"),
    ("skip_csa", _parse_bool, True, "cross-slice attention in skip connections"),
    ("skip_ag", _parse_bool, True, "attention gates in skip connections"),
    ("bn_before_relu", _parse_bool, True, "normalize before the activation inside conv units"),
    ("seed", int, 0, "seed for parameter init, shuffling and phantom data"),
]

TRAIN_OPTIONS = [
    ("epochs", int, 100, "training epochs"),
    ("lr", float, 1e-4, "Adam learning rate"),
    ("batch_size", int, 4, "mini-batch size"),
    ("dice_weight", float, 0.9, "combined-loss weight of the dice term"),
    ("boundary_weight", float, 0.1, "combined-loss weight of the boundary term"),
]

SPLIT_OPTIONS = [
    ("val_volumes", int, 1, "volumes held out for validation"),
    ("test_volumes", int, 1, "volumes held out for testing"),
    ("shaft_cap", float, 0.4, "max shaft proportion kept in the training set"),
]

DESK_DEFAULTS = {
    "size": (64, 64),
    "base_filters": 4,
    "depth": 2,
    "epochs": 15,
}


def _add_options(parser: argparse.ArgumentParser, options) -> None:
    for key, parse, default, help_text in options:
        flag = "--" + key.replace("_", "-")
        if parse is _parse_bool:
            parser.add_argument(
                flag, dest=key, default=None, action=argparse.BooleanOptionalAction, help=help_text
            )
        else:
            parser.add_argument(flag, dest=key, type=parse, default=None, help=help_text)


def _read_config_file(path: str) -> dict[str, str]:
    values = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise XsegError(f"{path}:{line_no}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def _resolve(args: argparse.Namespace, options, desk_scale: bool = False) -> dict:
    file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, parse, default, _ in options:
        if desk_scale and key in DESK_DEFAULTS:
            default = DESK_DEFAULTS[key]
        value = default
        if key in file_values:
            raw = file_values[key]
            value = _parse_size(raw) if parse is _parse_size else parse(raw)
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            value = flag_value
        resolved[key] = value
    return resolved


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _print_header(command: str, resolved: dict, extra: dict | None = None) -> str:
    lines = [f"# xseg {command} configuration"]
    merged = dict(resolved)
    if extra:
        merged.update(extra)
    for key, value in merged.items():
        lines.append(f"{key} = {_format_value(value)}")
    text = "\n".join(lines)
    print(text)
    return text


def _network_config(resolved: dict) -> NetworkConfig:
    return NetworkConfig(
        input_size=resolved["size"],
        in_slices=resolved["in_slices"],
        base_filters=resolved["base_filters"],
        depth=resolved["depth"],
        use_input_csa=resolved["input_csa"],
        use_skip_csa=resolved["skip_csa"],
        use_skip_ag=resolved["skip_ag"],
        convs_per_stage=resolved["convs_per_stage"],
        bn_before_relu=resolved["bn_before_relu"],
        seed=resolved["seed"],
    )


def _train_config(resolved: dict, desk_scale: bool) -> TrainConfig:
    return TrainConfig(
        epochs=resolved["epochs"],
        learning_rate=resolved["lr"],
        batch_size=resolved["batch_size"],
        dice_weight=resolved["dice_weight"],
        boundary_weight=resolved["boundary_weight"],
        seed=resolved["seed"],
        desk_scale=desk_scale,
    )


def _load_splits(data_dir: str, resolved: dict) -> "DataSplits":
    volumes = load_dataset(data_dir)
    spec = SplitSpec(
        n_train=len(volumes) - resolved["val_volumes"] - resolved["test_volumes"],
        n_val=resolved["val_volumes"],
        n_test=resolved["test_volumes"],
        network_size=resolved["size"],
        shaft_cap=resolved["shaft_cap"],
        seed=resolved["seed"],
    )
    return build_splits(volumes, spec)


# ------------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    options = [
        ("volumes", int, 10, "number of phantom volumes"),
        ("slices", int, 40, "slices per volume"),
        ("raw_size", _parse_size, (90, 40), "raw slice size as HxW"),
        ("proportions", _parse_proportions, REGION_PROPORTIONS, "above,proximal,shaft,distal fractions"),
        ("seed", int, 0, "dataset master seed"),
    ]
    resolved = _resolve(args, options)
    _print_header("gen", resolved, {"out": args.out})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .dataset import save_volume

    counts = {region: 0 for region in REGION_ORDER}
    for i in range(resolved["volumes"]):
        volume = generate_phantom(
            volume_seed(resolved["seed"], i),
            n_slices=resolved["slices"],
            raw_size=resolved["raw_size"],
            proportions=resolved["proportions"],
            volume_id=f"vol{i:03d}",
        )
        save_volume(volume, out)
        for tag in volume.regions:
            counts[tag] += 1
    total = sum(counts.values())
    print(f"wrote {resolved['volumes']} volumes ({total} slices) to {out}")
    for region in REGION_ORDER:
        print(f"  {region:<16} {counts[region]}")
    return 0


def cmd_train(args) -> int:
    options = NETWORK_OPTIONS + TRAIN_OPTIONS + SPLIT_OPTIONS
    resolved = _resolve(args, options, desk_scale=args.desk_scale)
    header = _print_header("train", resolved, {"data": args.data, "out": args.out})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(
        "\n".join(f"{k} = {_format_value(v)}" for k, v in resolved.items()) + "\n"
    )
    splits = _load_splits(args.data, resolved)
    network = CrossSliceUNet(_network_config(resolved))
    config = _train_config(resolved, args.desk_scale)

    def progress(stats):
        print(
            f"epoch {stats.epoch:3d}  train {stats.train_loss:.4f}"
            f"  val {stats.val_loss:.4f}  dice {stats.val_dice:.4f}"
        )

    started = time.time()
    log = train(network, splits, config, out_dir=out, progress=progress)
    log.write_csv(out / "runlog.csv")
    figures.save_training_curves(log, out / "training_curves.png")
    print(
        f"best epoch {log.best_epoch} (val loss {log.best_val_loss:.6f});"
        f" finished in {time.time() - started:.1f}s"
    )
    print(f"checkpoint: {log.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    options = NETWORK_OPTIONS + SPLIT_OPTIONS + [("batch_size", int, 4, "forward batch size")]
    resolved = _resolve(args, options)
    _print_header("eval", resolved, {"data": args.data, "ckpt": args.ckpt, "out": args.out})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = _load_splits(args.data, resolved)
    network = CrossSliceUNet(_network_config(resolved))
    network.load(args.ckpt)
    report, predictions = evaluate(
        network, splits.tests, batch_size=resolved["batch_size"], return_predictions=True
    )
    report.write_csv(out / "eval.csv")
    figures.save_region_summary(report, out / "metrics_by_region.png")
    print(report.summary_table())
    if args.dump_masks:
        mask_dir = out / "masks"
        mask_dir.mkdir(exist_ok=True)
        from .metrics import binarize

        for triplet, pred in zip(splits.tests["full"], predictions):
            name = triplet.slice_id.replace("/", "_") + ".png"
            figures.save_mask_overlay(
                triplet.stack[0, 1],
                triplet.target[0, 0],
                binarize(pred[0, 0]),
                mask_dir / name,
            )
        print(f"wrote {len(predictions)} overlay masks to {mask_dir}")
    return 0


def cmd_ablate(args) -> int:
    options = NETWORK_OPTIONS + TRAIN_OPTIONS + SPLIT_OPTIONS
    resolved = _resolve(args, options, desk_scale=args.desk_scale)
    seeds = args.seeds if args.seeds is not None else [resolved["seed"]]
    _print_header("ablate", resolved, {"data": args.data, "out": args.out, "seeds": ",".join(map(str, seeds))})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = _load_splits(args.data, resolved)
    base = _network_config(resolved)
    config = _train_config(resolved, args.desk_scale)

    def progress(flags, seed, dsc):
        on = ",".join(name for name, f in zip(("input", "csa", "ag"), flags) if f) or "none"
        print(f"trained [{on}] seed {seed}: dsc {dsc:.4f}")

    rows = run_ablation_grid(base, splits, config, seeds=seeds, progress=progress)
    write_ablation_csv(rows, out / "ablation.csv")
    figures.save_ablation_chart(rows, out / "ablation_dsc.png")
    print(f"{'input_csa':>9} {'skip_csa':>8} {'skip_ag':>7} {'dsc':>8} {'iou':>8}")
    for r in rows:
        print(
            f"{int(r.input_csa):>9} {int(r.skip_csa):>8} {int(r.skip_ag):>7}"
            f" {r.dsc:>8.4f} {r.iou:>8.4f}"
        )
    return 0


def cmd_gradcheck(args) -> int:
    options = [
        ("size", _parse_size, (32, 32), "network input size for the full-network check"),
        ("base_filters", int, 4, "base filters for the full-network check"),
        ("depth", int, 2, "depth for the full-network check"),
        ("seed", int, 0, "seed for all random instances"),
    ]
    resolved = _resolve(args, options)
    _print_header("gradcheck", resolved)
    config = NetworkConfig(
        input_size=resolved["size"],
        base_filters=resolved["base_filters"],
        depth=resolved["depth"],
    )
    started = time.time()
    results = gradcheck.run_all(config, seed=resolved["seed"])
    failures = 0
    print(f"{'component':<40} {'max rel err':>12} {'tolerance':>10} {'status':>7}")
    for r in results:
        status = "ok" if r.passed else "FAIL"
        failures += not r.passed
        print(f"{r.name:<40} {r.max_rel_err:>12.3e} {r.tolerance:>10.0e} {status:>7}")
    print(f"{len(results)} checks, {failures} failures, {time.time() - started:.1f}s")
    return 1 if failures else 0


def cmd_cost(args) -> int:
    options = NETWORK_OPTIONS
    resolved = _resolve(args, options)
    _print_header("cost", resolved)
    config = _network_config(resolved)
    network = CrossSliceUNet(config)
    params = network.count_params()
    flops = network.count_flops()
    extras = attention_param_counts(config)
    print(f"parameters: {params:,}")
    print(f"forward FLOPs at {resolved['size'][0]}x{resolved['size'][1]}: {flops:,}")
    print(
        "attention parameter sizes: input_csa"
        f" {extras['input_csa']:,} / skip_csa {extras['skip_csa']:,} / skip_ag {extras['skip_ag']:,}"
        f" (total {extras['total']:,})"
    )
    print(
        f"published full-scale reference: {REFERENCE_PARAM_COUNT:,} parameters,"
        f" {REFERENCE_FLOPS:,} FLOPs (for comparison, not a match target)"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a phantom dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="key=value config file (flags win)")
    p.add_argument("--volumes", type=int, default=None)
    p.add_argument("--slices", type=int, default=None)
    p.add_argument("--raw-size", dest="raw_size", type=_parse_size, default=None)
    p.add_argument("--proportions", type=_parse_proportions, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a network on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key=value config file (flags win)")
    p.add_argument("--desk-scale", action="store_true", help="small-network, short-run defaults")
    _add_options(p, NETWORK_OPTIONS + TRAIN_OPTIONS + SPLIT_OPTIONS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test volumes")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value config file (flags win)")
    p.add_argument("--dump-masks", action="store_true", help="write overlay PNGs per test slice")
    _add_options(p, NETWORK_OPTIONS + SPLIT_OPTIONS + [("batch_size", int, 4, "forward batch size")])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate all attention-flag combinations")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value config file (flags win)")
    p.add_argument("--desk-scale", action="store_true")
    p.add_argument("--seeds", type=_parse_seeds, default=None, help="comma-separated seeds to average")
    _add_options(p, NETWORK_OPTIONS + TRAIN_OPTIONS + SPLIT_OPTIONS)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward")
    p.add_argument("--config", help="key=value config file (flags win)")
    p.add_argument("--size", type=_parse_size, default=None)
    p.add_argument("--base-filters", dest="base_filters", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("cost", help="report parameter count and FLOPs")
    p.add_argument("--config", help="key=value config file (flags win)")
    _add_options(p, NETWORK_OPTIONS)
    p.set_defaults(func=cmd_cost)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except XsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
