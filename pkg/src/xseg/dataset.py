"""Dataset plumbing: PNG volume I/O, resizing, 2.5D triplet stacking, and
volume-level train/val/test splits with shaft rebalancing.

On-disk layout per volume: <root>/<volume_id>/images/NNNN.png,
<root>/<volume_id>/masks/NNNN.png (both 8-bit grayscale, no alpha) and
<root>/<volume_id>/regions.txt with one region tag per line, index-aligned
with the slice files."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .phantom import REGION_ORDER, PhantomVolume


def save_volume(volume: PhantomVolume, root) -> Path:
    base = Path(root) / volume.volume_id
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(volume.n_slices):
        img = np.round(volume.images[i] * 255.0).astype(np.uint8)
        Image.fromarray(img, mode="L").save(base / "images" / f"{i:04d}.png")
        Image.fromarray(volume.masks[i] * 255, mode="L").save(base / "masks" / f"{i:04d}.png")
    (base / "regions.txt").write_text("\n".join(volume.regions) + "\n")
    return base


def _load_gray(path: Path, slice_index: int) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing file for slice {slice_index}: {path}")
    with Image.open(path) as im:
        if im.mode != "L":
            raise DataError(f"slice {slice_index}: {path} is not 8-bit grayscale (mode {im.mode})")
        return np.asarray(im)


def load_slice_dir(path) -> PhantomVolume:
    """Load a saved volume. Images are scaled to [0, 1] by /255; masks are
    binarized at pixel value > 127."""
    base = Path(path)
    regions_file = base / "regions.txt"
    if not regions_file.exists():
        raise DataError(f"missing regions manifest: {regions_file}")
    regions = [line.strip() for line in regions_file.read_text().splitlines() if line.strip()]
    unknown = set(regions) - set(REGION_ORDER)
    if unknown:
        raise DataError(f"{regions_file}: unknown region tags {sorted(unknown)}")
    images = []
    masks = []
    for i in range(len(regions)):
        img = _load_gray(base / "images" / f"{i:04d}.png", i)
        mask = _load_gray(base / "masks" / f"{i:04d}.png", i)
        if img.shape != mask.shape:
            raise DataError(f"slice {i}: image shape {img.shape} vs mask shape {mask.shape}")
        images.append(img.astype(np.float32) / 255.0)
        masks.append((mask > 127).astype(np.uint8))
    return PhantomVolume(base.name, np.stack(images), np.stack(masks), regions)


def load_dataset(root) -> list[PhantomVolume]:
    base = Path(root)
    if not base.is_dir():
        raise DataError(f"dataset directory does not exist: {base}")
    volume_dirs = sorted(p for p in base.iterdir() if p.is_dir())
    if not volume_dirs:
        raise DataError(f"no volume directories under {base}")
    return [load_slice_dir(p) for p in volume_dirs]


def resize(image: np.ndarray, target: tuple[int, int], kind: str) -> np.ndarray:
    """Resize a 2D array: bilinear for images, nearest-neighbor for masks
    (which preserves binarity exactly). Resizing to the same size is the
    identity."""
    th, tw = target
    if th < 1 or tw < 1:
        raise ConfigError(f"resize target must be positive, got {target}")
    h, w = image.shape
    if kind == "mask":
        rows = np.minimum((((np.arange(th) + 0.5) * h / th)).astype(np.int64), h - 1)
        cols = np.minimum((((np.arange(tw) + 0.5) * w / tw)).astype(np.int64), w - 1)
        return image[np.ix_(rows, cols)]
    if kind != "image":
        raise ConfigError(f"kind must be 'image' or 'mask', got {kind!r}")
    fr = np.clip((np.arange(th) + 0.5) * h / th - 0.5, 0, h - 1)
    fc = np.clip((np.arange(tw) + 0.5) * w / tw - 0.5, 0, w - 1)
    r0 = np.floor(fr).astype(np.int64)
    c0 = np.floor(fc).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    wr = (fr - r0)[:, None]
    wc = (fc - c0)[None, :]
    top = image[np.ix_(r0, c0)] * (1 - wc) + image[np.ix_(r0, c1)] * wc
    bottom = image[np.ix_(r1, c0)] * (1 - wc) + image[np.ix_(r1, c1)] * wc
    return top * (1 - wr) + bottom * wr


@dataclass
class SliceTriplet:
    """One training sample: three adjacent slices stacked as channels with
    the center slice's mask as the target."""

    stack: np.ndarray  # (1, 3, H, W)
    target: np.ndarray  # (1, 1, H, W)
    slice_id: str
    region: str


def make_triplets(volume: PhantomVolume, network_size: tuple[int, int], dtype=np.float32) -> list[SliceTriplet]:
    """One triplet per slice; the first and last replicate their edge slice
    so every stack has exactly three channels."""
    n = volume.n_slices
    images = [resize(volume.images[i], network_size, "image").astype(dtype) for i in range(n)]
    masks = [resize(volume.masks[i], network_size, "mask").astype(dtype) for i in range(n)]
    triplets = []
    for i in range(n):
        lo, hi = max(i - 1, 0), min(i + 1, n - 1)
        stack = np.stack([images[lo], images[i], images[hi]])[None]
        target = masks[i][None, None]
        triplets.append(SliceTriplet(stack, target, f"{volume.volume_id}/{i:04d}", volume.regions[i]))
    return triplets


@dataclass
class SplitSpec:
    n_train: int = 8
    n_val: int = 1
    n_test: int = 1
    network_size: tuple[int, int] = (64, 64)
    shaft_cap: float = 0.4
    seed: int = 0


@dataclass
class DataSplits:
    train: list[SliceTriplet]
    val: list[SliceTriplet]
    tests: dict[str, list[SliceTriplet]] = field(default_factory=dict)


def build_splits(volumes: list[PhantomVolume], spec: SplitSpec) -> DataSplits:
    """Volume-level partition into train/val/test plus regional test sets.

    Volumes are consumed in order: the first n_train train, the next n_val
    validate, the next n_test test, so no volume leaks across splits. If
    the training set's shaft proportion exceeds shaft_cap, shaft slices are
    randomly dropped (under spec.seed) down to the cap."""
    needed = spec.n_train + spec.n_val + spec.n_test
    if len(volumes) < 3:
        raise ConfigError(f"need at least 3 volumes for disjoint splits, got {len(volumes)}")
    if min(spec.n_train, spec.n_val, spec.n_test) < 1:
        raise ConfigError("n_train, n_val and n_test must each be >= 1")
    if len(volumes) < needed:
        raise ConfigError(f"split needs {needed} volumes, dataset has {len(volumes)}")

    train_vols = volumes[: spec.n_train]
    val_vols = volumes[spec.n_train : spec.n_train + spec.n_val]
    test_vols = volumes[spec.n_train + spec.n_val : needed]

    train = [t for v in train_vols for t in make_triplets(v, spec.network_size)]
    val = [t for v in val_vols for t in make_triplets(v, spec.network_size)]
    test_full = [t for v in test_vols for t in make_triplets(v, spec.network_size)]

    shaft_idx = [i for i, t in enumerate(train) if t.region == "shaft"]
    n_other = len(train) - len(shaft_idx)
    if 0 < spec.shaft_cap < 1 and len(shaft_idx) > 0:
        max_keep = int(np.floor(spec.shaft_cap * n_other / (1.0 - spec.shaft_cap)))
        if len(shaft_idx) > max_keep:
            rng = np.random.default_rng(spec.seed)
            drop = rng.choice(len(shaft_idx), size=len(shaft_idx) - max_keep, replace=False)
            dropped = {shaft_idx[j] for j in drop}
            train = [t for i, t in enumerate(train) if i not in dropped]

    tests = {"full": test_full}
    for region in ("proximal", "shaft", "distal"):
        tests[region] = [t for t in test_full if t.region == region]
    return DataSplits(train, val, tests)
