"""Evaluation metrics on binary masks (DSC, IoU, HD95), per-slice records,
and their aggregation with the nanmean convention for undefined boundary
distances."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .losses import dice_score

REGIONS = ("above-structure", "proximal", "shaft", "distal")


def binarize(y_pred: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Strictly-greater thresholding to {0, 1}; a value of exactly 0.5 maps
    to 0 under the default threshold."""
    return (np.asarray(y_pred) > threshold).astype(np.uint8)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")


def iou_score(a: np.ndarray, b: np.ndarray) -> float:
    """|a AND b| / |a OR b|; defined as 1.0 when both masks are empty, which
    matches the smoothed Dice convention on empty-empty pairs."""
    _check_pair(a, b)
    a = a.astype(bool)
    b = b.astype(bool)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return inter / union


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (row, col) of boundary pixels.

    A boundary pixel is set in the mask and has at least one of its four
    neighbors unset, with positions outside the image treated as unset, so
    set pixels on the image border always qualify.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise DimensionError(f"mask must be 2D, got shape {m.shape}")
    if not m.any():
        return np.empty((0, 2), dtype=np.int64)
    p = np.pad(m, 1)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return np.argwhere(m & ~interior)


def interpolated_percentile(values: np.ndarray, q: float) -> float:
    """Percentile by linear interpolation between order statistics:
    rank = (n - 1) * q / 100, result = v[floor] + frac * (v[ceil] - v[floor])."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("percentile of an empty set")
    rank = (v.size - 1) * (q / 100.0)
    lo = int(math.floor(rank))
    hi = min(lo + 1, v.size - 1)
    frac = rank - lo
    return float(v[lo] + (v[hi] - v[lo]) * frac)


def _min_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Euclidean distance from each src pixel to its nearest dst pixel."""
    out = np.empty(len(src), dtype=np.float64)
    # Block over src to bound the pairwise matrix size.
    block = max(1, 4_000_000 // max(1, len(dst)))
    for start in range(0, len(src), block):
        chunk = src[start : start + block]
        d2 = ((chunk[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
        out[start : start + len(chunk)] = np.sqrt(d2.min(axis=1))
    return out


def hd95(a: np.ndarray, b: np.ndarray) -> float:
    """95th percentile of boundary-to-boundary minimum distances.

    Both directed distance sets (a's boundary to b's nearest, and b's to
    a's) are pooled before taking the percentile, so the measure is
    symmetric. Distances are Euclidean in pixel units. If either mask has
    no boundary pixels (i.e. is empty) the result is NaN, to be dropped by
    the nanmean aggregation.
    """
    _check_pair(np.asarray(a), np.asarray(b))
    pa = boundary_pixels(a)
    pb = boundary_pixels(b)
    if len(pa) == 0 or len(pb) == 0:
        return float("nan")
    pooled = np.concatenate([_min_distances(pa, pb), _min_distances(pb, pa)])
    return interpolated_percentile(pooled, 95.0)


@dataclass
class MetricRecord:
    slice_id: str
    region: str
    dice: float
    iou: float
    hd95: float


@dataclass
class MetricSummary:
    region: str
    n_slices: int
    mean_dice: float
    mean_iou: float
    hd95_nanmean: float
    hd95_dropped: int


def aggregate(records: list[MetricRecord], region: str | None = None) -> MetricSummary:
    """Mean dice/iou and nanmean hd95 over the records, optionally filtered
    to one region tag. NaN hd95 entries are dropped and counted; if every
    entry is NaN the summary reports NaN with the full drop count."""
    if region is None or region == "full":
        chosen = list(records)
        label = "full"
    else:
        chosen = [r for r in records if r.region == region]
        label = region
    if not chosen:
        raise ValueError(f"no records to aggregate for region {region!r}")
    dices = np.array([r.dice for r in chosen], dtype=np.float64)
    ious = np.array([r.iou for r in chosen], dtype=np.float64)
    hds = np.array([r.hd95 for r in chosen], dtype=np.float64)
    finite = hds[~np.isnan(hds)]
    dropped = int(np.isnan(hds).sum())
    hd_mean = float(finite.mean()) if finite.size else float("nan")
    return MetricSummary(label, len(chosen), float(dices.mean()), float(ious.mean()), hd_mean, dropped)


@dataclass
class EvalReport:
    """Per-slice metric records plus the full-scan and regional summaries."""

    records: list[MetricRecord]
    summaries: dict[str, MetricSummary]

    SUMMARY_REGIONS = ("full", "proximal", "shaft", "distal")

    @classmethod
    def from_records(cls, records: list[MetricRecord]) -> "EvalReport":
        summaries = {"full": aggregate(records)}
        for region in ("proximal", "shaft", "distal"):
            if any(r.region == region for r in records):
                summaries[region] = aggregate(records, region)
        return cls(records, summaries)

    def write_csv(self, path) -> None:
        """Column order contract: slice_id, region, dice, iou, hd95 for the
        per-slice rows; after a '# summary' marker: region, n_slices,
        mean_dice, mean_iou, hd95_nanmean, hd95_dropped. NaN is spelled
        'nan'."""
        lines = ["slice_id,region,dice,iou,hd95"]
        for r in self.records:
            lines.append(f"{r.slice_id},{r.region},{r.dice!r},{r.iou!r},{r.hd95!r}")
        lines.append("# summary")
        lines.append("region,n_slices,mean_dice,mean_iou,hd95_nanmean,hd95_dropped")
        for region in self.SUMMARY_REGIONS:
            if region in self.summaries:
                s = self.summaries[region]
                lines.append(
                    f"{s.region},{s.n_slices},{s.mean_dice!r},{s.mean_iou!r},"
                    f"{s.hd95_nanmean!r},{s.hd95_dropped}"
                )
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")

    def summary_table(self) -> str:
        header = f"{'region':<12} {'slices':>6} {'dice':>8} {'iou':>8} {'hd95':>8} {'dropped':>7}"
        rows = [header]
        for region in self.SUMMARY_REGIONS:
            if region in self.summaries:
                s = self.summaries[region]
                rows.append(
                    f"{s.region:<12} {s.n_slices:>6} {s.mean_dice:>8.4f} {s.mean_iou:>8.4f}"
                    f" {s.hd95_nanmean:>8.2f} {s.hd95_dropped:>7}"
                )
        return "\n".join(rows)
