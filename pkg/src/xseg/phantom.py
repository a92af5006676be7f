"""Synthetic long-bone phantom volumes.

Each volume is an axial stack: a run of empty slices above the structure,
then a cortical ring (an ellipse annulus) whose center drifts smoothly down
the axis. The ring's outer profile is bulbous and asymmetric near the top
(head/neck analog), nearly constant through the middle, and widens into a
two-lobe cross-section toward the bottom (condyle analog). Images render
the ring brightly over a smooth textured background with Gaussian noise and
a mild per-slice intensity shift; masks are the exact ring pixels.

Volumes are deterministic functions of their seed via numpy's PCG64
generator, so regeneration is bit-identical across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

REGION_PROPORTIONS = (0.10, 0.25, 0.40, 0.25)  # above, proximal, shaft, distal
REGION_ORDER = ("above-structure", "proximal", "shaft", "distal")
MIN_MASK_PIXELS = 20
NOISE_SIGMA = 0.05


@dataclass
class PhantomVolume:
    volume_id: str
    images: np.ndarray  # (n, H, W) float32 in [0, 1]
    masks: np.ndarray  # (n, H, W) uint8 in {0, 1}
    regions: list[str]  # one tag per slice

    @property
    def n_slices(self) -> int:
        return len(self.regions)


def region_counts(n_slices: int, proportions=REGION_PROPORTIONS) -> list[int]:
    """Split n_slices into the four contiguous region runs by cumulative
    rounding, so the counts always sum to n_slices."""
    if len(proportions) != 4:
        raise ConfigError("proportions must have four entries (above, proximal, shaft, distal)")
    if abs(sum(proportions) - 1.0) > 1e-9:
        raise ConfigError(f"proportions must sum to 1, got {sum(proportions)}")
    edges = [int(round(n_slices * c)) for c in np.cumsum(proportions)]
    edges[-1] = n_slices
    counts = np.diff([0] + edges).tolist()
    if min(counts) < 1:
        raise ConfigError(f"region proportions {proportions} leave an empty region at {n_slices} slices")
    return counts


def _annulus(xx, yy, lobes, thickness):
    """Ring mask for a union of ellipses: outer shape minus the same shape
    shrunk by the ring thickness."""
    outer = np.zeros(xx.shape, dtype=bool)
    inner = np.zeros(xx.shape, dtype=bool)
    for cx, cy, rx, ry in lobes:
        outer |= ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        rxi = max(rx - thickness, 0.8)
        ryi = max(ry - thickness, 0.8)
        inner |= ((xx - cx) / rxi) ** 2 + ((yy - cy) / ryi) ** 2 <= 1.0
    return outer, inner, outer & ~inner


def generate_phantom(
    seed,
    n_slices: int = 40,
    raw_size: tuple[int, int] = (90, 40),
    proportions=REGION_PROPORTIONS,
    volume_id: str | None = None,
) -> PhantomVolume:
    if n_slices < 8:
        raise ConfigError(f"n_slices must be >= 8, got {n_slices}")
    h, w = raw_size
    if h < 16 or w < 16:
        raise ConfigError(f"raw_size must be at least 16x16, got {raw_size}")
    rng = np.random.default_rng(seed)
    counts = region_counts(n_slices, proportions)
    n_above = counts[0]
    n_bone = n_slices - n_above

    # Volume-level geometry, drawn in a fixed order.
    cx0 = w * rng.uniform(0.46, 0.54)
    cy0 = h * rng.uniform(0.46, 0.54)
    drift_ax = w * rng.uniform(0.03, 0.07)
    drift_ay = h * rng.uniform(0.02, 0.05)
    phases = rng.uniform(0, 2 * np.pi, size=4)
    r_base = w * rng.uniform(0.15, 0.19)
    aspect = rng.uniform(0.95, 1.25)
    thickness = rng.uniform(2.6, 3.8)
    prox_gain = rng.uniform(0.35, 0.55)
    prox_shift = w * rng.uniform(0.06, 0.12)
    dist_gain = rng.uniform(0.20, 0.35)
    lobe_sep_frac = rng.uniform(0.45, 0.62)
    tex_fx, tex_fy = rng.uniform(0.4, 1.2, size=2)
    tex_phase = rng.uniform(0, 2 * np.pi)
    shade_dir = rng.uniform(0, 2 * np.pi)

    regions: list[str] = []
    for tag, count in zip(REGION_ORDER, counts):
        regions.extend([tag] * count)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    background = 0.16 + 0.06 * np.sin(2 * np.pi * (tex_fx * xx / w + tex_fy * yy / h) + tex_phase)

    images = np.empty((n_slices, h, w), dtype=np.float32)
    masks = np.zeros((n_slices, h, w), dtype=np.uint8)

    prox_end = counts[0] + counts[1]
    shaft_end = prox_end + counts[2]

    for s in range(n_slices):
        img = background.copy()
        if regions[s] != "above-structure":
            k = s - n_above
            u = k / max(1, n_bone - 1)
            cx = cx0 + drift_ax * np.sin(2 * np.pi * (0.7 * u) + phases[0])
            cy = cy0 + drift_ay * np.sin(2 * np.pi * (0.5 * u) + phases[1])

            if regions[s] == "proximal":
                v = (prox_end - 1 - s) / max(1, counts[1] - 1)  # 1 at the top
                rx = r_base * (1.0 + prox_gain * v ** 1.3)
                ry = rx * aspect * (1.0 + 0.15 * v)
                cx = cx + prox_shift * v
                extent = rx
                cx = float(np.clip(cx, extent + 2.0, w - extent - 2.0))
                cy = float(np.clip(cy, ry + 2.0, h - ry - 2.0))
                lobes = [(cx, cy, rx, ry)]
            elif regions[s] == "shaft":
                rx = r_base * (1.0 + 0.04 * np.sin(2 * np.pi * (2.0 * u) + phases[2]))
                ry = rx * aspect
                cx = float(np.clip(cx, rx + 2.0, w - rx - 2.0))
                cy = float(np.clip(cy, ry + 2.0, h - ry - 2.0))
                lobes = [(cx, cy, rx, ry)]
            else:  # distal, two-lobe
                v = (s - shaft_end) / max(1, counts[3] - 1)
                rx_d = r_base * (1.0 + dist_gain * v)
                sep = lobe_sep_frac * rx_d * v
                lobe_rx = rx_d * (1.0 - 0.2 * v)
                lobe_ry = rx_d * aspect * (1.0 - 0.1 * v)
                extent = sep + lobe_rx
                cx = float(np.clip(cx, extent + 2.0, w - extent - 2.0))
                cy = float(np.clip(cy, lobe_ry + 2.0, h - lobe_ry - 2.0))
                lobes = [(cx - sep, cy, lobe_rx, lobe_ry), (cx + sep, cy, lobe_rx, lobe_ry)]

            _, inner, ring = _annulus(xx, yy, lobes, thickness)
            # Marrow interior, then a shaded bright cortical ring.
            img[inner] = 0.38 + 0.08 * ((xx[inner] - cx) / w)
            shade = ((xx - cx) * np.cos(shade_dir) + (yy - cy) * np.sin(shade_dir)) / max(h, w)
            img[ring] = 0.84 + 0.10 * shade[ring]
            masks[s][ring] = 1
            if int(ring.sum()) < MIN_MASK_PIXELS:
                raise ConfigError(
                    f"phantom slice {s} produced only {int(ring.sum())} mask pixels;"
                    " raw_size is too small for the geometry"
                )

        shift = rng.uniform(-0.04, 0.04)
        noise = rng.normal(0.0, NOISE_SIGMA, size=(h, w))
        images[s] = np.clip(img + noise + shift, 0.0, 1.0).astype(np.float32)

    vid = volume_id if volume_id is not None else f"vol{seed}"
    return PhantomVolume(vid, images, masks, regions)


def volume_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Deterministic per-volume seed derived from a dataset master seed."""
    return np.random.SeedSequence((master_seed, index))
