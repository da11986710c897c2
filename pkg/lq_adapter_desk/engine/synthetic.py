"""Synthetic single-lesion speckle images.

Each image is a smooth low-frequency base, one darker filled ellipse
(random center, axes and rotation, at most 15% of the image area), and
multiplicative gamma speckle. The ground-truth box is the ellipse's
axis-aligned extent.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dataset import MANIFEST_NAME, encode_pgm, write_atomic, write_manifest
from .errors import ConfigError
from .models import BBox, Sample


logger = logging.getLogger(__name__)

DEFAULT_CONTRAST = 0.4
SPECKLE_LOOKS = 4.0
MAX_AREA_FRACTION = 0.15
MIN_SEMI_AXIS = 3.0
BASE_GRID = 5


def smooth_base(rng: np.random.Generator, size: int) -> np.ndarray:
    """Bilinear upsampling of a coarse random grid."""
    coarse = rng.uniform(0.45, 0.85, size=(BASE_GRID, BASE_GRID))
    knots = np.linspace(0.0, size - 1.0, BASE_GRID)
    pixels = np.arange(size, dtype=np.float64)
    rows = np.stack([np.interp(pixels, knots, coarse[:, j]) for j in range(BASE_GRID)], axis=1)
    return np.stack([np.interp(pixels, knots, rows[i]) for i in range(size)], axis=0)


def render_sample(
    rng: np.random.Generator,
    size: int,
    contrast: float = DEFAULT_CONTRAST,
) -> tuple[np.ndarray, BBox]:
    """Draw one image (uint8, size×size) and its ellipse bounding box."""
    max_axis = 0.3 * size
    a = rng.uniform(MIN_SEMI_AXIS, max_axis)
    b = rng.uniform(MIN_SEMI_AXIS, max_axis)
    area_cap = MAX_AREA_FRACTION * size * size
    if math.pi * a * b > area_cap:
        shrink = math.sqrt(area_cap / (math.pi * a * b))
        a, b = a * shrink, b * shrink
    theta = rng.uniform(0.0, math.pi)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    half_w = math.sqrt((a * cos_t) ** 2 + (b * sin_t) ** 2)
    half_h = math.sqrt((a * sin_t) ** 2 + (b * cos_t) ** 2)

    margin = 1.0
    cx = rng.uniform(half_w + margin, size - half_w - margin)
    cy = rng.uniform(half_h + margin, size - half_h - margin)

    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    u = (xs - cx) * cos_t + (ys - cy) * sin_t
    v = -(xs - cx) * sin_t + (ys - cy) * cos_t
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0

    intensity = smooth_base(rng, size) * np.where(inside, contrast, 1.0)
    speckle = rng.gamma(SPECKLE_LOOKS, 1.0 / SPECKLE_LOOKS, size=(size, size))
    pixels = np.clip(intensity * speckle, 0.0, 1.0)
    pixels = np.round(pixels * 255.0).astype(np.uint8)

    box = BBox.clipped(cx / size, cy / size, 2 * half_w / size, 2 * half_h / size)
    return pixels, box


def gen_synthetic(
    n: int,
    seed: int,
    size: int,
    out_dir: Path,
    contrast: float = DEFAULT_CONTRAST,
    progress_callback: Optional[Callable[[int, int, str], None]] = None,
) -> Path:
    """Write ``n`` PGM images plus a JSONL manifest; returns the manifest path.

    Output is byte-identical for a given (n, seed, size, contrast).
    """
    if n < 1:
        raise ConfigError(f"n must be at least 1, got {n}")
    if size <= 0 or size % 32 != 0:
        raise ConfigError(f"image size must be a positive multiple of 32, got {size}")
    if not 0.0 < contrast < 1.0:
        raise ConfigError(f"contrast must be in (0, 1), got {contrast}")

    out_dir = Path(out_dir)
    samples = []
    width = max(4, len(str(n - 1)))
    for index in range(n):
        rng = np.random.default_rng([seed, index])
        pixels, box = render_sample(rng, size, contrast)
        name = f"img_{index:0{width}d}.pgm"
        write_atomic(out_dir / name, encode_pgm(pixels))
        samples.append(Sample(image=name, box=box, label=1))
        if progress_callback:
            progress_callback(index + 1, n, f"Rendered {name}")

    manifest = out_dir / MANIFEST_NAME
    write_manifest(manifest, samples)
    logger.info("Wrote %d synthetic samples to %s", n, out_dir)
    return manifest
