"""Convolutional spatial prior pyramid at 1/8, 1/16 and 1/32 resolution."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .models import SCALE_FACTORS
from .params import ParamSpec, conv_specs, with_flags
from .tensor import Tensor


STEM = ("stem.0", "stem.1", "stem.2")
DOWN = ("down16", "down32")


@dataclass(frozen=True)
class MultiScaleTokens:
    """Row-major 1/8, 1/16, 1/32 maps flattened and stacked into one S×D tensor."""

    data: Tensor
    offsets: tuple[int, ...]
    dims: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if len(self.offsets) != len(self.dims) or not self.offsets:
            raise ShapeError(f"multi-scale: {len(self.offsets)} offsets for {len(self.dims)} scales")
        if self.offsets[0] != 0 or any(b <= a for a, b in zip(self.offsets, self.offsets[1:])):
            raise ShapeError(f"multi-scale: offsets {self.offsets} must start at 0 and increase")
        counts = self.counts
        ends = list(self.offsets[1:]) + [self.data.shape[0]]
        if any(end - start != count for start, end, count in zip(self.offsets, ends, counts)):
            raise ShapeError(f"multi-scale: offsets {self.offsets} disagree with dims {self.dims}")
        if sum(counts) != self.data.shape[0]:
            raise ShapeError(f"multi-scale: dims cover {sum(counts)} rows, data has {self.data.shape[0]}")

    @property
    def counts(self) -> list[int]:
        return [h * w for h, w in self.dims]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: Tensor) -> "MultiScaleTokens":
        if data.shape != self.data.shape:
            raise ShapeError(f"multi-scale: replacement {data.shape} differs from {self.data.shape}")
        return MultiScaleTokens(data, self.offsets, self.dims)


def flatten_scales(maps: Sequence[Tensor]) -> MultiScaleTokens:
    """D×h×w maps → S×D rows (row-major within each map, maps in order)."""
    rows, offsets, dims = [], [], []
    start = 0
    for feature_map in maps:
        channels, height, width = feature_map.shape
        rows.append(T.transpose(T.reshape(feature_map, (channels, height * width))))
        offsets.append(start)
        dims.append((height, width))
        start += height * width
    return MultiScaleTokens(T.concat(rows, axis=0), tuple(offsets), tuple(dims))


def split_scales(tokens: MultiScaleTokens) -> list[Tensor]:
    """Inverse of :func:`flatten_scales`."""
    ends = list(tokens.offsets[1:]) + [tokens.data.shape[0]]
    maps = []
    for start, end, (height, width) in zip(tokens.offsets, ends, tokens.dims):
        if end - start != height * width:
            raise ShapeError(f"split_scales: rows [{start}, {end}) cannot form a {height}x{width} map")
        rows = T.slice_axis(tokens.data, start, end, axis=0)
        maps.append(T.reshape(T.transpose(rows), (tokens.dim, height, width)))
    return maps


def spatial_prior_specs(dim: int, group: int = 0, coords: bool = True) -> list[ParamSpec]:
    """Stem input is the intensity plus, with ``coords``, the two coordinate channels."""
    half = dim // 2
    specs = (
        conv_specs("spm.stem.0", 3 if coords else 1, half, 3)
        + conv_specs("spm.stem.1", half, half, 3)
        + conv_specs("spm.stem.2", half, dim, 3)
        + conv_specs("spm.down16", dim, dim, 3)
        + conv_specs("spm.down32", dim, dim, 3)
    )
    for factor in SCALE_FACTORS:
        specs += conv_specs(f"spm.proj{factor}", dim, dim, 1)
    return with_flags(specs, True, group)


@dataclass(frozen=True)
class SPMParams:
    convs: Mapping[str, tuple[Tensor, Tensor]]

    @classmethod
    def from_store(cls, store: Mapping[str, Tensor]) -> "SPMParams":
        names = STEM + DOWN + tuple(f"proj{f}" for f in SCALE_FACTORS)
        return cls({n: (store[f"spm.{n}.kernel"], store[f"spm.{n}.bias"]) for n in names})

    def conv(self, name: str, x: Tensor, stride: int) -> Tensor:
        kernel, bias = self.convs[name]
        pad = kernel.shape[2] // 2
        return T.conv2d(x, kernel, bias, stride=stride, pad=pad)

    @property
    def coords(self) -> bool:
        return self.convs["stem.0"][0].shape[1] == 3


@lru_cache(maxsize=8)
def coordinate_channels(height: int, width: int) -> Tensor:
    """Pixel-center x and y in [-1, 1] as a constant 2×H×W map."""
    ys = (np.arange(height) + 0.5) / height * 2.0 - 1.0
    xs = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return Tensor(np.stack([grid_x, grid_y]))


def spatial_priors(image: Tensor, p: SPMParams) -> MultiScaleTokens:
    """Stride-2 stem to 1/8, two more stride-2 stages, then per-scale 1×1 projections.

    Dense attention has no reference points, so the stem sees pixel
    coordinates next to intensity when the store was declared with them.
    """
    if image.ndim != 3 or image.shape[0] != 1:
        raise ShapeError(f"spatial_priors: expected a 1×H×W image, got {image.shape}")
    height, width = image.shape[1:]
    if height % 32 or width % 32:
        raise ShapeError(f"spatial_priors: image {height}x{width} not divisible by 32")

    x = T.concat([image, coordinate_channels(height, width)], axis=0) if p.coords else image
    for name in STEM:
        x = T.gelu(p.conv(name, x, stride=2))
    f8 = x
    f16 = T.gelu(p.conv("down16", f8, stride=2))
    f32 = T.gelu(p.conv("down32", f16, stride=2))
    projected = [p.conv(f"proj{f}", fmap, stride=1) for f, fmap in zip(SCALE_FACTORS, (f8, f16, f32))]
    return flatten_scales(projected)
