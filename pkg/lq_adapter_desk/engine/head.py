"""Single-box detection head and its differentiable box loss."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

from . import tensor as T
from .attention import Linear
from .models import BBox
from .params import ParamSpec, linear_specs, with_flags
from .spatial_prior import MultiScaleTokens
from .tensor import Tensor


def head_specs(dim: int, scales: int, group: int) -> list[ParamSpec]:
    specs = linear_specs("head.fc1", scales * dim, dim) + linear_specs("head.fc2", dim, 4)
    return with_flags(specs, True, group)


@dataclass(frozen=True)
class HeadParams:
    fc1: Linear
    fc2: Linear

    @classmethod
    def from_store(cls, store: Mapping[str, Tensor]) -> "HeadParams":
        return cls(Linear.from_store(store, "head.fc1"), Linear.from_store(store, "head.fc2"))


def pooled_features(f_sp: MultiScaleTokens) -> Tensor:
    """Mean-pool each scale and concatenate: a length-3D vector."""
    ends = list(f_sp.offsets[1:]) + [f_sp.data.shape[0]]
    pooled = [T.mean_rows(T.slice_axis(f_sp.data, start, end)) for start, end in zip(f_sp.offsets, ends)]
    return T.concat(pooled, axis=0)


def detect_head(f_sp: MultiScaleTokens, p: HeadParams) -> Tensor:
    """Predict (cx, cy, w, h), each squashed into (0, 1)."""
    pooled = T.reshape(pooled_features(f_sp), (1, f_sp.dim * len(f_sp.dims)))
    logits = p.fc2(T.gelu(p.fc1(pooled)))
    return T.reshape(T.sigmoid(logits), (4,))


def to_bbox(pred: Tensor) -> BBox:
    cx, cy, w, h = (float(v) for v in pred.data)
    return BBox.clipped(cx, cy, w, h)


def box_loss(pred: Tensor, gt: BBox) -> Tensor:
    """L1 over (cx, cy, w, h) plus (1 − IoU).

    Kinks (ties in min/max, zero overlap, zero residual) take subgradient 0.
    """
    target = Tensor(gt.as_list())
    l1 = T.sum_all(T.absolute(T.sub(pred, target)))

    centers = T.slice_axis(pred, 0, 2)
    sizes = T.slice_axis(pred, 2, 4)
    half = T.scale(sizes, 0.5)
    pred_lo, pred_hi = T.sub(centers, half), T.add(centers, half)
    gx1, gy1, gx2, gy2 = gt.corners
    gt_lo, gt_hi = Tensor([gx1, gy1]), Tensor([gx2, gy2])

    overlap = T.relu(T.sub(T.minimum(pred_hi, gt_hi), T.maximum(pred_lo, gt_lo)))
    inter = T.mul(T.slice_axis(overlap, 0, 1), T.slice_axis(overlap, 1, 2))
    pred_area = T.mul(T.slice_axis(sizes, 0, 1), T.slice_axis(sizes, 1, 2))
    union = T.sub(T.add(pred_area, Tensor([gt.w * gt.h])), inter)
    iou = T.div(inter, union)
    return T.add(l1, T.sub(Tensor([1.0]), iou))
