"""Localization and classification metrics.

Degenerate denominators return 1.0 and add a flag instead of raising, so
sweeps over small or one-sided splits never crash.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .models import BBox


logger = logging.getLogger(__name__)

Corners = tuple[float, float, float, float]


@dataclass(frozen=True)
class RateResult:
    """A ratio metric pair plus the names of any degenerate denominators."""

    values: tuple[float, ...]
    flags: list[str] = field(default_factory=list)


def iou_corners(a: Corners, b: Corners) -> float:
    """Intersection over union for (x1, y1, x2, y2) boxes; 0 for degenerate ones."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        logger.warning("IoU of a degenerate box is defined as 0: %s vs %s", a, b)
        return 0.0
    inter_w = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    inter_h = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = inter_w * inter_h
    if inter == 0.0:
        return 0.0
    return inter / (area_a + area_b - inter)


def iou(a: BBox, b: BBox) -> float:
    return iou_corners(a.corners, b.corners)


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(f"{name}_undefined")
        logger.debug("%s has an empty denominator; reporting 1.0", name)
        return 1.0
    return num / den


def center_rule_pr(preds: Sequence[Optional[BBox]], gts: Sequence[BBox]) -> RateResult:
    """Precision and recall where a hit means the predicted center lies in the gt box.

    Missed samples (no prediction) are the only false negatives.
    """
    if len(preds) != len(gts):
        raise ValueError(f"center_rule_pr: {len(preds)} predictions for {len(gts)} samples")
    tp = fp = fn = 0
    for pred, gt in zip(preds, gts):
        if pred is None:
            fn += 1
        elif gt.contains(pred.cx, pred.cy):
            tp += 1
        else:
            fp += 1
    flags: list[str] = []
    precision = _ratio(tp, tp + fp, "precision", flags)
    recall = _ratio(tp, tp + fn, "recall", flags)
    return RateResult((precision, recall), flags)


def cls_metrics(pred_labels: Sequence[int], true_labels: Sequence[int]) -> RateResult:
    """(accuracy, specificity, sensitivity) for binary labels."""
    if len(pred_labels) != len(true_labels):
        raise ValueError(f"cls_metrics: {len(pred_labels)} predictions for {len(true_labels)} labels")
    if not true_labels:
        raise ValueError("cls_metrics: no samples")
    tp = tn = fp = fn = 0
    for pred, truth in zip(pred_labels, true_labels):
        if pred not in (0, 1) or truth not in (0, 1):
            raise ValueError(f"cls_metrics: labels must be 0 or 1, got {pred} and {truth}")
        if truth == 1:
            tp += pred == 1
            fn += pred == 0
        else:
            tn += pred == 0
            fp += pred == 1
    flags: list[str] = []
    accuracy = (tp + tn) / len(true_labels)
    specificity = _ratio(tn, tn + fp, "specificity", flags)
    sensitivity = _ratio(tp, tp + fn, "sensitivity", flags)
    return RateResult((accuracy, specificity, sensitivity), flags)
