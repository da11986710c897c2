from __future__ import annotations

import logging

import numpy as np
import pytest

from lq_adapter_desk.engine.metrics import center_rule_pr, cls_metrics, iou, iou_corners
from lq_adapter_desk.engine.models import BBox


def _random_box(rng: np.random.Generator) -> BBox:
    x1, y1 = rng.uniform(0.0, 0.6, size=2)
    w, h = rng.uniform(0.05, 0.4, size=2)
    return BBox.from_corners(x1, y1, x1 + w, y1 + h)


def test_iou_of_identical_and_disjoint_boxes():
    box = BBox(cx=0.5, cy=0.5, w=0.2, h=0.4)

    assert iou(box, box) == pytest.approx(1.0)
    assert iou(box, BBox(cx=0.1, cy=0.1, w=0.1, h=0.1)) == 0.0


def test_iou_of_overlapping_squares_is_one_seventh():
    a = BBox.from_corners(0.0, 0.0, 0.5, 0.5)
    b = BBox.from_corners(0.25, 0.25, 0.75, 0.75)

    assert iou_corners((0.0, 0.0, 2.0, 2.0), (1.0, 1.0, 3.0, 3.0)) == pytest.approx(1 / 7)
    assert iou(a, b) == pytest.approx(1 / 7)


def test_iou_is_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        a, b = _random_box(rng), _random_box(rng)

        value = iou(a, b)

        assert value == pytest.approx(iou(b, a), abs=1e-15)
        assert 0.0 <= value <= 1.0
        assert iou(a, a) == pytest.approx(1.0, abs=1e-12)


def test_degenerate_box_has_zero_iou(caplog):
    flat = BBox(cx=0.5, cy=0.5, w=0.0, h=0.2)

    with caplog.at_level(logging.WARNING):
        value = iou(flat, BBox(cx=0.5, cy=0.5, w=0.2, h=0.2))

    assert value == 0.0
    assert "degenerate" in caplog.text


def test_center_rule_one_hit_one_miss():
    gt = BBox(cx=0.5, cy=0.5, w=0.2, h=0.2)
    hit = BBox(cx=0.55, cy=0.45, w=0.5, h=0.5)
    miss = BBox(cx=0.9, cy=0.9, w=0.1, h=0.1)

    result = center_rule_pr([hit, miss], [gt, gt])

    assert result.values == (0.5, 1.0)
    assert result.flags == []


def test_center_rule_missing_prediction_is_a_false_negative():
    gt = BBox(cx=0.5, cy=0.5, w=0.2, h=0.2)

    result = center_rule_pr([gt, None], [gt, gt])

    assert result.values == (1.0, 0.5)


def test_center_rule_all_centers_inside():
    rng = np.random.default_rng(1)
    gts = [_random_box(rng) for _ in range(10)]
    preds = [BBox(cx=gt.cx, cy=gt.cy, w=0.05, h=0.05) for gt in gts]

    assert center_rule_pr(preds, gts).values == (1.0, 1.0)


def test_center_rule_ignores_sample_order():
    rng = np.random.default_rng(2)
    gts = [_random_box(rng) for _ in range(12)]
    preds = [_random_box(rng) for _ in range(12)]
    order = rng.permutation(12)

    base = center_rule_pr(preds, gts).values
    shuffled = center_rule_pr([preds[i] for i in order], [gts[i] for i in order]).values

    assert base == shuffled


def test_center_rule_without_predictions_flags_precision():
    gt = BBox(cx=0.5, cy=0.5, w=0.2, h=0.2)

    result = center_rule_pr([None], [gt])

    assert result.values == (1.0, 0.0)
    assert result.flags == ["precision_undefined"]


def test_center_rule_rejects_length_mismatch():
    gt = BBox(cx=0.5, cy=0.5, w=0.2, h=0.2)

    with pytest.raises(ValueError, match="1 predictions for 2 samples"):
        center_rule_pr([gt], [gt, gt])


def test_cls_metrics_examples():
    assert cls_metrics([1, 0, 1, 0], [1, 0, 1, 0]).values == (1.0, 1.0, 1.0)
    assert cls_metrics([1, 0, 0, 0], [1, 0, 1, 0]).values == (0.75, 1.0, 0.5)


def test_cls_metrics_single_class_flags_the_missing_rate():
    result = cls_metrics([0, 1, 0], [0, 0, 0])

    assert result.values[2] == 1.0
    assert result.values[1] == pytest.approx(2 / 3)
    assert result.flags == ["sensitivity_undefined"]


def test_cls_metrics_rejects_empty_and_non_binary_input():
    with pytest.raises(ValueError, match="no samples"):
        cls_metrics([], [])
    with pytest.raises(ValueError, match="must be 0 or 1"):
        cls_metrics([2], [1])


def test_undefined_rate_is_logged_below_warning(caplog):
    with caplog.at_level(logging.DEBUG, logger="lq_adapter_desk.engine.metrics"):
        result = cls_metrics([1, 1], [1, 1])

    assert result.flags == ["specificity_undefined"]
    assert [record.levelno for record in caplog.records] == [logging.DEBUG]
