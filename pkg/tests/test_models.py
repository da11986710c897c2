from __future__ import annotations

import json

import pytest
from pydantic import ValidationError

from lq_adapter_desk.engine.errors import ConfigError
from lq_adapter_desk.engine.models import BBox, ModelConfig, Sample, load_config, spatial_token_count


def test_desk_defaults():
    config = load_config(None)

    assert (config.image_size, config.patch_size, config.dim, config.layers, config.num_blocks) == (64, 16, 32, 8, 4)
    assert config.adapter().lq_count == config.token_count == 16
    assert config.resolved_lq_blocks == (0, 1, 2, 3)
    assert config.group_size == 2
    assert config.backbone().layers_per_stage == 2


def test_partial_config_file_takes_defaults(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"epochs": 3, "lq_blocks": [2, 0, 2]}), encoding="utf-8")

    config = load_config(path)

    assert config.epochs == 3
    assert config.lq_blocks == (0, 2)
    assert config.lr == 6e-5


@pytest.mark.parametrize(
    "payload, message",
    [
        ({"image_size": 48}, "divisible by 32"),
        ({"dim": 30, "heads": 4}, "divisible by heads"),
        ({"layers": 6, "num_blocks": 4}, "divisible by num_blocks"),
        ({"lq_blocks": [4]}, "outside"),
        ({"lq_init": "ones"}, "lq_init"),
        ({"learning_rate": 0.1}, "learning_rate"),
        ({"layer_decay": 0.0}, "layer_decay"),
    ],
)
def test_invalid_configs_are_config_errors(tmp_path, payload, message):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload), encoding="utf-8")

    with pytest.raises(ConfigError, match=message):
        load_config(path)


def test_unreadable_config_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError, match="Cannot read config"):
        load_config(tmp_path / "missing.json")


def test_spatial_token_count_for_three_scales():
    assert spatial_token_count(64) == 64 + 16 + 4
    assert spatial_token_count(32) == 16 + 4 + 1


def test_bbox_corners_and_clipping():
    box = BBox.from_corners(0.1, 0.2, 0.5, 0.4)

    assert box.corners == pytest.approx((0.1, 0.2, 0.5, 0.4))
    assert box.contains(0.3, 0.3) and not box.contains(0.6, 0.3)
    assert BBox.clipped(0.0, 0.0, 0.4, 0.4).corners == pytest.approx((0.0, 0.0, 0.2, 0.2))
    with pytest.raises(ValidationError):
        BBox(cx=1.5, cy=0.5, w=0.1, h=0.1)


def test_sample_accepts_box_list_and_round_trips_record():
    sample = Sample(image="a.pgm", box=[0.5, 0.5, 0.2, 0.2])

    assert sample.to_record() == {"image": "a.pgm", "box": pytest.approx([0.5, 0.5, 0.2, 0.2]), "label": 1}
