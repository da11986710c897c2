from __future__ import annotations

import json

import numpy as np
import pytest

from lq_adapter_desk.engine.dataset import MANIFEST_NAME, load_dataset, read_pgm
from lq_adapter_desk.engine.errors import ConfigError
from lq_adapter_desk.engine.synthetic import gen_synthetic, render_sample, smooth_base


def _tree_bytes(root):
    return {path.name: path.read_bytes() for path in sorted(root.iterdir())}


def test_same_seed_gives_byte_identical_files(tmp_path):
    gen_synthetic(4, 7, 64, tmp_path / "a")
    gen_synthetic(4, 7, 64, tmp_path / "b")

    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_different_seeds_give_different_images(tmp_path):
    gen_synthetic(2, 1, 32, tmp_path / "a")
    gen_synthetic(2, 2, 32, tmp_path / "b")

    assert (tmp_path / "a" / "img_0000.pgm").read_bytes() != (tmp_path / "b" / "img_0000.pgm").read_bytes()


def test_manifest_lists_every_image_with_a_box(tmp_path):
    manifest = gen_synthetic(12, 3, 64, tmp_path)

    lines = manifest.read_text(encoding="utf-8").splitlines()
    samples = load_dataset(tmp_path)

    assert manifest.name == MANIFEST_NAME
    assert len(lines) == 12
    assert json.loads(lines[0])["image"] == "img_0000.pgm"
    for sample in samples:
        assert sample.label == 1
        assert read_pgm(sample.image).shape == (64, 64)
        x1, y1, x2, y2 = sample.box.corners
        assert 0.0 <= x1 < x2 <= 1.0
        assert 0.0 <= y1 < y2 <= 1.0
        assert sample.box.w * 64 >= 4.0
        assert sample.box.h * 64 >= 4.0


def test_lesion_is_darker_than_its_surroundings():
    darker = 0
    trials = 200
    for index in range(trials):
        pixels, box = render_sample(np.random.default_rng([11, index]), 64)
        x1, y1, x2, y2 = (int(round(c * 64)) for c in box.corners)
        mask = np.zeros((64, 64), dtype=bool)
        mask[y1:y2, x1:x2] = True
        darker += pixels[mask].mean() < pixels[~mask].mean()

    assert darker >= 0.95 * trials


def test_smooth_base_stays_in_range():
    base = smooth_base(np.random.default_rng(0), 64)

    assert base.shape == (64, 64)
    assert base.min() >= 0.45 and base.max() <= 0.85


def test_file_names_are_zero_padded(tmp_path):
    gen_synthetic(1, 0, 32, tmp_path / "one")

    assert (tmp_path / "one" / "img_0000.pgm").is_file()


@pytest.mark.parametrize(
    "kwargs, message",
    [
        (dict(n=0, size=64), "at least 1"),
        (dict(n=2, size=48), "multiple of 32"),
        (dict(n=2, size=64, contrast=1.0), "contrast"),
    ],
)
def test_invalid_arguments_are_config_errors(tmp_path, kwargs, message):
    with pytest.raises(ConfigError, match=message):
        gen_synthetic(seed=0, out_dir=tmp_path, **kwargs)
