from __future__ import annotations

import pytest

from lq_adapter_desk.engine.ablation import (
    AblationRun,
    AblationVariant,
    block_sweep_configs,
    init_configs,
    run_ablation,
)
from lq_adapter_desk.engine.dataset import load_dataset
from lq_adapter_desk.engine.synthetic import gen_synthetic


def test_block_sweep_caps_counts_at_block_total(make_config):
    configs = block_sweep_configs(make_config(), (0, 1, 2, 4))

    assert list(configs) == ["lq_blocks=0", "lq_blocks=1", "lq_blocks=2"]
    assert configs["lq_blocks=0"].resolved_lq_blocks == ()
    assert configs["lq_blocks=1"].resolved_lq_blocks == (0,)
    assert configs["lq_blocks=2"].resolved_lq_blocks == (0, 1)


def test_init_variants_enable_every_block(make_config):
    configs = init_configs(make_config(lq_blocks=(0,)))

    assert {name: c.lq_init for name, c in configs.items()} == {"lq_init=zero": "zero", "lq_init=random": "random"}
    assert all(c.resolved_lq_blocks == (0, 1) for c in configs.values())


def test_variant_median_over_seeds():
    runs = [
        AblationRun(variant="v", lq_blocks=[0], lq_init="zero", seed=s, best_miou=m, best_epoch=1)
        for s, m in enumerate([0.2, 0.5, 0.3])
    ]

    assert AblationVariant(variant="v", runs=runs).median_miou == pytest.approx(0.3)


def test_run_ablation_trains_every_variant_and_seed(tmp_path, make_config):
    gen_synthetic(4, 0, 32, tmp_path / "data")
    samples = load_dataset(tmp_path / "data")
    calls = []

    report = run_ablation(
        make_config(lq_count=2, epochs=1, val_fraction=0.25),
        samples,
        tmp_path / "runs",
        seeds=(0, 1),
        counts=(0, 2),
        progress_callback=lambda *args: calls.append(args),
    )

    assert list(report.block_sweep) == ["lq_blocks=0", "lq_blocks=2"]
    assert list(report.init_comparison) == ["lq_init=zero", "lq_init=random"]
    assert len(report.runs) == 4 * 2
    assert all(0.0 <= run.best_miou <= 1.0 for run in report.runs)
    assert (tmp_path / "runs" / "lq_blocks=2" / "seed_1" / "checkpoint.json").is_file()
    assert [c[:2] for c in calls] == [(1, 4), (2, 4), (3, 4), (4, 4)]


def test_run_ablation_without_init_comparison(tmp_path, make_config):
    gen_synthetic(2, 0, 32, tmp_path / "data")
    samples = load_dataset(tmp_path / "data")

    report = run_ablation(
        make_config(lq_count=2, epochs=0), samples, tmp_path / "runs", seeds=(0,), counts=(1,), compare_init=False
    )

    assert list(report.block_sweep) == ["lq_blocks=1"]
    assert report.init_comparison == {}
