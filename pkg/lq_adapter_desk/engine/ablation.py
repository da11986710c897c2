"""Learnable-query ablations: block-count sweep and query initialization."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from .models import ModelConfig, Sample
from .training import train


logger = logging.getLogger(__name__)

DEFAULT_BLOCK_COUNTS = (0, 1, 2, 4)


class AblationRun(BaseModel):
    variant: str
    lq_blocks: list[int]
    lq_init: str
    seed: int
    best_miou: float
    best_epoch: int


class AblationVariant(BaseModel):
    variant: str
    runs: list[AblationRun] = Field(default_factory=list)

    @property
    def median_miou(self) -> float:
        return float(np.median([run.best_miou for run in self.runs]))


class AblationReport(BaseModel):
    block_sweep: dict[str, float] = Field(default_factory=dict)
    init_comparison: dict[str, float] = Field(default_factory=dict)
    runs: list[AblationRun] = Field(default_factory=list)


def block_sweep_configs(base: ModelConfig, counts: Sequence[int] = DEFAULT_BLOCK_COUNTS) -> dict[str, ModelConfig]:
    """One config per count of leading blocks with queries enabled, capped at N."""
    configs = {}
    for count in sorted({min(count, base.num_blocks) for count in counts}):
        configs[f"lq_blocks={count}"] = base.model_copy(update={"lq_blocks": tuple(range(count))})
    return configs


def init_configs(base: ModelConfig) -> dict[str, ModelConfig]:
    all_blocks = tuple(range(base.num_blocks))
    return {
        f"lq_init={init}": base.model_copy(update={"lq_init": init, "lq_blocks": all_blocks})
        for init in ("zero", "random")
    }


def _run_variant(
    name: str,
    config: ModelConfig,
    samples: Sequence[Sample],
    seeds: Sequence[int],
    out_dir: Path,
) -> AblationVariant:
    variant = AblationVariant(variant=name)
    for seed in seeds:
        seeded = config.model_copy(update={"seed": seed})
        result = train(seeded, samples, out_dir / name / f"seed_{seed}")
        variant.runs.append(
            AblationRun(
                variant=name,
                lq_blocks=list(seeded.resolved_lq_blocks),
                lq_init=seeded.lq_init,
                seed=seed,
                best_miou=result.best_miou,
                best_epoch=result.best_epoch,
            )
        )
    logger.info("Ablation %s: median best mIoU %.4f over %d seeds", name, variant.median_miou, len(seeds))
    return variant


def run_ablation(
    base: ModelConfig,
    samples: Sequence[Sample],
    out_dir: Path,
    seeds: Sequence[int] = (0, 1, 2),
    counts: Sequence[int] = DEFAULT_BLOCK_COUNTS,
    compare_init: bool = True,
    progress_callback: Optional[Callable[[int, int, str], None]] = None,
) -> AblationReport:
    """Train every variant for every seed and report median validation mIoU."""
    out_dir = Path(out_dir)
    sweep = block_sweep_configs(base, counts)
    inits = init_configs(base) if compare_init else {}
    total = len(sweep) + len(inits)

    report = AblationReport()
    done = 0
    for table, variants in ((report.block_sweep, sweep), (report.init_comparison, inits)):
        for name, config in variants.items():
            variant = _run_variant(name, config, samples, seeds, out_dir)
            table[name] = variant.median_miou
            report.runs.extend(variant.runs)
            done += 1
            if progress_callback:
                progress_callback(done, total, name)
    return report
