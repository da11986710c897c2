"""Pydantic models for configuration, dataset records and reports."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError


SCALE_FACTORS = (8, 16, 32)


class BackboneConfig(BaseModel):
    """Frozen ViT geometry."""

    model_config = ConfigDict(frozen=True)

    image_size: int
    patch_size: int = 16
    dim: int
    layers: int
    stages: int = 4
    heads: int = 4
    ffn_ratio: int = 4
    ln_eps: float = 1e-6

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid * self.grid

    @property
    def layers_per_stage(self) -> int:
        return self.layers // self.stages


class AdapterConfig(BaseModel):
    """Interaction-block settings."""

    model_config = ConfigDict(frozen=True)

    num_blocks: int
    lq_count: int
    lq_init: Literal["zero", "random"] = "zero"
    lq_blocks: tuple[int, ...] = ()
    lq_writeback: bool = True
    dim: int
    heads: int = 4
    ffn_ratio: int = 4
    ln_eps: float = 1e-6

    def lq_enabled(self, block: int) -> bool:
        return block in self.lq_blocks


class TrainConfig(BaseModel):
    """Optimization schedule."""

    model_config = ConfigDict(frozen=True)

    seed: int = 0
    epochs: int = 60
    batch_size: int = 2
    lr: float = 6e-5
    weight_decay: float = 0.005
    layer_decay: float = 0.65
    layer_decay_group_size: int
    val_fraction: float = 0.2


class ModelConfig(BaseModel):
    """Flat configuration file (UTF-8 JSON).

    ``lq_count`` defaults to the backbone token count and ``lq_blocks`` to every
    block when left unset.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    image_size: int = Field(default=64, gt=0)
    patch_size: int = Field(default=16, gt=0)
    dim: int = Field(default=32, gt=0)
    layers: int = Field(default=8, gt=0)
    num_blocks: int = Field(default=4, gt=0)
    heads: int = Field(default=4, gt=0)
    ffn_ratio: int = Field(default=4, gt=0)
    lq_count: Optional[int] = Field(default=None, gt=0)
    lq_init: Literal["zero", "random"] = "zero"
    lq_blocks: Optional[tuple[int, ...]] = None
    lq_writeback: bool = True
    spm_coords: bool = True
    ln_eps: float = Field(default=1e-6, gt=0)
    seed: int = 0
    epochs: int = Field(default=60, ge=0)
    batch_size: int = Field(default=2, gt=0)
    lr: float = Field(default=6e-5, ge=0)
    weight_decay: float = Field(default=0.005, ge=0)
    layer_decay: float = Field(default=0.65, gt=0, le=1)
    layer_decay_group_size: Optional[int] = Field(default=None, gt=0)
    val_fraction: float = Field(default=0.2, ge=0, lt=1)

    @field_validator("lq_blocks")
    @classmethod
    def _sorted_blocks(cls, value):
        if value is None:
            return None
        return tuple(sorted(set(value)))

    @model_validator(mode="after")
    def _check_geometry(self) -> "ModelConfig":
        if self.image_size % 32 != 0:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} must be divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} must be divisible by heads {self.heads}")
        if self.dim % 2 != 0:
            raise ValueError(f"dim must be even for the spatial prior stem, got {self.dim}")
        if self.layers % self.num_blocks != 0:
            raise ValueError(
                f"layers {self.layers} must be divisible by num_blocks {self.num_blocks}"
            )
        if self.lq_blocks is not None:
            bad = [b for b in self.lq_blocks if not 0 <= b < self.num_blocks]
            if bad:
                raise ValueError(f"lq_blocks {bad} outside 0..{self.num_blocks - 1}")
        return self

    @property
    def token_count(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def resolved_lq_blocks(self) -> tuple[int, ...]:
        if self.lq_blocks is None:
            return tuple(range(self.num_blocks))
        return self.lq_blocks

    @property
    def group_size(self) -> int:
        return self.layer_decay_group_size or self.layers // self.num_blocks

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            dim=self.dim,
            layers=self.layers,
            stages=self.num_blocks,
            heads=self.heads,
            ffn_ratio=self.ffn_ratio,
            ln_eps=self.ln_eps,
        )

    def adapter(self) -> AdapterConfig:
        return AdapterConfig(
            num_blocks=self.num_blocks,
            lq_count=self.lq_count or self.token_count,
            lq_init=self.lq_init,
            lq_blocks=self.resolved_lq_blocks,
            lq_writeback=self.lq_writeback,
            dim=self.dim,
            heads=self.heads,
            ffn_ratio=self.ffn_ratio,
            ln_eps=self.ln_eps,
        )

    def training(self) -> TrainConfig:
        return TrainConfig(
            seed=self.seed,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            layer_decay=self.layer_decay,
            layer_decay_group_size=self.group_size,
            val_fraction=self.val_fraction,
        )


def load_config(path: Optional[Path]) -> ModelConfig:
    """Read a JSON config file; ``None`` gives the desk defaults."""
    if path is None:
        return ModelConfig()
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc
    try:
        return ModelConfig.model_validate_json(raw)
    except ValidationError as exc:
        raise ConfigError(f"Invalid config {path}: {exc}") from exc


def spatial_token_count(image_size: int) -> int:
    """S = HW/8² + HW/16² + HW/32² for a square image."""
    return sum((image_size // factor) ** 2 for factor in SCALE_FACTORS)


class BBox(BaseModel):
    """Axis-aligned box in normalized image coordinates (center, size)."""

    model_config = ConfigDict(frozen=True)

    cx: float = Field(ge=0.0, le=1.0)
    cy: float = Field(ge=0.0, le=1.0)
    w: float = Field(ge=0.0, le=1.0)
    h: float = Field(ge=0.0, le=1.0)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls(cx=(x1 + x2) / 2, cy=(y1 + y2) / 2, w=x2 - x1, h=y2 - y1)

    @classmethod
    def clipped(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        """Clip a box to the unit square, keeping it axis-aligned."""
        x1 = min(max(cx - w / 2, 0.0), 1.0)
        x2 = min(max(cx + w / 2, 0.0), 1.0)
        y1 = min(max(cy - h / 2, 0.0), 1.0)
        y2 = min(max(cy + h / 2, 0.0), 1.0)
        return cls.from_corners(x1, y1, x2, y2)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    @property
    def is_degenerate(self) -> bool:
        return self.w <= 0.0 or self.h <= 0.0

    def contains(self, x: float, y: float) -> bool:
        x1, y1, x2, y2 = self.corners
        return x1 <= x <= x2 and y1 <= y <= y2

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]


class Sample(BaseModel):
    """One dataset record: an image file, its single box and a presence label."""

    image: str
    box: BBox
    label: int = Field(default=1, ge=0, le=1)

    @field_validator("box", mode="before")
    @classmethod
    def _box_from_list(cls, value):
        if isinstance(value, (list, tuple)):
            if len(value) != 4:
                raise ValueError(f"box must have 4 values [cx, cy, w, h], got {len(value)}")
            cx, cy, w, h = (float(v) for v in value)
            return BBox.clipped(cx, cy, w, h)
        return value

    def to_record(self) -> dict:
        return {"image": self.image, "box": self.box.as_list(), "label": self.label}


class MetricsReport(BaseModel):
    """Localization and classification metrics over one dataset."""

    miou: float = Field(ge=0.0, le=1.0)
    precision: float = Field(ge=0.0, le=1.0)
    recall: float = Field(ge=0.0, le=1.0)
    accuracy: float = Field(ge=0.0, le=1.0)
    specificity: float = Field(ge=0.0, le=1.0)
    sensitivity: float = Field(ge=0.0, le=1.0)
    per_sample_iou: list[float] = Field(default_factory=list)
    predictions: list[Optional[list[float]]] = Field(default_factory=list)
    flags: list[str] = Field(default_factory=list)
    notes: list[str] = Field(default_factory=list)


class EpochLog(BaseModel):
    """One line of training history."""

    epoch: int
    train_loss: Optional[float] = None
    val_miou: float
    learning_rates: list[float] = Field(default_factory=list)


class TrainResult(BaseModel):
    """Outcome of a training run."""

    checkpoint: str
    best_epoch: int
    best_miou: float
    history: list[EpochLog]
    frozen_checksum: str
