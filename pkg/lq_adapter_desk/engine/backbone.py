"""Small frozen ViT: patch embedding plus pre-norm encoder layers split into stages."""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass

from . import tensor as T
from .attention import AttentionParams, FFNParams, LayerNorm, attention_specs, ffn_specs, self_attention, ffn
from .errors import ShapeError
from .models import BackboneConfig
from .params import ParamSpec, conv_specs, norm_specs, with_flags
from .tensor import Tensor


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderLayer:
    norm1: LayerNorm
    attn: AttentionParams
    norm2: LayerNorm
    mlp: FFNParams

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self_attention(self.norm1(x), self.attn))
        return T.add(x, ffn(self.norm2(x), self.mlp))


def backbone_specs(config: BackboneConfig, group_size: int) -> list[ParamSpec]:
    """Every backbone tensor, flagged frozen."""
    dim = config.dim
    specs = with_flags(conv_specs("backbone.patch", 1, dim, config.patch_size), False, 0)
    specs.append(ParamSpec("backbone.pos_embed", (config.token_count, dim), "normal", 0.02, False, 0))
    for index in range(config.layers):
        prefix = f"backbone.layers.{index}"
        layer = (
            norm_specs(f"{prefix}.norm1", dim)
            + attention_specs(f"{prefix}.attn", dim)
            + norm_specs(f"{prefix}.norm2", dim)
            + ffn_specs(f"{prefix}.mlp", dim, config.ffn_ratio)
        )
        specs += with_flags(layer, False, index // group_size)
    return specs


class VitBackbone:
    """Frozen encoder stand-in.

    Weights never change, but gradients still flow through every layer so the
    injector gates of earlier blocks can learn.
    """

    def __init__(self, config: BackboneConfig, store: Mapping[str, Tensor]) -> None:
        self.config = config
        self.patch_kernel = store["backbone.patch.kernel"]
        self.patch_bias = store["backbone.patch.bias"]
        self.pos_embed = store["backbone.pos_embed"]
        eps = config.ln_eps
        self.layers = tuple(
            EncoderLayer(
                norm1=LayerNorm.from_store(store, f"backbone.layers.{i}.norm1", eps),
                attn=AttentionParams.from_store(store, f"backbone.layers.{i}.attn", config.heads),
                norm2=LayerNorm.from_store(store, f"backbone.layers.{i}.norm2", eps),
                mlp=FFNParams.from_store(store, f"backbone.layers.{i}.mlp"),
            )
            for i in range(config.layers)
        )

    def patch_embed(self, image: Tensor) -> Tensor:
        """1×H×W image → T×D tokens (T = HW/P²) with positional embedding added."""
        size, patch = self.config.image_size, self.config.patch_size
        if image.ndim != 3 or image.shape[0] != 1:
            raise ShapeError(f"patch_embed: expected a 1×H×W image, got {image.shape}")
        height, width = image.shape[1:]
        if height % patch or width % patch:
            raise ShapeError(f"patch_embed: image {height}x{width} not divisible by patch size {patch}")
        if (height, width) != (size, size):
            raise ShapeError(f"patch_embed: image {height}x{width} does not match configured {size}x{size}")
        maps = T.conv2d(image, self.patch_kernel, self.patch_bias, stride=patch)
        tokens = T.transpose(T.reshape(maps, (self.config.dim, self.config.token_count)))
        return T.add(tokens, self.pos_embed)

    def stage_layers(self, stage_index: int) -> tuple[EncoderLayer, ...]:
        if not 0 <= stage_index < self.config.stages:
            raise ShapeError(f"run_stage: stage {stage_index} outside 0..{self.config.stages - 1}")
        per = self.config.layers_per_stage
        return self.layers[stage_index * per : (stage_index + 1) * per]

    def run_stage(self, tokens: Tensor, stage_index: int) -> Tensor:
        """Apply layers [stage·L/N, (stage+1)·L/N)."""
        for layer in self.stage_layers(stage_index):
            tokens = layer(tokens)
        return tokens

    def encode(self, tokens: Tensor) -> Tensor:
        """Run every layer in order."""
        for layer in self.layers:
            tokens = layer(tokens)
        return tokens

    def __call__(self, image: Tensor) -> Tensor:
        return self.encode(self.patch_embed(image))
