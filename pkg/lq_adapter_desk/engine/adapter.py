"""Interaction blocks with learnable queries around a frozen ViT.

Each block injects spatial priors into the backbone tokens through a
zero-gated cross-attention, runs one backbone stage, then extracts backbone
information back into the multi-scale stream. Blocks with learnable queries
also refine a query set against the injected tokens and the new multi-scale
features, and (with write-back on) feed the refined queries into the
multi-scale stream through a second zero gate.

Cross-attention argument order follows the residuals: the side being updated
is always the query side.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Optional

from . import tensor as T
from .attention import (
    AttentionParams,
    FFNParams,
    LayerNorm,
    attention_specs,
    cross_attention,
    ffn,
    ffn_specs,
    gated_residual,
)
from .backbone import VitBackbone, backbone_specs
from .errors import ConfigError, ShapeError
from .head import HeadParams, detect_head, head_specs
from .models import SCALE_FACTORS, AdapterConfig, ModelConfig
from .params import ParamSpec, ParamStore, norm_specs, with_flags
from .spatial_prior import MultiScaleTokens, SPMParams, spatial_prior_specs, spatial_priors
from .tensor import Tensor


logger = logging.getLogger(__name__)

LQ0_NAME = "adapter.lq0"
LQ_INIT_STD = 0.02


@dataclass(frozen=True)
class LearnableQueryState:
    """Queries carried from block to block (LQ_i)."""

    queries: Tensor


@dataclass(frozen=True)
class InjectorParams:
    gamma: Tensor
    norm_vit: LayerNorm
    norm_sp: LayerNorm
    attn: AttentionParams


@dataclass(frozen=True)
class ExtractorParams:
    norm_sp: LayerNorm
    norm_vit: LayerNorm
    attn: AttentionParams
    ffn_norm: LayerNorm
    ffn: FFNParams


@dataclass(frozen=True)
class WritebackParams:
    rho: Tensor
    norm_sp: LayerNorm
    norm_lq: LayerNorm
    attn: AttentionParams


@dataclass(frozen=True)
class QueryPathParams:
    norm_lq: LayerNorm
    norm_vit: LayerNorm
    gather: AttentionParams
    norm_gathered: LayerNorm
    norm_sp: LayerNorm
    refine: AttentionParams
    writeback: Optional[WritebackParams] = None


@dataclass(frozen=True)
class BlockParams:
    index: int
    injector: InjectorParams
    extractor: ExtractorParams
    queries: Optional[QueryPathParams] = None

    @property
    def lq_enabled(self) -> bool:
        return self.queries is not None


def block_prefix(index: int) -> str:
    return f"adapter.blocks.{index}"


def injector_specs(prefix: str, dim: int) -> list[ParamSpec]:
    return (
        [ParamSpec(f"{prefix}.gamma", (dim,), "zeros")]
        + norm_specs(f"{prefix}.norm_vit", dim)
        + norm_specs(f"{prefix}.norm_sp", dim)
        + attention_specs(f"{prefix}.attn", dim)
    )


def extractor_specs(prefix: str, dim: int, ratio: int) -> list[ParamSpec]:
    return (
        norm_specs(f"{prefix}.norm_sp", dim)
        + norm_specs(f"{prefix}.norm_vit", dim)
        + attention_specs(f"{prefix}.attn", dim)
        + norm_specs(f"{prefix}.ffn_norm", dim)
        + ffn_specs(f"{prefix}.ffn", dim, ratio)
    )


def query_path_specs(prefix: str, dim: int, writeback: bool) -> list[ParamSpec]:
    """Parameters one block adds when its learnable queries are enabled."""
    specs = (
        norm_specs(f"{prefix}.norm_lq", dim)
        + norm_specs(f"{prefix}.norm_vit", dim)
        + attention_specs(f"{prefix}.gather", dim)
        + norm_specs(f"{prefix}.norm_gathered", dim)
        + norm_specs(f"{prefix}.norm_sp", dim)
        + attention_specs(f"{prefix}.refine", dim)
    )
    if writeback:
        specs += (
            [ParamSpec(f"{prefix}.writeback.rho", (dim,), "zeros")]
            + norm_specs(f"{prefix}.writeback.norm_sp", dim)
            + norm_specs(f"{prefix}.writeback.norm_lq", dim)
            + attention_specs(f"{prefix}.writeback.attn", dim)
        )
    return specs


def decay_group_count(config: ModelConfig) -> int:
    return math.ceil(config.layers / config.group_size)


def block_group(config: ModelConfig, index: int) -> int:
    """Layer-decay group of block ``index``: the group of its stage's first layer."""
    return (index * (config.layers // config.num_blocks)) // config.group_size


def model_layout(config: ModelConfig) -> list[ParamSpec]:
    """Declare every parameter of backbone, spatial priors, adapter and head.

    The spatial prior module and the initial queries sit in the input-most
    decay group, the head in the output-most one.
    """
    adapter = config.adapter()
    dim = config.dim
    last_group = decay_group_count(config) - 1

    specs = backbone_specs(config.backbone(), config.group_size)
    specs += spatial_prior_specs(dim, group=0, coords=config.spm_coords)
    if adapter.lq_blocks:
        init = "zeros" if adapter.lq_init == "zero" else "normal"
        specs.append(ParamSpec(LQ0_NAME, (adapter.lq_count, dim), init, LQ_INIT_STD, True, 0))
    for index in range(adapter.num_blocks):
        prefix = block_prefix(index)
        block = injector_specs(f"{prefix}.injector", dim) + extractor_specs(
            f"{prefix}.extractor", dim, adapter.ffn_ratio
        )
        if adapter.lq_enabled(index):
            block += query_path_specs(f"{prefix}.lq", dim, adapter.lq_writeback)
        specs += with_flags(block, True, block_group(config, index))
    specs += head_specs(dim, len(SCALE_FACTORS), last_group)
    return specs


def _attn(store: Mapping[str, Tensor], prefix: str, heads: int) -> AttentionParams:
    return AttentionParams.from_store(store, prefix, heads)


def load_block(store: Mapping[str, Tensor], adapter: AdapterConfig, index: int) -> BlockParams:
    prefix = block_prefix(index)
    eps, heads = adapter.ln_eps, adapter.heads

    def norm(name: str) -> LayerNorm:
        return LayerNorm.from_store(store, f"{prefix}.{name}", eps)

    injector = InjectorParams(
        gamma=store[f"{prefix}.injector.gamma"],
        norm_vit=norm("injector.norm_vit"),
        norm_sp=norm("injector.norm_sp"),
        attn=_attn(store, f"{prefix}.injector.attn", heads),
    )
    extractor = ExtractorParams(
        norm_sp=norm("extractor.norm_sp"),
        norm_vit=norm("extractor.norm_vit"),
        attn=_attn(store, f"{prefix}.extractor.attn", heads),
        ffn_norm=norm("extractor.ffn_norm"),
        ffn=FFNParams.from_store(store, f"{prefix}.extractor.ffn"),
    )
    queries = None
    if adapter.lq_enabled(index):
        writeback = None
        if adapter.lq_writeback:
            writeback = WritebackParams(
                rho=store[f"{prefix}.lq.writeback.rho"],
                norm_sp=norm("lq.writeback.norm_sp"),
                norm_lq=norm("lq.writeback.norm_lq"),
                attn=_attn(store, f"{prefix}.lq.writeback.attn", heads),
            )
        queries = QueryPathParams(
            norm_lq=norm("lq.norm_lq"),
            norm_vit=norm("lq.norm_vit"),
            gather=_attn(store, f"{prefix}.lq.gather", heads),
            norm_gathered=norm("lq.norm_gathered"),
            norm_sp=norm("lq.norm_sp"),
            refine=_attn(store, f"{prefix}.lq.refine", heads),
            writeback=writeback,
        )
    return BlockParams(index=index, injector=injector, extractor=extractor, queries=queries)


def inject(f_vit: Tensor, f_sp: MultiScaleTokens, p: BlockParams) -> Tensor:
    """F̄_vit = F_vit + γ ∘ Attention(q=norm(F_vit), kv=norm(F_sp))."""
    if f_vit.shape[1] != f_sp.dim:
        raise ShapeError(f"inject: token dim {f_vit.shape[1]} differs from spatial dim {f_sp.dim}")
    inj = p.injector
    update = cross_attention(inj.norm_vit(f_vit), inj.norm_sp(f_sp.data), inj.attn)
    return gated_residual(f_vit, inj.gamma, update)


def extract(
    f_vit: Tensor,
    f_sp: MultiScaleTokens,
    lq: Optional[LearnableQueryState],
    p: BlockParams,
    injected: Optional[Tensor] = None,
) -> tuple[MultiScaleTokens, Optional[LearnableQueryState]]:
    """Pull backbone tokens into the multi-scale stream and refine the queries.

    ``f_vit`` is the stage output; ``injected`` is the injector output the
    queries gather from (defaults to ``f_vit``).
    """
    if f_vit.shape[1] != f_sp.dim:
        raise ShapeError(f"extract: token dim {f_vit.shape[1]} differs from spatial dim {f_sp.dim}")
    ext = p.extractor
    gathered_sp = cross_attention(ext.norm_sp(f_sp.data), ext.norm_vit(f_vit), ext.attn)
    sp_next = T.add(gathered_sp, ffn(ext.ffn_norm(gathered_sp), ext.ffn))

    if p.queries is None:
        return f_sp.with_data(sp_next), lq
    if lq is None:
        raise ConfigError(f"block {p.index} has learnable queries enabled but no query state")

    qp = p.queries
    injected = f_vit if injected is None else injected
    gathered_lq = cross_attention(qp.norm_lq(lq.queries), qp.norm_vit(injected), qp.gather)
    lq_next = T.add(lq.queries, cross_attention(qp.norm_gathered(gathered_lq), qp.norm_sp(sp_next), qp.refine))

    if qp.writeback is not None:
        wb = qp.writeback
        update = cross_attention(wb.norm_sp(sp_next), wb.norm_lq(lq_next), wb.attn)
        sp_next = gated_residual(sp_next, wb.rho, update)
    return f_sp.with_data(sp_next), LearnableQueryState(lq_next)


class LQAdapterModel:
    """Frozen backbone, spatial prior module, interaction blocks and box head."""

    def __init__(self, config: ModelConfig, store: ParamStore) -> None:
        self.config = config
        self.adapter_config = config.adapter()
        self.params = store
        self.backbone = VitBackbone(config.backbone(), store)
        self.spm = SPMParams.from_store(store)
        self.blocks = tuple(load_block(store, self.adapter_config, i) for i in range(config.num_blocks))
        self.lq0 = store[LQ0_NAME] if LQ0_NAME in store else None
        self.head = HeadParams.from_store(store)

    @classmethod
    def create(cls, config: ModelConfig, seed: Optional[int] = None) -> "LQAdapterModel":
        seed = config.seed if seed is None else seed
        store = ParamStore.initialize(model_layout(config), seed)
        trainable, frozen = store.count()
        logger.debug("Initialized model: %d trainable, %d frozen parameters", trainable, frozen)
        return cls(config, store)

    def with_params(self, store: ParamStore) -> "LQAdapterModel":
        return LQAdapterModel(self.config, store)

    def forward(self, image: Tensor) -> tuple[MultiScaleTokens, Tensor]:
        """Return the final multi-scale features and the final backbone tokens."""
        f_sp = spatial_priors(image, self.spm)
        tokens = self.backbone.patch_embed(image)
        lq = LearnableQueryState(self.lq0) if self.lq0 is not None else None
        for block in self.blocks:
            injected = inject(tokens, f_sp, block)
            tokens = self.backbone.run_stage(injected, block.index)
            f_sp, lq = extract(tokens, f_sp, lq, block, injected=injected)
        return f_sp, tokens

    def predict(self, image: Tensor) -> Tensor:
        f_sp, _ = self.forward(image)
        return detect_head(f_sp, self.head)


def param_count(model: LQAdapterModel) -> tuple[int, int]:
    """(trainable, frozen) scalar counts."""
    return model.params.count()


def component_of(name: str) -> str:
    if name.startswith("backbone."):
        return "backbone"
    if name.startswith("spm."):
        return "spatial_prior"
    if name.startswith("head."):
        return "head"
    if name == LQ0_NAME or ".lq." in name:
        return "learnable_queries"
    if ".injector." in name:
        return "injector"
    return "extractor"


def count_by_component(store: ParamStore) -> dict[str, int]:
    counts: dict[str, int] = defaultdict(int)
    for spec in store.specs:
        counts[component_of(spec.name)] += spec.size
    return dict(counts)
