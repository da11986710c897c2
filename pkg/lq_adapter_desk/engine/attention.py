"""Multi-head scaled dot-product attention, FFN and zero-gated residuals."""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass

from . import tensor as T
from .errors import ShapeError
from .params import ParamSpec, linear_specs
from .tensor import Tensor


@dataclass(frozen=True)
class Linear:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    @classmethod
    def from_store(cls, store: Mapping[str, Tensor], prefix: str) -> "Linear":
        return cls(store[f"{prefix}.weight"], store[f"{prefix}.bias"])


@dataclass(frozen=True)
class LayerNorm:
    gain: Tensor
    bias: Tensor
    eps: float = 1e-6

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)

    @classmethod
    def from_store(cls, store: Mapping[str, Tensor], prefix: str, eps: float) -> "LayerNorm":
        return cls(store[f"{prefix}.gain"], store[f"{prefix}.bias"], eps)


@dataclass(frozen=True)
class AttentionParams:
    """Projections W_q, W_k, W_v, W_o (D×D, with biases) and the head count."""

    q: Linear
    k: Linear
    v: Linear
    o: Linear
    num_heads: int

    def __post_init__(self) -> None:
        dim = self.q.weight.shape[0]
        if dim % self.num_heads != 0:
            raise ShapeError(f"attention: dim {dim} not divisible by {self.num_heads} heads")

    @property
    def dim(self) -> int:
        return self.q.weight.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @classmethod
    def from_store(cls, store: Mapping[str, Tensor], prefix: str, num_heads: int) -> "AttentionParams":
        return cls(
            q=Linear.from_store(store, f"{prefix}.q"),
            k=Linear.from_store(store, f"{prefix}.k"),
            v=Linear.from_store(store, f"{prefix}.v"),
            o=Linear.from_store(store, f"{prefix}.o"),
            num_heads=num_heads,
        )


@dataclass(frozen=True)
class FFNParams:
    """Two-layer MLP D → D_ff → D with GELU."""

    fc1: Linear
    fc2: Linear

    @classmethod
    def from_store(cls, store: Mapping[str, Tensor], prefix: str) -> "FFNParams":
        return cls(Linear.from_store(store, f"{prefix}.fc1"), Linear.from_store(store, f"{prefix}.fc2"))


def attention_specs(prefix: str, dim: int) -> list[ParamSpec]:
    specs: list[ParamSpec] = []
    for proj in ("q", "k", "v", "o"):
        specs += linear_specs(f"{prefix}.{proj}", dim, dim)
    return specs


def ffn_specs(prefix: str, dim: int, ratio: int) -> list[ParamSpec]:
    return linear_specs(f"{prefix}.fc1", dim, dim * ratio) + linear_specs(f"{prefix}.fc2", dim * ratio, dim)


def cross_attention(q_src: Tensor, kv_src: Tensor, p: AttentionParams) -> Tensor:
    """Softmax(QKᵀ/√d_k)V per head; heads are concatenated and projected by W_o.

    Output has one row per ``q_src`` row.
    """
    if q_src.ndim != 2 or kv_src.ndim != 2:
        raise ShapeError(f"attention: expected 2-D inputs, got {q_src.shape} and {kv_src.shape}")
    if q_src.shape[1] != p.dim or kv_src.shape[1] != p.dim:
        raise ShapeError(
            f"attention: feature dims {q_src.shape[1]} and {kv_src.shape[1]} must both equal {p.dim}"
        )
    if kv_src.shape[0] == 0:
        raise ShapeError("attention: no keys to attend to")

    queries = p.q(q_src)
    keys = p.k(kv_src)
    values = p.v(kv_src)
    inv_sqrt = 1.0 / math.sqrt(p.head_dim)

    heads = []
    for h in range(p.num_heads):
        lo, hi = h * p.head_dim, (h + 1) * p.head_dim
        q_h = T.slice_axis(queries, lo, hi, axis=1)
        k_h = T.slice_axis(keys, lo, hi, axis=1)
        v_h = T.slice_axis(values, lo, hi, axis=1)
        logits = T.scale(T.matmul(q_h, T.transpose(k_h)), inv_sqrt)
        heads.append(T.matmul(T.softmax_lastdim(logits), v_h))
    merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
    return p.o(merged)


def self_attention(x: Tensor, p: AttentionParams) -> Tensor:
    return cross_attention(x, x, p)


def ffn(x: Tensor, p: FFNParams) -> Tensor:
    if x.ndim != 2 or x.shape[1] != p.fc1.weight.shape[0]:
        raise ShapeError(f"ffn: input {x.shape} does not match fc1 weight {p.fc1.weight.shape}")
    return p.fc2(T.gelu(p.fc1(x)))


def gated_residual(residual: Tensor, gate: Tensor, update: Tensor) -> Tensor:
    """residual + gate ∘ update, gate applied per channel.

    With a zero gate the result is the residual, value for value.
    """
    if gate.shape != (residual.shape[-1],):
        raise ShapeError(f"gate {gate.shape} does not match channel count {residual.shape[-1]}")
    return T.add(residual, T.mul(update, gate))
