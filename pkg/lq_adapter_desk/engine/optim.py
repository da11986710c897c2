"""AdamW with decoupled weight decay and layer-wise learning-rate decay."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .params import ParamStore


logger = logging.getLogger(__name__)


def layer_decay_lr(base_lr: float, group_index: int, num_groups: int, factor: float) -> float:
    """base_lr · factor^(K−1−k); groups are ordered input → output."""
    if not 0.0 < factor <= 1.0:
        raise ConfigError(f"layer decay factor must be in (0, 1], got {factor}")
    if not 0 <= group_index < num_groups:
        raise ConfigError(f"group index {group_index} outside 0..{num_groups - 1}")
    return base_lr * factor ** (num_groups - 1 - group_index)


@dataclass
class OptState:
    """Per-parameter moments and the shared step counter.

    Only trainable parameters get moments.
    """

    lr: float
    weight_decay: float
    layer_decay: float = 1.0
    num_groups: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_store(
        cls,
        store: ParamStore,
        lr: float,
        weight_decay: float,
        layer_decay: float = 1.0,
        num_groups: int = 1,
    ) -> "OptState":
        state = cls(lr=lr, weight_decay=weight_decay, layer_decay=layer_decay, num_groups=num_groups)
        for name in store.trainable_names():
            shape = store[name].shape
            state.exp_avg[name] = np.zeros(shape)
            state.exp_avg_sq[name] = np.zeros(shape)
        return state

    def group_lr(self, group_index: int) -> float:
        return layer_decay_lr(self.lr, group_index, self.num_groups, self.layer_decay)

    def group_lrs(self) -> list[float]:
        return [self.group_lr(k) for k in range(self.num_groups)]


def adamw_step(store: ParamStore, grads: Mapping[str, np.ndarray], state: OptState) -> ParamStore:
    """One AdamW update with bias correction; returns the updated store.

    Every gradient is validated before any state changes, so a NaN aborts the
    step cleanly.
    """
    for name, grad in grads.items():
        if name not in state.exp_avg:
            raise ConfigError(f"parameter {name!r} is frozen or unknown to the optimizer")
        if grad.shape != state.exp_avg[name].shape:
            raise ShapeError(f"gradient for {name}: shape {grad.shape} != parameter {state.exp_avg[name].shape}")
        if not np.isfinite(grad).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}; step aborted")

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step

    updates: dict[str, np.ndarray] = {}
    for name, grad in grads.items():
        m = state.beta1 * state.exp_avg[name] + (1.0 - state.beta1) * grad
        v = state.beta2 * state.exp_avg_sq[name] + (1.0 - state.beta2) * grad * grad
        state.exp_avg[name], state.exp_avg_sq[name] = m, v

        lr = state.group_lr(store.spec(name).group)
        weight = store[name].data
        step_dir = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        updates[name] = weight - lr * (step_dir + state.weight_decay * weight)
    return store.replace(updates)
