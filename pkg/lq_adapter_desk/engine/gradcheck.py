"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from . import tensor as T
from .adapter import LQ0_NAME, LQAdapterModel
from .errors import ConfigError
from .head import detect_head, pooled_features
from .models import ModelConfig
from .tensor import Tape, Tensor


logger = logging.getLogger(__name__)

FD_STEP = 1e-5
REL_FLOOR = 1e-6
GATE_STD = 0.5


def desk_gradcheck_config(image_size: int = 32) -> ModelConfig:
    """Two-block, D=8 geometry; 32 is the smallest size with all three spatial scales."""
    try:
        return ModelConfig(image_size=image_size, patch_size=16, dim=8, layers=2, num_blocks=2, heads=2, ffn_ratio=2)
    except ValidationError as exc:
        raise ConfigError(f"Invalid gradcheck geometry: {exc}") from exc


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def error_floor(magnitude: float) -> float:
    """Denominator floor for a loss of the given magnitude.

    Central-difference round-off grows with |loss|, so gradients far below
    it are compared on an absolute scale.
    """
    return REL_FLOOR * max(1.0, abs(magnitude))


def sample_indices(rng: np.random.Generator, size: int, points: int) -> np.ndarray:
    if points >= size:
        return np.arange(size)
    return np.sort(rng.choice(size, size=points, replace=False))


def check_function(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    points: int = 10,
    seed: int = 0,
    h: float = FD_STEP,
) -> float:
    """Max relative error between tape and central-difference gradients.

    ``fn`` maps input tensors to a single-element tensor. Up to ``points``
    coordinates per input are checked.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    with Tape() as tape:
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        output = fn(*leaves)
        grads = tape.backward(output)

    floor = error_floor(output.item())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for position, (leaf, base) in enumerate(zip(leaves, arrays)):
        analytic = grads.get(leaf, np.zeros(base.shape)).reshape(-1)
        for index in sample_indices(rng, base.size, points):
            numeric = _central_difference(
                lambda shifted: fn(*[Tensor(shifted if i == position else a) for i, a in enumerate(arrays)]).item(),
                base,
                index,
                h,
            )
            worst = max(worst, relative_error(analytic[index], numeric, floor))
    return worst


def _central_difference(value_at: Callable[[np.ndarray], float], base: np.ndarray, index: int, h: float) -> float:
    plus = base.copy().reshape(-1)
    minus = base.copy().reshape(-1)
    plus[index] += h
    minus[index] -= h
    return (value_at(plus.reshape(base.shape)) - value_at(minus.reshape(base.shape))) / (2.0 * h)


@dataclass(frozen=True)
class ParamCheck:
    name: str
    checked: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def perturb_gates(model: LQAdapterModel, seed: int) -> LQAdapterModel:
    """Replace zero-initialized gates (γ, ρ) and initial queries with random values.

    At the zero init those paths carry no gradient, so a check there would
    prove nothing about them.
    """
    rng = np.random.default_rng(seed)
    updates = {}
    for name in model.params.trainable_names():
        if name.endswith(".gamma") or name.endswith(".rho") or name == LQ0_NAME:
            updates[name] = rng.normal(0.0, GATE_STD, size=model.params[name].shape)
    return model.with_params(model.params.replace(updates))


def _weighted_terms(model: LQAdapterModel, image: Tensor, weights: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    f_sp, _ = model.forward(image)
    return T.mul(pooled_features(f_sp), weights[0]), T.mul(detect_head(f_sp, model.head), weights[1])


def pooled_loss(model: LQAdapterModel, image: Tensor, weights: tuple[Tensor, Tensor]) -> Tensor:
    """Fixed random projection of pooled multi-scale features plus head outputs."""
    pooled, head = _weighted_terms(model, image, weights)
    return T.add(T.sum_all(pooled), T.sum_all(head))


def loss_weights(model: LQAdapterModel, seed: int) -> tuple[Tensor, Tensor]:
    rng = np.random.default_rng(seed)
    width = 3 * model.config.dim
    return Tensor(rng.normal(size=width)), Tensor(rng.normal(size=4))


def check_model(
    model: LQAdapterModel,
    image: Tensor,
    points: int = 10,
    tol: float = 1e-4,
    seed: int = 0,
    h: float = FD_STEP,
    names: Optional[Sequence[str]] = None,
    progress_callback: Optional[Callable[[int, int, str], None]] = None,
) -> list[ParamCheck]:
    """Compare every trainable parameter's gradient with central differences.

    The error floor follows the summed magnitude of the loss terms, which
    bounds the round-off of each difference quotient.
    """
    weights = loss_weights(model, seed)
    with Tape() as tape:
        pooled, head = _weighted_terms(model, image, weights)
        grads = model.params.named_gradients(tape.backward(T.add(T.sum_all(pooled), T.sum_all(head))))
    floor = error_floor(float(np.abs(pooled.numpy()).sum() + np.abs(head.numpy()).sum()))

    names = list(names) if names is not None else model.params.trainable_names()
    rng = np.random.default_rng(seed)
    results = []
    for position, name in enumerate(names):
        base = model.params[name].numpy()

        def value_at(shifted: np.ndarray, name: str = name) -> float:
            moved = model.with_params(model.params.replace({name: shifted}))
            return pooled_loss(moved, image, weights).item()

        analytic = grads[name].reshape(-1)
        indices = sample_indices(rng, base.size, points)
        worst = max(relative_error(analytic[i], _central_difference(value_at, base, i, h), floor) for i in indices)
        results.append(ParamCheck(name=name, checked=len(indices), max_rel_error=worst, tol=tol))
        if progress_callback:
            progress_callback(position + 1, len(names), name)
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning("Gradient check failed for %d tensors: %s", len(failed), ", ".join(failed[:5]))
    return results
