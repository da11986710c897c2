"""Named parameter declarations, initialization and the immutable store."""

from __future__ import annotations

import hashlib
import logging
import math
import zlib
from collections.abc import Mapping
from dataclasses import dataclass, replace
from typing import Iterator, Literal

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor


logger = logging.getLogger(__name__)

InitKind = Literal["zeros", "ones", "normal"]


@dataclass(frozen=True)
class ParamSpec:
    """Declaration of one parameter tensor."""

    name: str
    shape: tuple[int, ...]
    init: InitKind = "normal"
    std: float = 0.02
    trainable: bool = True
    group: int = 0

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def linear_specs(prefix: str, fan_in: int, fan_out: int, **kwargs) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.weight", (fan_in, fan_out), "normal", fan_in**-0.5, **kwargs),
        ParamSpec(f"{prefix}.bias", (fan_out,), "zeros", **kwargs),
    ]


def norm_specs(prefix: str, dim: int, **kwargs) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.gain", (dim,), "ones", **kwargs),
        ParamSpec(f"{prefix}.bias", (dim,), "zeros", **kwargs),
    ]


def conv_specs(prefix: str, c_in: int, c_out: int, k: int, **kwargs) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.kernel", (c_out, c_in, k, k), "normal", (c_in * k * k) ** -0.5, **kwargs),
        ParamSpec(f"{prefix}.bias", (c_out,), "zeros", **kwargs),
    ]


def with_flags(specs: list[ParamSpec], trainable: bool, group: int) -> list[ParamSpec]:
    return [replace(spec, trainable=trainable, group=group) for spec in specs]


def _rng_for(seed: int, name: str) -> np.random.Generator:
    # Keyed by name so a tensor's initial value ignores which other tensors exist.
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def init_tensor(spec: ParamSpec, seed: int) -> np.ndarray:
    if spec.init == "zeros":
        return np.zeros(spec.shape)
    if spec.init == "ones":
        return np.ones(spec.shape)
    return _rng_for(seed, spec.name).normal(0.0, spec.std, size=spec.shape)


class ParamStore(Mapping):
    """Immutable name → Tensor mapping with trainable/frozen flags.

    Trainable tensors are created with ``requires_grad=True``; frozen ones are
    still differentiable *through* but never receive a gradient themselves.
    """

    def __init__(self, specs: list[ParamSpec], arrays: Mapping[str, np.ndarray]) -> None:
        self._specs = {spec.name: spec for spec in specs}
        if len(self._specs) != len(specs):
            raise ValueError("duplicate parameter names in layout")
        self._tensors: dict[str, Tensor] = {}
        for spec in specs:
            array = arrays[spec.name]
            if tuple(array.shape) != spec.shape:
                raise CheckpointError(
                    f"parameter {spec.name}: shape {tuple(array.shape)} does not match declared {spec.shape}"
                )
            self._tensors[spec.name] = Tensor(array, requires_grad=spec.trainable)

    @classmethod
    def initialize(cls, specs: list[ParamSpec], seed: int) -> "ParamStore":
        return cls(specs, {spec.name: init_tensor(spec, seed) for spec in specs})

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    @property
    def specs(self) -> list[ParamSpec]:
        return list(self._specs.values())

    def spec(self, name: str) -> ParamSpec:
        return self._specs[name]

    def trainable_names(self) -> list[str]:
        return [name for name, spec in self._specs.items() if spec.trainable]

    def frozen_names(self) -> list[str]:
        return [name for name, spec in self._specs.items() if not spec.trainable]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self._tensors.items()}

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamStore":
        """New store with ``updates`` swapped in; flags and order are kept.

        Unchanged tensors are shared with this store.
        """
        unknown = set(updates) - set(self._specs)
        if unknown:
            raise KeyError(f"unknown parameters {sorted(unknown)}")
        tensors = dict(self._tensors)
        for name, array in updates.items():
            spec = self._specs[name]
            if tuple(np.shape(array)) != spec.shape:
                raise CheckpointError(
                    f"parameter {name}: shape {tuple(np.shape(array))} does not match declared {spec.shape}"
                )
            tensors[name] = Tensor(array, requires_grad=spec.trainable)
        store = ParamStore.__new__(ParamStore)
        store._specs = self._specs
        store._tensors = tensors
        return store

    def with_all_frozen(self) -> "ParamStore":
        specs = [replace(spec, trainable=False) for spec in self.specs]
        return ParamStore(specs, self.arrays())

    def named_gradients(self, grads: Mapping[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
        """Translate a tape gradient map into parameter names.

        Trainable parameters that the loss does not reach get an explicit zero.
        """
        named = {}
        for name in self.trainable_names():
            tensor = self._tensors[name]
            named[name] = grads.get(tensor, np.zeros(tensor.shape))
        return named

    def count(self) -> tuple[int, int]:
        """Return (trainable, frozen) scalar counts."""
        trainable = sum(spec.size for spec in self._specs.values() if spec.trainable)
        frozen = sum(spec.size for spec in self._specs.values() if not spec.trainable)
        return trainable, frozen

    def frozen_checksum(self) -> str:
        digest = hashlib.sha256()
        for name in self.frozen_names():
            digest.update(name.encode("utf-8"))
            digest.update(tensor_digest_bytes(self._tensors[name].data))
        return digest.hexdigest()


def tensor_digest_bytes(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f8").tobytes()


def tensor_hash(array: np.ndarray) -> str:
    return hashlib.sha256(tensor_digest_bytes(array)).hexdigest()
