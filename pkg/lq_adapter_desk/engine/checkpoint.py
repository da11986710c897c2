"""Checkpoint = UTF-8 JSON manifest + raw little-endian float64 blob.

Manifest entries map each parameter name to its shape, element offset into
the blob, trainable flag and (for frozen tensors) a sha256 of its bytes.
Multi-scale tokens are serialized 1/8 first, then 1/16, then 1/32.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError

from .adapter import LQAdapterModel, model_layout
from .dataset import write_atomic
from .errors import CheckpointError
from .models import ModelConfig
from .params import ParamStore, tensor_hash


logger = logging.getLogger(__name__)

FORMAT = "lq-adapter-desk/1"
MANIFEST_FILE = "checkpoint.json"
BLOB_FILE = "checkpoint.bin"
DTYPE = "<f8"
SCALE_ORDER = ["1/8", "1/16", "1/32"]


def _manifest_path(path: Path) -> Path:
    path = Path(path)
    return path / MANIFEST_FILE if path.is_dir() or not path.suffix else path


def save_checkpoint(model: LQAdapterModel, out_dir: Path) -> Path:
    """Write manifest and blob into ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    store = model.params
    entries = {}
    chunks = []
    offset = 0
    for spec in store.specs:
        data = np.ascontiguousarray(store[spec.name].data, dtype=DTYPE)
        entries[spec.name] = {
            "shape": list(spec.shape),
            "offset": offset,
            "trainable": spec.trainable,
            "frozen_hash": None if spec.trainable else tensor_hash(data),
        }
        chunks.append(data.tobytes())
        offset += spec.size

    manifest = {
        "format": FORMAT,
        "config": model.config.model_dump(mode="json"),
        "dtype": DTYPE,
        "scale_order": SCALE_ORDER,
        "blob": BLOB_FILE,
        "total_elements": offset,
        "parameters": entries,
    }
    write_atomic(out_dir / BLOB_FILE, b"".join(chunks))
    manifest_path = out_dir / MANIFEST_FILE
    write_atomic(manifest_path, (json.dumps(manifest, indent=2) + "\n").encode("utf-8"))
    logger.info("Saved checkpoint with %d tensors to %s", len(entries), out_dir)
    return manifest_path


def _architecture(config: ModelConfig) -> dict:
    shape_keys = (
        "image_size", "patch_size", "dim", "layers", "num_blocks", "heads",
        "ffn_ratio", "lq_writeback", "spm_coords",
    )
    arch = {key: getattr(config, key) for key in shape_keys}
    arch["lq_count"] = config.adapter().lq_count
    arch["lq_blocks"] = config.resolved_lq_blocks
    return arch


def load_checkpoint(path: Path, config: Optional[ModelConfig] = None) -> LQAdapterModel:
    """Read and validate a checkpoint; nothing is built unless every check passes.

    When ``config`` is given its architecture must match the stored one.
    """
    manifest_path = _manifest_path(path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"Cannot read checkpoint manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")

    try:
        stored = ModelConfig.model_validate(manifest["config"])
    except (KeyError, ValidationError) as exc:
        raise CheckpointError(f"{manifest_path}: invalid stored config: {exc}") from exc
    if config is not None and _architecture(config) != _architecture(stored):
        raise CheckpointError(
            f"{manifest_path}: checkpoint architecture {_architecture(stored)} "
            f"does not match config {_architecture(config)}"
        )
    config = config or stored

    entries = manifest.get("parameters", {})
    layout = model_layout(config)
    names = [spec.name for spec in layout]
    if list(entries) != names:
        missing = sorted(set(names) - set(entries))
        extra = sorted(set(entries) - set(names))
        raise CheckpointError(
            f"{manifest_path}: parameters do not match config (missing {missing}, unexpected {extra})"
        )

    blob_path = manifest_path.parent / manifest.get("blob", BLOB_FILE)
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Cannot read checkpoint blob {blob_path}: {exc}") from exc
    total = sum(spec.size for spec in layout)
    if manifest.get("total_elements") != total or len(blob) != total * 8:
        raise CheckpointError(
            f"{blob_path}: blob holds {len(blob)} bytes, manifest declares "
            f"{manifest.get('total_elements')} elements, layout needs {total * 8} bytes"
        )

    values = np.frombuffer(blob, dtype=DTYPE)
    arrays = {}
    specs = []
    expected_offset = 0
    for spec in layout:
        entry = entries[spec.name]
        if tuple(entry["shape"]) != spec.shape:
            raise CheckpointError(f"{spec.name}: stored shape {entry['shape']} != config shape {list(spec.shape)}")
        if entry["offset"] != expected_offset:
            raise CheckpointError(f"{spec.name}: offset {entry['offset']} breaks contiguity (expected {expected_offset})")
        chunk = values[expected_offset : expected_offset + spec.size].reshape(spec.shape)
        if not entry["trainable"] and entry.get("frozen_hash") != tensor_hash(chunk):
            raise CheckpointError(f"{spec.name}: frozen tensor hash mismatch")
        arrays[spec.name] = chunk.astype(np.float64)
        specs.append(replace(spec, trainable=bool(entry["trainable"])))
        expected_offset += math.prod(spec.shape)

    model = LQAdapterModel(config, ParamStore(specs, arrays))
    logger.info("Loaded checkpoint %s", manifest_path)
    return model
