"""Dataset manifests (JSONL), PGM images and atomic file writes."""

from __future__ import annotations

import io
import json
import logging
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError

from .errors import DataError
from .models import Sample
from .tensor import Tensor


logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


def write_atomic(path: Path, payload: bytes) -> None:
    """Write ``payload`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise DataError(f"Cannot write to {path.parent}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except OSError as exc:
        Path(tmp_name).unlink(missing_ok=True)
        raise DataError(f"Cannot write {path}: {exc}") from exc


def encode_pgm(pixels: np.ndarray) -> bytes:
    """8-bit grayscale array → binary PGM bytes."""
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise ValueError(f"PGM pixels must be a 2-D uint8 array, got {pixels.dtype} {pixels.shape}")
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="PPM")
    return buffer.getvalue()


def read_pgm(path: Path) -> np.ndarray:
    """Read an 8-bit grayscale PGM as a uint8 array."""
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise DataError(f"{path}: expected 8-bit grayscale PGM, got mode {img.mode}")
            return np.asarray(img, dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"Cannot read image {path}: {exc}") from exc


def normalize_image(pixels: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1]; a flat image maps to zeros."""
    values = pixels.astype(np.float64)
    low, high = values.min(), values.max()
    if high == low:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def load_image(path: Path) -> Tensor:
    """PGM file → normalized 1×H×W tensor."""
    pixels = normalize_image(read_pgm(path))
    return Tensor(pixels[None, :, :])


def write_manifest(path: Path, samples: list[Sample]) -> None:
    lines = [json.dumps(sample.to_record()) for sample in samples]
    write_atomic(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_dataset(manifest: Path) -> list[Sample]:
    """Parse a JSONL manifest; image paths are resolved against its directory."""
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_NAME
    try:
        text = manifest.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"Cannot read dataset manifest {manifest}: {exc}") from exc

    samples = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            sample = Sample.model_validate_json(line)
        except ValidationError as exc:
            raise DataError(f"{manifest}:{line_no}: invalid sample: {exc}") from exc
        image = Path(sample.image)
        if not image.is_absolute():
            image = manifest.parent / image
        if not image.is_file():
            raise DataError(f"{manifest}:{line_no}: image {image} does not exist")
        samples.append(sample.model_copy(update={"image": str(image)}))
    if not samples:
        raise DataError(f"Dataset {manifest} is empty")
    logger.info("Loaded %d samples from %s", len(samples), manifest)
    return samples


def split_dataset(samples: list[Sample], val_fraction: float) -> tuple[list[Sample], list[Sample]]:
    """Deterministic split: the trailing fraction is validation.

    With a zero fraction, or too few samples to spare one, the training set
    doubles as the validation set.
    """
    n_val = int(round(len(samples) * val_fraction))
    if n_val == 0 or n_val >= len(samples):
        return samples, samples
    return samples[:-n_val], samples[-n_val:]
