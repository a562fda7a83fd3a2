"""Checkpoint persistence: JSON manifest plus raw little-endian tensors.

Layout under the checkpoint directory:

* ``manifest.json`` — format version, model config, seed provenance,
  optional extra metadata (e.g. the class vocabulary), and one entry per
  tensor recording its shape, dtype, and payload file.
* ``tensors/<name>.f64`` — the tensor's values as raw little-endian
  64-bit floats in row-major order.

Payloads keep the model's full 64-bit precision so a save/load round
trip reproduces forward outputs bit-exactly.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import (
    CheckpointPayloadError,
    CheckpointShapeError,
    CheckpointVersionError,
)
from .model import ModelConfig, ModelParams

FORMAT_VERSION = 1
_DTYPE = "<f8"


def save_checkpoint(model: ModelParams, path: str, extra: dict | None = None) -> None:
    tensor_dir = os.path.join(path, "tensors")
    os.makedirs(tensor_dir, exist_ok=True)
    manifest: dict = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "init_seed": model.init_seed,
        "extra": extra or {},
        "tensors": {},
    }
    for name, t in model.named_parameters():
        fname = f"{name}.f64"
        manifest["tensors"][name] = {
            "shape": list(t.data.shape),
            "dtype": _DTYPE,
            "file": f"tensors/{fname}",
        }
        with open(os.path.join(tensor_dir, fname), "wb") as f:
            f.write(np.ascontiguousarray(t.data, dtype=_DTYPE).tobytes())
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def load_checkpoint(path: str) -> tuple[ModelParams, dict]:
    """Rebuild a model from a checkpoint directory; returns (model, extra)."""
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {version!r} unsupported (expected {FORMAT_VERSION})"
        )
    config = ModelConfig.from_dict(manifest["model_config"])
    model = ModelParams.init(config, seed=manifest.get("init_seed") or 0)
    expected = dict(model.named_parameters())
    stored = manifest["tensors"]
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        surplus = sorted(set(stored) - set(expected))
        raise CheckpointShapeError(
            f"tensor set mismatch: missing {missing}, unexpected {surplus}"
        )
    for name, entry in stored.items():
        shape = tuple(entry["shape"])
        if shape != expected[name].data.shape:
            raise CheckpointShapeError(
                f"{name}: manifest shape {shape} vs model shape {expected[name].data.shape}"
            )
        with open(os.path.join(path, entry["file"]), "rb") as f:
            raw = f.read()
        n_values = int(np.prod(shape)) if shape else 1
        if len(raw) != 8 * n_values:
            raise CheckpointPayloadError(
                f"{name}: payload has {len(raw)} bytes, expected {8 * n_values}"
            )
        expected[name].data[...] = np.frombuffer(raw, dtype=_DTYPE).reshape(shape)
    return model, manifest.get("extra", {})
