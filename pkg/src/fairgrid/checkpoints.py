"""Versioned checkpoint files for model parameters and training state."""

from __future__ import annotations

import os
from pathlib import Path

import torch

from .errors import CheckpointFormatError

CHECKPOINT_VERSION = 1

KIND_FAIR_DEMAND = "fair-demand"
KIND_DENOISER = "denoiser"


def save_checkpoint(path: str | Path, kind: str, payload: dict) -> None:
    """Write a checkpoint atomically with a version/kind header."""
    path = Path(path)
    obj = {"format_version": CHECKPOINT_VERSION, "kind": kind}
    obj.update(payload)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, expected_kind: str | None = None) -> dict:
    path = Path(path)
    try:
        obj = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(obj, dict) or "format_version" not in obj:
        raise CheckpointFormatError(f"{path} is not a fairgrid checkpoint")
    if obj["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: checkpoint version {obj['format_version']} "
            f"does not match supported version {CHECKPOINT_VERSION}"
        )
    if expected_kind is not None and obj.get("kind") != expected_kind:
        raise CheckpointFormatError(
            f"{path}: expected a {expected_kind!r} checkpoint, found {obj.get('kind')!r}"
        )
    return obj
