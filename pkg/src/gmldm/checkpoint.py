"""Single-file checkpoint container: named arrays + config + format version."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import torch

from .errors import FormatError, MissingArtifactError, UnknownVersionError

CHECKPOINT_VERSION = 1


def save(path, kind: str, config: dict, params: dict, extra: Optional[dict] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "params": {k: v.detach().clone() for k, v in params.items()},
        "extra": extra or {},
    }
    torch.save(doc, path)


def load(path, kind: Optional[str] = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing checkpoint: {path}")
    try:
        doc = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:  # torch raises a zoo of unpickling errors
        raise FormatError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise FormatError(f"{path} is not a gmldm checkpoint")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise UnknownVersionError(f"unknown checkpoint version {doc['format_version']!r}")
    if kind is not None and doc.get("kind") != kind:
        raise FormatError(f"{path} holds a {doc.get('kind')!r} checkpoint, expected {kind!r}")
    return doc
