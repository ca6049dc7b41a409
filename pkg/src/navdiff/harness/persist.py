"""Atomic file writes, canonical JSON, config hashing and versioned checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import torch

CHECKPOINT_FORMAT = "navdiff.checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_json(path: str | Path, obj, canonical: bool = False) -> None:
    text = canonical_json(obj) if canonical else json.dumps(obj, sort_keys=True, indent=2)
    atomic_write_text(path, text + "\n")


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_checkpoint(path: str | Path, state: dict, meta: dict) -> Path:
    """Write ``<path>.pt`` then its JSON sidecar; the sidecar commits the pair."""
    path = Path(path).with_suffix(".pt")
    buf = io.BytesIO()
    torch.save(state, buf)
    blob = buf.getvalue()
    atomic_write_bytes(path, blob)
    sidecar = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        **meta,
    }
    write_json(_sidecar(path), sidecar)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Return (state, sidecar). Nothing is returned unless both files validate."""
    path = Path(path).with_suffix(".pt")
    side = _sidecar(path)
    if not side.exists() or not path.exists():
        raise CheckpointError(f"checkpoint {path} or its sidecar is missing")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupted sidecar {side}: {exc}") from exc
    if not isinstance(meta, dict) or meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{side} is not a navdiff checkpoint sidecar")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    blob = path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != meta.get("blob_sha256"):
        raise CheckpointError(f"checkpoint blob {path} does not match its sidecar hash")
    state = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)
    return state, meta
