"""Checkpoints: ``manifest.json`` plus one little-endian float32 file per tensor."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np
import torch

CHECKPOINT_FORMAT = "callikit.checkpoint/v1"


class CheckpointError(ValueError):
    pass


def _to_bytes(t: Union[torch.Tensor, np.ndarray]) -> tuple[bytes, list[int]]:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    a = np.ascontiguousarray(np.asarray(t, dtype="<f4"))
    return a.tobytes(), list(a.shape)


def save_checkpoint(
    path: Union[str, Path],
    model_type: str,
    config: Mapping[str, Any],
    tensors: Mapping[str, Union[torch.Tensor, np.ndarray]],
    meta: Optional[Mapping[str, Any]] = None,
) -> str:
    """Write a checkpoint directory and return its digest.

    The digest is the sha256 of the manifest, which embeds every tensor's
    hash, so two checkpoints are identical iff their digests match.
    """
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        data, shape = _to_bytes(tensors[name])
        fname = f"tensors/{name}.f32"
        (path / fname).write_bytes(data)
        entries.append(
            {"name": name, "shape": shape, "dtype": "float32-le", "file": fname, "sha256": hashlib.sha256(data).hexdigest()}
        )
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "model_type": model_type,
        "config": dict(config),
        "tensors": entries,
        "meta": dict(meta or {}),
    }
    blob = json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")
    (path / "manifest.json").write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def checkpoint_digest(path: Union[str, Path]) -> str:
    return hashlib.sha256((Path(path) / "manifest.json").read_bytes()).hexdigest()


def load_checkpoint(
    path: Union[str, Path], model_type: Optional[str] = None
) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return ``(manifest, tensors)``; tensor bytes are checked against their hashes."""
    path = Path(path)
    mfile = path / "manifest.json"
    if not mfile.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mfile}")
    manifest = json.loads(mfile.read_text(encoding="utf-8"))
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    if model_type is not None and manifest.get("model_type") != model_type:
        raise CheckpointError(f"checkpoint holds {manifest.get('model_type')!r}, expected {model_type!r}")
    tensors = {}
    for e in manifest["tensors"]:
        data = (path / e["file"]).read_bytes()
        if hashlib.sha256(data).hexdigest() != e["sha256"]:
            raise CheckpointError(f"content hash mismatch for tensor {e['name']}")
        a = np.frombuffer(data, dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(a.astype(np.float32))
    return manifest, tensors
