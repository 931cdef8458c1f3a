"""Checkpoint directories: ``manifest.json`` plus a raw little-endian weight blob."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .._utils import git_blob_hash
from .architectures import ArchitectureSpec
from .core import Classifier, build_model

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"

_DTYPES = {torch.float32: "float32", torch.float64: "float64"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    model: Classifier,
    path: str | os.PathLike,
    training_config: dict | None = None,
) -> Path:
    """Write ``model`` into directory ``path`` (created if needed)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = model.net.state_dict()
    entries, blobs = [], []
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        if arr.dtype not in (np.float32, np.float64):
            raise CheckpointError(f"parameter {name} has unsupported dtype {arr.dtype}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        **model.spec.to_dict(),
        "dataset_id": model.trained_on,
        "training_config_hash": model.training_config_hash,
        "training_config": training_config,
        "byte_order": "little",
        "parameters": entries,
    }
    (path / WEIGHTS).write_bytes(b"".join(blobs))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: str | os.PathLike) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as e:
        raise CheckpointError(f"no {MANIFEST} in {path}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"malformed manifest {path / MANIFEST}: {e}") from e
    if "format_version" not in manifest:
        raise CheckpointError(f"{path / MANIFEST} lacks format_version")
    if manifest["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {manifest['format_version']}")
    return manifest


def load_checkpoint(path: str | os.PathLike, arch_id: str | None = None) -> Classifier:
    """Rebuild the classifier stored at ``path``.

    If ``arch_id`` is given it must match the manifest.
    """
    path = Path(path)
    manifest = read_manifest(path)
    if arch_id is not None and manifest["arch_id"] != arch_id:
        raise CheckpointError(f"checkpoint {path} holds {manifest['arch_id']!r}, not {arch_id!r}")
    spec = ArchitectureSpec.from_dict(manifest)
    model = build_model(spec, seed=0)
    raw = (path / WEIGHTS).read_bytes()
    state = model.net.state_dict()
    names = [e["name"] for e in manifest["parameters"]]
    if names != list(state.keys()):
        raise CheckpointError(f"parameter list in {path} does not match architecture {spec.arch_id}")
    offset = 0
    new_state = {}
    for e in manifest["parameters"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path / WEIGHTS} is truncated")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(e["shape"])
        new_state[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).to(state[e["name"]].dtype)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path / WEIGHTS} has {len(raw) - offset} trailing bytes")
    model.net.load_state_dict(new_state)
    model.trained_on = manifest.get("dataset_id")
    model.training_config_hash = manifest.get("training_config_hash")
    model.eval()
    return model


def checkpoint_hash(path: str | os.PathLike) -> str:
    """git-style content hash over manifest and weights."""
    path = Path(path)
    return git_blob_hash((path / MANIFEST).read_bytes() + (path / WEIGHTS).read_bytes())
