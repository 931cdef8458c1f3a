"""Shared helpers: deterministic mode, hashing and small tensor utilities."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import random
from typing import Any, Iterator

import numpy as np
import torch

logger = logging.getLogger("ckl")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


@contextlib.contextmanager
def deterministic_mode(seed: int | None = None) -> Iterator[None]:
    """Single-threaded, deterministic-algorithm execution for reproducible runs.

    Restores the previous thread count and determinism flag on exit.
    """
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    if seed is not None:
        seed_everything(seed)
    try:
        yield
    finally:
        torch.set_num_threads(prev_threads)
        torch.use_deterministic_algorithms(prev_det)


def stable_hash(obj: Any) -> str:
    """sha256 of a JSON-serialisable object with sorted keys."""
    payload = json.dumps(obj, sort_keys=True, default=_json_default).encode()
    return hashlib.sha256(payload).hexdigest()


def git_blob_hash(data: bytes) -> str:
    """Content hash in the same form ``git hash-object`` produces."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def _json_default(o: Any) -> Any:
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, set)):
        return list(o)
    if isinstance(o, torch.Tensor):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def flatten_per_sample(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], -1)
