"""Dataset ingestion.

Images are kept as uint8 arrays and converted to floats in [0, 1]
(byte / 255) only when batches are drawn, so every pixel sits on the
k/255 grid.

CIFAR is read from ``$CKL_DATA_DIR`` (or an explicit ``data_dir``) in one
of three layouts, tried in this order:

* the internal format written by :func:`convert_cifar`
  (``<dataset>_<split>.npz``),
* the standard binary distribution (``cifar-10-batches-bin/``,
  ``cifar-100-binary/``),
* the python-pickle distribution (``cifar-10-batches-py/``,
  ``cifar-100-python/``).
"""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .core import ImageBatch

CIFAR_INFO = {
    # dataset id: (num_classes, train size, test size)
    "cifar10": (10, 50_000, 10_000),
    "cifar100": (100, 50_000, 10_000),
}
SPLITS = ("train", "test")
_IMAGE_BYTES = 3 * 32 * 32


class DatasetNotFoundError(FileNotFoundError):
    pass


class DatasetCorruptError(ValueError):
    pass


@dataclass
class ImageDataset:
    """An in-memory image classification dataset stored as uint8."""

    images: np.ndarray  # N x C x H x W, uint8
    labels: np.ndarray  # N, int64
    num_classes: int
    dataset_id: str
    ids: np.ndarray | None = None

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise ValueError("images must be a uint8 array of shape N x C x H x W")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.images):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.ids is None:
            self.ids = np.arange(len(self.images), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "ImageDataset":
        """Rows selected by an index array, slice, or a leading count."""
        if isinstance(index, int):
            index = slice(0, index)
        return ImageDataset(
            self.images[index], self.labels[index], self.num_classes, self.dataset_id, self.ids[index]
        )

    def stratified_subset(self, n: int, seed: int = 0) -> "ImageDataset":
        """``n`` samples with (as near as possible) equal counts per class."""
        rng = np.random.default_rng(seed)
        per_class = n // self.num_classes
        picked = []
        for k in range(self.num_classes):
            idx = np.flatnonzero(self.labels == k)
            picked.append(rng.permutation(idx)[:per_class])
        picked = np.concatenate(picked)
        rest = np.setdiff1d(np.arange(len(self)), picked)
        picked = np.concatenate([picked, rng.permutation(rest)[: n - len(picked)]])
        return self.subset(np.sort(picked))

    def as_batch(self, dtype: torch.dtype = torch.float32) -> ImageBatch:
        return self._batch(np.arange(len(self)), dtype)

    def _batch(self, index: np.ndarray, dtype: torch.dtype) -> ImageBatch:
        pixels = torch.from_numpy(self.images[index]).to(dtype) / 255.0
        return ImageBatch(pixels, torch.from_numpy(self.labels[index]), torch.from_numpy(self.ids[index]))

    def batches(
        self,
        batch_size: int,
        shuffle: bool = False,
        seed: int | None = None,
        dtype: torch.dtype = torch.float32,
        drop_last: bool = False,
    ) -> Iterator[ImageBatch]:
        order = np.arange(len(self))
        if shuffle:
            order = np.random.default_rng(seed).permutation(len(self))
        stop = len(order) - (len(order) % batch_size if drop_last else 0)
        for start in range(0, stop, batch_size):
            yield self._batch(order[start : start + batch_size], dtype)

    def __iter__(self) -> Iterator[ImageBatch]:
        return self.batches(256)


def data_root(data_dir: str | os.PathLike | None = None) -> Path:
    if data_dir is not None:
        return Path(data_dir)
    env = os.environ.get("CKL_DATA_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "ckl" / "data"


def load_dataset(
    dataset_id: str,
    split: str = "train",
    data_dir: str | os.PathLike | None = None,
    **params,
) -> ImageDataset:
    """Load ``cifar10``, ``cifar100`` or ``synthetic`` data for one split.

    ``synthetic`` takes keyword parameters, see :func:`make_synthetic`.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    if dataset_id == "synthetic":
        return make_synthetic(split=split, **params)
    if dataset_id not in CIFAR_INFO:
        raise ValueError(f"unknown dataset {dataset_id!r}")
    root = data_root(data_dir)
    internal = root / f"{dataset_id}_{split}.npz"
    if internal.exists():
        return _load_internal(internal, dataset_id)
    for reader in (_read_cifar_binary, _read_cifar_pickle):
        found = reader(root, dataset_id, split)
        if found is not None:
            images, labels = found
            return ImageDataset(images, labels, CIFAR_INFO[dataset_id][0], dataset_id)
    raise DatasetNotFoundError(
        f"{dataset_id} {split} split not found under {root} "
        f"(expected {internal.name}, the binary or the python distribution; set CKL_DATA_DIR)"
    )


def _load_internal(path: Path, dataset_id: str) -> ImageDataset:
    try:
        with np.load(path) as z:
            images, labels = z["images"], z["labels"]
    except (OSError, KeyError, ValueError) as e:
        raise DatasetCorruptError(f"cannot read {path}: {e}") from e
    return ImageDataset(images, labels, CIFAR_INFO[dataset_id][0], dataset_id)


def _binary_files(root: Path, dataset_id: str, split: str) -> list[Path] | None:
    if dataset_id == "cifar10":
        base = root / "cifar-10-batches-bin"
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    else:
        base = root / "cifar-100-binary"
        names = [f"{split}.bin"]
    if not base.is_dir():
        return None
    return [base / n for n in names]


def _read_cifar_binary(root: Path, dataset_id: str, split: str):
    files = _binary_files(root, dataset_id, split)
    if files is None:
        return None
    label_bytes = 1 if dataset_id == "cifar10" else 2  # cifar100 records are (coarse, fine)
    record = label_bytes + _IMAGE_BYTES
    images, labels = [], []
    for f in files:
        if not f.exists():
            raise DatasetNotFoundError(f"missing CIFAR file {f}")
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size == 0 or raw.size % record:
            raise DatasetCorruptError(f"{f} has {raw.size} bytes, not a multiple of the {record}-byte record")
        raw = raw.reshape(-1, record)
        labels.append(raw[:, label_bytes - 1].astype(np.int64))
        images.append(raw[:, label_bytes:].reshape(-1, 3, 32, 32))
    return _check_counts(np.concatenate(images), np.concatenate(labels), dataset_id, split, files[0].parent)


def _read_cifar_pickle(root: Path, dataset_id: str, split: str):
    if dataset_id == "cifar10":
        base = root / "cifar-10-batches-py"
        names = [f"data_batch_{i}" for i in range(1, 6)] if split == "train" else ["test_batch"]
        key = b"labels"
    else:
        base = root / "cifar-100-python"
        names = [split]
        key = b"fine_labels"
    if not base.is_dir():
        return None
    images, labels = [], []
    for n in names:
        f = base / n
        if not f.exists():
            raise DatasetNotFoundError(f"missing CIFAR file {f}")
        try:
            with open(f, "rb") as fh:
                d = pickle.load(fh, encoding="bytes")
            images.append(np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
            labels.append(np.asarray(d[key], dtype=np.int64))
        except (pickle.UnpicklingError, KeyError, ValueError, EOFError) as e:
            raise DatasetCorruptError(f"cannot parse {f}: {e}") from e
    return _check_counts(np.concatenate(images), np.concatenate(labels), dataset_id, split, base)


def _check_counts(images, labels, dataset_id, split, where):
    k, n_train, n_test = CIFAR_INFO[dataset_id]
    expected = n_train if split == "train" else n_test
    if len(images) != expected:
        raise DatasetCorruptError(f"{where}: expected {expected} {split} images, found {len(images)}")
    if labels.max() >= k:
        raise DatasetCorruptError(f"{where}: label {labels.max()} out of range for {k} classes")
    return images, labels


def convert_cifar(
    dataset_id: str,
    src_dir: str | os.PathLike,
    dst_dir: str | os.PathLike,
    splits: tuple[str, ...] = SPLITS,
) -> list[Path]:
    """Convert a distributed CIFAR layout into the internal npz format."""
    dst = Path(dst_dir)
    dst.mkdir(parents=True, exist_ok=True)
    out = []
    for split in splits:
        ds = load_dataset(dataset_id, split, data_dir=src_dir)
        path = dst / f"{dataset_id}_{split}.npz"
        np.savez(path, images=ds.images, labels=ds.labels)
        out.append(path)
    return out


def make_synthetic(
    num_classes: int = 10,
    n: int = 1000,
    seed: int = 0,
    split: str = "train",
    image_shape: tuple[int, int, int] = (3, 16, 16),
    noise: float = 0.12,
    template_res: int = 4,
) -> ImageDataset:
    """Class-conditional smooth-texture images, quantised to 8 bits.

    Each class owns a random low-resolution colour template (shared by
    both splits of the same ``seed``); a sample is its class template
    blended with another class's, shifted by up to two pixels, with
    random contrast and additive Gaussian noise.  The two splits draw
    disjoint sample streams.
    """
    c, h, w = image_shape
    gen = torch.Generator().manual_seed(seed)
    coarse = torch.rand(num_classes, c, template_res, template_res, generator=gen)
    templates = F.interpolate(coarse, size=(h, w), mode="bicubic", align_corners=False)
    stripes = torch.rand(num_classes, 2, generator=gen)
    yy, xx = torch.meshgrid(torch.linspace(0, 1, h), torch.linspace(0, 1, w), indexing="ij")
    for k in range(num_classes):
        freq = 2 + 4 * stripes[k, 0]
        angle = torch.pi * stripes[k, 1]
        wave = torch.sin(2 * torch.pi * freq * (xx * torch.cos(angle) + yy * torch.sin(angle)))
        templates[k] += 0.15 * wave
    templates = templates.clamp(0, 1)

    sgen = torch.Generator().manual_seed(seed * 2 + (1 if split == "test" else 0) + 7919)
    labels = torch.randint(0, num_classes, (n,), generator=sgen)
    other = torch.randint(0, num_classes, (n,), generator=sgen)
    mix = 0.55 + 0.3 * torch.rand(n, 1, 1, 1, generator=sgen)
    contrast = 0.7 + 0.6 * torch.rand(n, 1, 1, 1, generator=sgen)
    x = mix * templates[labels] + (1 - mix) * templates[other]
    x = (x - 0.5) * contrast + 0.5
    shifts = torch.randint(-2, 3, (n, 2), generator=sgen)
    for i in range(n):
        x[i] = torch.roll(x[i], shifts=(int(shifts[i, 0]), int(shifts[i, 1])), dims=(1, 2))
    x = x + noise * torch.randn(x.shape, generator=sgen)
    images = (x.clamp(0, 1) * 255).round().to(torch.uint8).numpy()
    return ImageDataset(images, labels.numpy(), num_classes, f"synthetic-k{num_classes}-s{seed}")


def dataset_from_batch(batch: ImageBatch, num_classes: int, dataset_id: str = "adhoc") -> ImageDataset:
    """Wrap an ImageBatch whose pixels lie on the k/255 grid."""
    images = (batch.pixels.detach().double() * 255).round().clamp(0, 255).to(torch.uint8).numpy()
    return ImageDataset(images, batch.labels.numpy(), num_classes, dataset_id, batch.ids.numpy())
