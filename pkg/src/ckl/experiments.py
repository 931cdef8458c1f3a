"""Desk-scale experiment protocols.

Small stand-ins for the full-size transferability experiments: teachers
from different families are trained on a data subset, a student is
distilled from them, and the transfer ASR of attacks crafted on the
student is measured on an independently trained target of a family
none of them share.  The baseline is a student-architecture model trained
with plain cross-entropy.

Trained models are optionally kept under ``work_dir`` as checkpoints
keyed by a hash of everything that determines them, so repeated runs
(and the ablation, which shares teachers with the gain protocol) reuse
them.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._utils import stable_hash
from .attacks import AttackConfig, attack_dataset
from .distill import CKLConfig, train_student
from .evaluation import asr
from .modelzoo import (
    ArchitectureSpec,
    ImageDataset,
    TrainConfig,
    accuracy,
    build_model,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    train_supervised,
)

logger = logging.getLogger("ckl.experiments")


@dataclass
class DeskSetup:
    """Everything that defines one desk-scale transfer experiment."""

    dataset: str = "cifar10"
    data_dir: str | None = None
    train_subset: int = 10_000
    test_subset: int = 1_000
    attack_subset: int = 1_000
    subset_seed: int = 0
    # synthetic data only
    image_shape: tuple[int, int, int] = (3, 32, 32)
    synthetic_train: int = 2_000
    synthetic_test: int = 500
    teacher_archs: tuple[str, ...] = ("small_cnn", "vit_tiny")
    student_arch: str = "resnet_tiny"
    target_arch: str = "mixer_tiny"
    teacher_epochs: int = 30
    student_epochs: int = 50
    lam: float = 500.0
    grad_mode: str = "pcgrad"
    attack: AttackConfig = field(default_factory=AttackConfig)
    # seeds of the fixed models; per-run seeds are passed separately
    teacher_seed: int = 100
    target_seed: int = 200

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = self.attack.to_dict()
        return d


def load_desk_data(setup: DeskSetup) -> tuple[ImageDataset, ImageDataset]:
    """Train and test subsets; raises DatasetNotFoundError when CIFAR is absent."""
    if setup.dataset == "synthetic":
        train = load_dataset("synthetic", "train", n=setup.synthetic_train, image_shape=setup.image_shape)
        test = load_dataset("synthetic", "test", n=setup.synthetic_test, image_shape=setup.image_shape)
        return train, test
    train = load_dataset(setup.dataset, "train", setup.data_dir)
    test = load_dataset(setup.dataset, "test", setup.data_dir)
    if 0 < setup.train_subset < len(train):
        train = train.stratified_subset(setup.train_subset, setup.subset_seed)
    if 0 < setup.test_subset < len(test):
        test = test.stratified_subset(setup.test_subset, setup.subset_seed)
    return train, test


class ModelStore:
    """Train-or-load helper backed by an optional checkpoint directory."""

    def __init__(self, work_dir: str | Path | None = None):
        self.root = Path(work_dir) if work_dir is not None else None
        self._memory: dict[str, object] = {}

    def get(self, key_obj: dict, build):
        key = stable_hash(key_obj)[:20]
        if key in self._memory:
            return self._memory[key]
        path = self.root / f"{key_obj['kind']}-{key_obj['arch']}-{key}" if self.root is not None else None
        if path is not None and (path / "manifest.json").exists():
            model = load_checkpoint(path)
        else:
            t0 = time.perf_counter()
            model = build()
            logger.info("trained %s %s in %.1fs", key_obj["kind"], key_obj["arch"], time.perf_counter() - t0)
            if path is not None:
                save_checkpoint(model, path, training_config=key_obj)
        self._memory[key] = model
        return model


def _spec(arch: str, data: ImageDataset) -> ArchitectureSpec:
    return ArchitectureSpec(arch, data.num_classes, data.image_shape)


def train_ce(store: ModelStore, arch: str, seed: int, train: ImageDataset, epochs: int):
    cfg = TrainConfig(epochs=epochs, seed=seed)
    key = {"kind": "ce", "arch": arch, "seed": seed, "data": train.dataset_id, "n": len(train), **cfg.to_dict()}

    def build():
        model = build_model(_spec(arch, train), seed)
        train_supervised(model, train, cfg)
        return model

    return store.get(key, build)


def train_ckl(store: ModelStore, setup: DeskSetup, teachers, seed: int, train: ImageDataset, grad_mode=None):
    cfg = CKLConfig(lam=setup.lam, epochs=setup.student_epochs, grad_mode=grad_mode or setup.grad_mode, seed=seed)
    key = {
        "kind": "ckl",
        "arch": setup.student_arch,
        "seed": seed,
        "data": train.dataset_id,
        "n": len(train),
        "teachers": [t.content_hash() for t in teachers],
        **cfg.to_dict(),
    }

    def build():
        model = build_model(_spec(setup.student_arch, train), seed)
        train_student(model, teachers, train, cfg)
        return model

    return store.get(key, build)


@dataclass
class TransferResult:
    """Per-seed transfer ASR of each compared student variant on the held-out target."""

    variants: dict[str, list[float]]
    seeds: list[int]
    clean_accuracy: dict[str, float]
    setup: dict
    seconds: float = 0.0

    def mean(self, name: str) -> float:
        return float(np.mean(self.variants[name]))

    def gain(self, a: str, b: str) -> float:
        return self.mean(a) - self.mean(b)

    def per_seed_gain(self, a: str, b: str) -> list[float]:
        return [x - y for x, y in zip(self.variants[a], self.variants[b])]


def _fixed_models(store, setup, train):
    teachers = [train_ce(store, a, setup.teacher_seed + i, train, setup.teacher_epochs)
                for i, a in enumerate(setup.teacher_archs)]
    target = train_ce(store, setup.target_arch, setup.target_seed, train, setup.teacher_epochs)
    return teachers, target


def transfer_asr(source, target, data: ImageDataset, attack: AttackConfig) -> float:
    return asr(target, attack_dataset(source, data, attack))


def compare_students(
    setup: DeskSetup,
    variants: dict[str, str | None],
    seeds=(0, 1, 2),
    work_dir=None,
    data=None,
) -> TransferResult:
    """Transfer ASR on the target for each student variant and seed.

    ``variants`` maps a name to a grad_mode for CKL students, or to
    ``None`` for the cross-entropy baseline.
    """
    t0 = time.perf_counter()
    train, test = data if data is not None else load_desk_data(setup)
    store = ModelStore(work_dir)
    teachers, target = _fixed_models(store, setup, train)
    probe = test.subset(min(setup.attack_subset, len(test)))
    results = {name: [] for name in variants}
    clean: dict[str, float] = {
        f"teacher:{t.spec.arch_id}": accuracy(t, test.as_batch()) for t in teachers
    }
    clean["target"] = accuracy(target, test.as_batch())
    for seed in seeds:
        for name, mode in variants.items():
            if mode is None:
                model = train_ce(store, setup.student_arch, seed, train, setup.student_epochs)
            else:
                model = train_ckl(store, setup, teachers, seed, train, grad_mode=mode)
            results[name].append(transfer_asr(model, target, probe, setup.attack))
            clean[f"{name}:{seed}"] = accuracy(model, test.as_batch())
            logger.info("seed %d %s transfer ASR %.4f", seed, name, results[name][-1])
    return TransferResult(results, list(seeds), clean, setup.to_dict(), time.perf_counter() - t0)


def ckl_gain(setup: DeskSetup | None = None, seeds=(0, 1, 2), work_dir=None, data=None) -> TransferResult:
    """CKL student (``setup.grad_mode``) against the cross-entropy baseline."""
    setup = setup or DeskSetup()
    return compare_students(setup, {"ckl": setup.grad_mode, "baseline": None}, seeds, work_dir, data)


def ablation(
    setup: DeskSetup | None = None, modes=("pcgrad", "off"), seeds=(0, 1, 2), work_dir=None, data=None
) -> TransferResult:
    """Transfer ASR per gradient-target mode, same teachers and seeds."""
    setup = setup or DeskSetup()
    return compare_students(setup, {m: m for m in modes}, seeds, work_dir, data)


def with_overrides(setup: DeskSetup, **kw) -> DeskSetup:
    return replace(setup, **kw)
