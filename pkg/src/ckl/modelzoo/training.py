from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .._utils import seed_everything, stable_hash
from .core import Classifier, ImageBatch, accuracy
from .data import ImageDataset

logger = logging.getLogger("ckl.modelzoo")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Supervised training settings; defaults are the momentum-SGD recipe with cosine annealing."""

    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 3e-4
    lr_schedule: str = "cosine"
    augment: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())[:16]


@dataclass
class TrainingLog:
    config: dict
    epochs: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.epochs.append(row)

    def column(self, name: str) -> list:
        return [row[name] for row in self.epochs]


def make_optimizer(model: torch.nn.Module, cfg, steps_total: int):
    opt = torch.optim.SGD(
        model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    if cfg.lr_schedule == "cosine":
        # per-step cosine from lr down to zero at the final step
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, steps_total) / max(steps_total, 1)))
        )
    elif cfg.lr_schedule == "constant":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 1.0)
    else:
        raise ValueError(f"unknown lr_schedule {cfg.lr_schedule!r}")
    return opt, sched


def augment_batch(batch: ImageBatch, gen: torch.Generator, pad: int = 2) -> ImageBatch:
    """Random crop after zero padding plus horizontal flip."""
    x = batch.pixels
    n, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad))
    dx = torch.randint(0, 2 * pad + 1, (n,), generator=gen)
    dy = torch.randint(0, 2 * pad + 1, (n,), generator=gen)
    flip = torch.rand(n, generator=gen) < 0.5
    out = torch.empty_like(x)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop.flip(-1) if flip[i] else crop
    return ImageBatch(out, batch.labels, batch.ids)


def train_supervised(
    model: Classifier,
    train_data: ImageDataset,
    config: TrainConfig | None = None,
    val_data: ImageDataset | None = None,
) -> tuple[Classifier, TrainingLog]:
    """Cross-entropy training with momentum SGD.

    The model is trained in place and returned with a per-epoch log.
    Raises :class:`TrainingDivergedError` as soon as a loss goes non-finite.
    """
    cfg = config or TrainConfig()
    log = TrainingLog(config=cfg.to_dict())
    logger.info("train_supervised %s config=%s", model.spec.arch_id, cfg.to_dict())
    if train_data.num_classes != model.num_classes:
        raise ValueError(f"dataset has {train_data.num_classes} classes, model has {model.num_classes}")
    if cfg.epochs <= 0:
        return model, log

    seed_everything(cfg.seed)
    steps_per_epoch = math.ceil(len(train_data) / cfg.batch_size)
    opt, sched = make_optimizer(model, cfg, cfg.epochs * steps_per_epoch)
    aug_gen = torch.Generator().manual_seed(cfg.seed + 1)
    model.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for step, batch in enumerate(
            train_data.batches(cfg.batch_size, shuffle=True, seed=cfg.seed * 100_003 + epoch, dtype=model.dtype)
        ):
            if cfg.augment:
                batch = augment_batch(batch, aug_gen)
            loss = F.cross_entropy(model(batch.pixels), batch.labels)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"{model.spec.arch_id}: non-finite loss {loss.item()} at epoch {epoch}, batch {step}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "seconds": time.perf_counter() - t0}
        if val_data is not None:
            row["val_acc"] = accuracy(model, val_data.as_batch(model.dtype))
        model.train()
        log.append(**row)
        logger.info("epoch %d %s", epoch, row)
    model.eval()
    model.trained_on = train_data.dataset_id
    model.training_config_hash = cfg.config_hash()
    return model, log
