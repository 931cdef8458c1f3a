"""Iterative L-infinity transfer attacks: MI-FGSM, DI-FGSM, VNI-FGSM and the Logit attack.

All attacks share one loop::

    g_t     = grad_x loss(source(phi(x_t)))
    m_{t+1} = mu * m_t + g_t / ||g_t||_1
    x_{t+1} = clip_{x, eps}(x_t + alpha * sign(m_{t+1}))

with ``phi`` the identity except for DI-FGSM (random resize and pad).
Non-targeted attacks ascend the cross-entropy of the true label, targeted
ones descend the cross-entropy of the target, the Logit attack ascends the
raw target logit.  VNI-FGSM evaluates the gradient at a Nesterov look-ahead
point and adds a variance term estimated from random neighbours.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._utils import stable_hash
from .modelzoo.core import ImageBatch, ShapeMismatchError

logger = logging.getLogger("ckl.attacks")

METHODS = ("mi", "di", "vni", "logit")
GRID = 255
_GRID_TOL = 1e-4


class BudgetViolationError(AssertionError):
    """An adversarial example left its L-infinity ball or the pixel range."""


@dataclass(frozen=True)
class AttackConfig:
    method: str = "mi"
    epsilon: float = 8 / 255
    alpha: float = 1 / 255
    iterations: int = 30
    mu: float = 1.0
    targeted: bool = False
    di_low: int = 28
    di_high: int = 32
    di_prob: float = 1.0
    vni_n: int = 20
    vni_beta: float = 1.5
    # apply the DI transform inside mi/vni/logit as well
    diverse_inputs: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.epsilon > 0 and self.alpha > self.epsilon + 1e-12:
            raise ValueError(f"alpha ({self.alpha}) exceeds epsilon ({self.epsilon})")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if not 1 <= self.di_low <= self.di_high:
            raise ValueError("need 1 <= di_low <= di_high")
        if not 0.0 <= self.di_prob <= 1.0:
            raise ValueError("di_prob must lie in [0, 1]")
        if self.vni_n < 1:
            raise ValueError("vni_n must be >= 1")

    @classmethod
    def for_method(cls, method: str, targeted: bool = False, **overrides) -> "AttackConfig":
        """Defaults per setting: 30 steps of 1/255 untargeted; 300 steps of 2/255 targeted or Logit."""
        base = dict(method=method, targeted=targeted or method == "logit")
        if base["targeted"]:
            base.update(iterations=300, alpha=2 / 255)
        base.update(overrides)
        return cls(**base)

    @property
    def uses_di(self) -> bool:
        return self.method == "di" or self.diverse_inputs

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())[:16]


@dataclass
class AdversarialBatch:
    adv_pixels: torch.Tensor
    origin_ids: torch.Tensor
    labels: torch.Tensor
    target_labels: torch.Tensor | None = None
    config_hash: str = ""
    config: dict | None = None
    source_hash: str | None = None

    def __len__(self) -> int:
        return self.adv_pixels.shape[0]

    def as_batch(self) -> ImageBatch:
        return ImageBatch(self.adv_pixels, self.labels, self.origin_ids)


# --------------------------------------------------------------------------
# building blocks


def clip_linf(x_t: torch.Tensor, x_orig: torch.Tensor, epsilon: float) -> torch.Tensor:
    """max(min(x_t, x + eps, 1), x - eps, 0), elementwise."""
    if x_t.shape != x_orig.shape:
        raise ShapeMismatchError(f"{tuple(x_t.shape)} vs {tuple(x_orig.shape)}")
    upper = torch.clamp(x_orig + epsilon, max=1.0)
    lower = torch.clamp(x_orig - epsilon, min=0.0)
    return torch.max(torch.min(x_t, upper), lower)


def di_transform(
    x: torch.Tensor,
    low: int = 28,
    high: int = 32,
    prob: float = 1.0,
    seed: int | None = None,
    generator: torch.Generator | None = None,
    size: int | None = None,
) -> torch.Tensor:
    """Random bilinear resize to rnd x rnd (rnd uniform in [low, high)) and random zero padding.

    The output has the input's spatial size.  With probability ``1 - prob``
    the batch passes through unchanged.  ``size`` forces rnd (for tests).
    """
    h, w = x.shape[-2:]
    if high > min(h, w) + 1:
        raise ValueError(f"di_high={high} exceeds image size {min(h, w)} + 1")
    if low > high or low < 1:
        raise ValueError("need 1 <= low <= high")
    gen = generator if generator is not None else torch.Generator().manual_seed(0 if seed is None else seed)
    if float(torch.rand((), generator=gen)) >= prob:
        return x
    if size is None:
        size = low if high <= low else int(torch.randint(low, high, (), generator=gen))
    resized = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    pad_h, pad_w = h - size, w - size
    top = int(torch.randint(0, pad_h + 1, (), generator=gen))
    left = int(torch.randint(0, pad_w + 1, (), generator=gen))
    return F.pad(resized, (left, pad_w - left, top, pad_h - top), value=0.0)


def _on_grid(t: torch.Tensor) -> bool:
    scaled = t.detach().double() * GRID
    return bool(((scaled - scaled.round()).abs() <= _GRID_TOL).all())


def _is_grid_multiple(v: float) -> bool:
    return abs(v * GRID - round(v * GRID)) <= 1e-6


def _l1_normalize(g: torch.Tensor) -> torch.Tensor:
    norm = g.abs().flatten(1).sum(1)
    zero = norm == 0
    if zero.any():
        logger.debug("%d samples with zero gradient; momentum contribution 0", int(zero.sum()))
    scale = torch.where(zero, torch.zeros_like(norm), 1.0 / norm.clamp_min(torch.finfo(norm.dtype).tiny))
    return g * scale.view(-1, *([1] * (g.ndim - 1)))


class _Objective:
    """Loss to ascend for one attack, evaluated on the (transformed) input."""

    def __init__(self, source: nn.Module, cfg: AttackConfig, labels, targets, gen):
        self.source = source
        self.cfg = cfg
        self.labels = labels
        self.targets = targets
        self.gen = gen

    def grad(self, x: torch.Tensor) -> torch.Tensor:
        x = x.detach().requires_grad_(True)
        inp = x
        if self.cfg.uses_di:
            inp = di_transform(x, self.cfg.di_low, self.cfg.di_high, self.cfg.di_prob, generator=self.gen)
        with torch.enable_grad():
            logits = self.source(inp)
            if self.cfg.method == "logit":
                obj = logits.gather(1, self.targets[:, None]).sum()
            elif self.cfg.targeted:
                obj = -F.cross_entropy(logits, self.targets, reduction="sum")
            else:
                obj = F.cross_entropy(logits, self.labels, reduction="sum")
            (g,) = torch.autograd.grad(obj, x)
        return g


def _prepare(source: nn.Module, batch: ImageBatch, cfg: AttackConfig, targets):
    shape = getattr(source, "input_shape", None)
    if shape is not None and tuple(batch.pixels.shape[1:]) != tuple(shape):
        raise ShapeMismatchError(f"batch images {tuple(batch.pixels.shape[1:])} vs source {tuple(shape)}")
    if cfg.targeted or cfg.method == "logit":
        if targets is None:
            raise ValueError("targeted attacks need target labels")
        targets = torch.as_tensor(targets, dtype=torch.long)
        if targets.shape != batch.labels.shape:
            raise ValueError("one target label per sample is required")
        if (targets == batch.labels).any():
            raise ValueError("target labels must differ from the true labels")
    dtype = getattr(source, "dtype", None) or next(source.parameters()).dtype
    x = batch.pixels.detach().to(dtype)
    snap = _on_grid(x) and _is_grid_multiple(cfg.alpha) and _is_grid_multiple(cfg.epsilon)
    return x, targets, snap


def _finish(x_adv, batch, cfg, targets, source, snap) -> AdversarialBatch:
    if snap:
        x_adv = torch.round(x_adv * GRID) / GRID
    adv = AdversarialBatch(
        adv_pixels=x_adv.detach(),
        origin_ids=batch.ids.clone(),
        labels=batch.labels.clone(),
        target_labels=None if targets is None else targets.clone(),
        config_hash=cfg.config_hash(),
        config=cfg.to_dict(),
        source_hash=_source_hash(source),
    )
    check_budget(adv, batch.pixels, cfg.epsilon)
    return adv


def _source_hash(source) -> str | None:
    fn = getattr(source, "content_hash", None)
    return fn() if callable(fn) else None


def check_budget(adv: AdversarialBatch, original: torch.Tensor, epsilon: float) -> None:
    """Raise BudgetViolationError unless every sample is inside its ball and in [0, 1]."""
    x = adv.adv_pixels.double()
    delta = (x - original.double()).abs().flatten(1).max(1).values
    bad = delta > epsilon + 2.0**-20
    if bad.any():
        raise BudgetViolationError(
            f"{int(bad.sum())} samples exceed the L-inf budget {epsilon} (max {float(delta.max())})"
        )
    if x.min() < 0 or x.max() > 1:
        raise BudgetViolationError("adversarial pixels outside [0, 1]")


# --------------------------------------------------------------------------
# attacks


def _momentum_attack(source, batch, cfg, targets=None) -> AdversarialBatch:
    x, targets, snap = _prepare(source, batch, cfg, targets)
    gen = torch.Generator().manual_seed(cfg.seed)
    obj = _Objective(source, cfg, batch.labels, targets, gen)
    was_training = source.training
    source.eval()
    x_adv = x.clone()
    m = torch.zeros_like(x)
    try:
        for _ in range(cfg.iterations):
            g = obj.grad(x_adv)
            m = cfg.mu * m + _l1_normalize(g)
            x_adv = clip_linf(x_adv + cfg.alpha * torch.sign(m), x, cfg.epsilon)
            if snap:
                x_adv = torch.round(x_adv * GRID) / GRID
    finally:
        source.train(was_training)
    return _finish(x_adv, batch, cfg, targets, source, snap)


def mi_fgsm(source: nn.Module, batch: ImageBatch, config: AttackConfig | None = None, targets=None) -> AdversarialBatch:
    """Momentum iterative FGSM (DI-FGSM when ``config.method == "di"``)."""
    cfg = config or AttackConfig()
    return _momentum_attack(source, batch, cfg, targets)


def di_fgsm(source: nn.Module, batch: ImageBatch, config: AttackConfig | None = None, targets=None) -> AdversarialBatch:
    cfg = replace(config or AttackConfig(), method="di")
    return _momentum_attack(source, batch, cfg, targets)


def vni_fgsm(source: nn.Module, batch: ImageBatch, config: AttackConfig | None = None, targets=None) -> AdversarialBatch:
    """Variance-tuned Nesterov iterative FGSM.

    Per step: gradient ``g`` at the look-ahead point ``x_t + alpha * mu * m_t``;
    momentum update with ``(g + v_t) / ||g + v_t||_1``; new variance
    ``v_{t+1}`` = mean gradient over ``vni_n`` uniform neighbours of ``x_t``
    within ``vni_beta * eps``, minus ``g``.
    """
    cfg = replace(config or AttackConfig(), method="vni")
    x, targets, snap = _prepare(source, batch, cfg, targets)
    gen = torch.Generator().manual_seed(cfg.seed)
    obj = _Objective(source, cfg, batch.labels, targets, gen)
    radius = cfg.vni_beta * cfg.epsilon
    was_training = source.training
    source.eval()
    x_adv = x.clone()
    m = torch.zeros_like(x)
    v = torch.zeros_like(x)
    try:
        for _ in range(cfg.iterations):
            g = obj.grad(x_adv + cfg.alpha * cfg.mu * m)
            m = cfg.mu * m + _l1_normalize(g + v)
            neighbours = torch.zeros_like(x)
            for _ in range(cfg.vni_n):
                r = (torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1) * radius
                neighbours += obj.grad(x_adv + r)
            v = neighbours / cfg.vni_n - g
            x_adv = clip_linf(x_adv + cfg.alpha * torch.sign(m), x, cfg.epsilon)
            if snap:
                x_adv = torch.round(x_adv * GRID) / GRID
    finally:
        source.train(was_training)
    return _finish(x_adv, batch, cfg, targets, source, snap)


def logit_attack(source: nn.Module, batch: ImageBatch, targets, config: AttackConfig | None = None) -> AdversarialBatch:
    """Targeted attack that maximises the raw target-class logit with MI momentum."""
    cfg = replace(config or AttackConfig.for_method("logit"), method="logit", targeted=True)
    return _momentum_attack(source, batch, cfg, targets)


def run_attack(source: nn.Module, batch: ImageBatch, config: AttackConfig, targets=None) -> AdversarialBatch:
    if config.method in ("mi", "di"):
        return _momentum_attack(source, batch, config, targets)
    if config.method == "vni":
        return vni_fgsm(source, batch, config, targets)
    return logit_attack(source, batch, targets, config)


def random_targets(labels: torch.Tensor, num_classes: int, seed: int = 0) -> torch.Tensor:
    """A uniformly random target label different from each true label."""
    gen = torch.Generator().manual_seed(seed)
    offset = torch.randint(1, num_classes, labels.shape, generator=gen)
    return (labels + offset) % num_classes


def attack_dataset(source, data, config: AttackConfig, targets=None, batch_size: int = 256) -> AdversarialBatch:
    """Attack every sample of an ImageDataset (or ImageBatch) in chunks and concatenate."""
    batch = data if isinstance(data, ImageBatch) else data.as_batch()
    parts = []
    for i in range(0, len(batch), batch_size):
        idx = slice(i, i + batch_size)
        t = None if targets is None else targets[idx]
        parts.append(run_attack(source, batch.select(idx), config, t))
    first = parts[0]
    return AdversarialBatch(
        adv_pixels=torch.cat([p.adv_pixels for p in parts]),
        origin_ids=torch.cat([p.origin_ids for p in parts]),
        labels=torch.cat([p.labels for p in parts]),
        target_labels=None if first.target_labels is None else torch.cat([p.target_labels for p in parts]),
        config_hash=first.config_hash,
        config=first.config,
        source_hash=first.source_hash,
    )


# --------------------------------------------------------------------------
# ensemble source


class EnsembleSource(nn.Module):
    """Averages member logits; usable anywhere a single source model is."""

    def __init__(self, models: Sequence[nn.Module]):
        super().__init__()
        if not models:
            raise ValueError("an ensemble needs at least one model")
        k = {m.num_classes for m in models}
        shapes = {tuple(m.input_shape) for m in models}
        if len(k) != 1 or len(shapes) != 1:
            raise ShapeMismatchError(f"ensemble members disagree: classes {k}, input shapes {shapes}")
        self.members = nn.ModuleList(models)
        self.num_classes = k.pop()
        self.input_shape = shapes.pop()
        self.dtype = next(models[0].parameters()).dtype

    def forward(self, x):
        return torch.stack([m(x.to(next(m.parameters()).dtype)).to(self.dtype) for m in self.members]).mean(0)

    def content_hash(self) -> str:
        return stable_hash([getattr(m, "content_hash", lambda: repr(m))() for m in self.members])


def ensemble_source(models: Sequence[nn.Module]) -> EnsembleSource:
    return EnsembleSource(models)


# --------------------------------------------------------------------------
# persistence


def save_adversarial(adv: AdversarialBatch, path: str | os.PathLike, source_checkpoint_hash: str | None = None) -> Path:
    """Write manifest.json + pixels.bin; pixels are uint8 when they all sit on the k/255 grid."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    x = adv.adv_pixels.detach().cpu()
    as_uint8 = _on_grid(x)
    if as_uint8:
        payload = (x.double() * GRID).round().to(torch.uint8).numpy().tobytes()
    else:
        payload = x.to(torch.float32).numpy().astype("<f4").tobytes()
    manifest = {
        "format_version": 1,
        "config": adv.config,
        "config_hash": adv.config_hash,
        "source_hash": adv.source_hash,
        "source_checkpoint_hash": source_checkpoint_hash,
        "seed": (adv.config or {}).get("seed"),
        "pixel_format": "uint8" if as_uint8 else "float32le",
        "shape": list(x.shape),
        "origin_ids": adv.origin_ids.tolist(),
        "labels": adv.labels.tolist(),
        "target_labels": None if adv.target_labels is None else adv.target_labels.tolist(),
    }
    (path / "pixels.bin").write_bytes(payload)
    (path / "manifest.json").write_text(json.dumps(manifest) + "\n")
    return path


def load_adversarial(path: str | os.PathLike) -> AdversarialBatch:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    raw = (path / "pixels.bin").read_bytes()
    shape = manifest["shape"]
    if manifest["pixel_format"] == "uint8":
        x = torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).reshape(shape).copy()).float() / GRID
    else:
        x = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32))
    t = manifest["target_labels"]
    return AdversarialBatch(
        adv_pixels=x,
        origin_ids=torch.tensor(manifest["origin_ids"], dtype=torch.long),
        labels=torch.tensor(manifest["labels"], dtype=torch.long),
        target_labels=None if t is None else torch.tensor(t, dtype=torch.long),
        config_hash=manifest["config_hash"],
        config=manifest["config"],
        source_hash=manifest.get("source_hash"),
    )
