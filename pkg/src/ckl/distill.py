"""Common knowledge learning: multi-teacher output and input-gradient distillation.

The student minimises

    L = L_KD + lambda * L_Grad

where ``L_KD`` sums, over teachers, the divergence sum_k s_k log(s_k / t_k)
between student and teacher softmax outputs, and ``L_Grad`` is the squared
distance between the student's per-sample input gradient and a target
``d(x)`` built from the teachers' input gradients.  With ``grad_mode``
"pcgrad" the target is the sum of teacher gradients after each one has
been projected off every other teacher gradient it conflicts with.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ._utils import seed_everything, stable_hash
from .modelzoo.core import Classifier, ImageBatch, accuracy, input_gradient
from .modelzoo.data import ImageDataset
from .modelzoo.training import TrainingDivergedError, augment_batch, make_optimizer

logger = logging.getLogger("ckl.distill")

ETA = 1e-12  # probability floor before log
TAU = 1e-20  # squared-norm floor below which a projection is skipped
GRAD_MODES = ("pcgrad", "average", "max", "off")


class SecondOrderUnsupportedError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# output distillation


def kd_divergence(teacher_probs, student_probs) -> torch.Tensor:
    """sum_k s_k * log(s_k / max(t_k, ETA)) over the last axis.

    Accepts single K-vectors or batches of them.  Note the direction: this
    is KL(student || teacher).
    """
    t = torch.as_tensor(teacher_probs, dtype=torch.float64)
    s = torch.as_tensor(student_probs, dtype=torch.float64)
    if t.shape != s.shape:
        raise ValueError(f"shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
    for name, p in (("teacher", t), ("student", s)):
        if (p < 0).any() or ((p.sum(-1) - 1).abs() > 1e-6).any():
            raise ValueError(f"{name} input is not a probability vector")
    return (torch.xlogy(s, s) - s * torch.log(t.clamp_min(ETA))).sum(-1)


def _kd_from_logits(teacher_logits: torch.Tensor, student_logits: torch.Tensor, temperature: float) -> torch.Tensor:
    # float64 so that identical logits give exactly zero
    log_s = F.log_softmax(student_logits.double() / temperature, dim=1)
    log_t = F.log_softmax(teacher_logits.double() / temperature, dim=1).clamp_min(math.log(ETA))
    return (log_s.exp() * (log_s - log_t)).sum(1).to(student_logits.dtype)


def kd_loss(
    teachers: Sequence[torch.nn.Module],
    student: torch.nn.Module,
    batch: ImageBatch,
    temperature: float = 1.0,
    teacher_logits: Sequence[torch.Tensor] | None = None,
) -> torch.Tensor:
    """Sum over teachers of the batch-mean divergence; differentiable w.r.t. the student only."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    k = student.num_classes
    for t in teachers:
        if t.num_classes != k:
            raise ValueError(f"teacher has {t.num_classes} classes, student has {k}")
    x = batch.pixels.to(student.dtype)
    s_logits = student(x)
    if teacher_logits is None:
        with torch.no_grad():
            teacher_logits = [t(batch.pixels.to(t.dtype)) for t in teachers]
    total = s_logits.new_zeros(())
    for tl in teacher_logits:
        total = total + _kd_from_logits(tl.to(s_logits.dtype), s_logits, temperature).mean()
    return total


# --------------------------------------------------------------------------
# gradient conflicts


def detect_conflict(g_i: torch.Tensor, g_j: torch.Tensor) -> bool:
    """True iff the two gradients have a strictly negative dot product."""
    return bool(torch.dot(torch.as_tensor(g_i).double().flatten(), torch.as_tensor(g_j).double().flatten()) < 0)


def project_out(g_i: torch.Tensor, g_j: torch.Tensor) -> torch.Tensor:
    """Project ``g_i`` onto the normal plane of ``g_j`` if the two conflict.

    Non-conflicting pairs, and ``g_j`` with squared norm <= TAU, return
    ``g_i`` unchanged.  Arithmetic is carried out in float64.
    """
    gi = torch.as_tensor(g_i)
    a, b = gi.double().flatten(), torch.as_tensor(g_j).double().flatten()
    dot = torch.dot(a, b)
    if dot >= 0:
        return gi
    nn_ = torch.dot(b, b)
    if nn_ <= TAU:
        logger.debug("projection skipped: |g_j|^2 = %g <= %g", float(nn_), TAU)
        return gi
    # projection is linear in g_i; rescaling keeps subnormal inputs accurate
    scale = a.abs().max()
    a = a / scale
    out = (a - (torch.dot(a, b) / nn_) * b) * scale
    return out.reshape(gi.shape).to(gi.dtype)


def projection_orders(n_teachers: int, sample_ids, order_seed: int) -> np.ndarray:
    """For each sample and teacher i, a shuffled order of the other teachers.

    Returns an int array of shape (n_samples, n_teachers, n_teachers - 1).
    The order depends only on (order_seed, sample id), never on batching.
    """
    ids = np.asarray(sample_ids, dtype=np.int64).reshape(-1)
    out = np.empty((len(ids), n_teachers, max(n_teachers - 1, 0)), dtype=np.int64)
    for b, sid in enumerate(ids):
        rng = np.random.default_rng([order_seed & 0xFFFFFFFF, int(sid) & 0xFFFFFFFFFFFF])
        for i in range(n_teachers):
            others = np.array([j for j in range(n_teachers) if j != i], dtype=np.int64)
            out[b, i] = rng.permutation(others)
    return out


def resolve_conflicts(
    grads: torch.Tensor,
    order_seed: int = 0,
    sample_ids=None,
    return_adjusted: bool = False,
):
    """Conflict-resolved target gradient ``d`` for each sample.

    ``grads`` has shape (n_teachers, n_samples, D).  A working copy of each
    g_i is projected, in a per-sample shuffled order, against the original
    g_j of every other teacher whenever the copy conflicts with it; ``d``
    is the sum of the adjusted copies.  Returns (n_samples, D), plus the
    adjusted copies when ``return_adjusted`` is set.
    """
    if grads.ndim != 3:
        raise ValueError("grads must have shape (n_teachers, n_samples, D)")
    n_t, n_s, _ = grads.shape
    g = grads.double()
    if n_t == 1:
        adjusted = g.clone()
    else:
        ids = np.arange(n_s) if sample_ids is None else np.asarray(sample_ids)
        orders = torch.from_numpy(projection_orders(n_t, ids, order_seed))
        rows = torch.arange(n_s)
        norms = (g * g).sum(-1)  # (n_t, n_s)
        adjusted = torch.empty_like(g)
        skipped = 0
        for i in range(n_t):
            w = g[i].clone()
            for k in range(n_t - 1):
                j = orders[:, i, k]
                gj = g[j, rows]
                nj = norms[j, rows]
                dot = (w * gj).sum(-1)
                fire = dot < 0
                ok = nj > TAU
                skipped += int((fire & ~ok).sum())
                coef = torch.where(fire & ok, dot / nj.clamp_min(TAU), torch.zeros_like(dot))
                w = w - coef[:, None] * gj
            adjusted[i] = w
        if skipped:
            logger.debug("resolve_conflicts: %d projections skipped on near-zero gradients", skipped)
    d = adjusted.sum(0).to(grads.dtype)
    if return_adjusted:
        return d, adjusted.to(grads.dtype)
    return d


def combine_teacher_gradients(grads: torch.Tensor, mode: str, order_seed: int = 0, sample_ids=None) -> torch.Tensor:
    """Target gradient for the student under one of the gradient modes."""
    if mode == "pcgrad":
        return resolve_conflicts(grads, order_seed, sample_ids)
    if mode == "average":
        return grads.sum(0)
    if mode == "max":
        # per coordinate, the teacher value of largest magnitude (sign kept)
        idx = grads.abs().argmax(0, keepdim=True)
        return grads.gather(0, idx)[0]
    raise ValueError(f"grad_mode {mode!r} has no target gradient")


# --------------------------------------------------------------------------
# teacher gradient bundle and its disk cache


@dataclass
class GradientBundle:
    per_teacher: torch.Tensor  # n_teachers x n_samples x D
    sample_ids: torch.Tensor

    def __post_init__(self):
        if self.per_teacher.ndim != 3:
            raise ValueError("per_teacher must be n_teachers x n_samples x D")
        if not torch.isfinite(self.per_teacher).all():
            raise ValueError("teacher gradients contain non-finite values")


_MAGIC = b"CKLGRAD1"


class GradientCache:
    """Teacher input gradients on disk, one file per (teacher, shard of sample ids).

    File layout: 8-byte magic, uint32 little-endian header length, a JSON
    header (teacher hash, dataset id, D, dtype, sample-id range), then one
    presence byte per sample id and the little-endian payload rows.
    A header that does not match the current teacher invalidates the file.
    """

    def __init__(self, cache_dir: str | os.PathLike | None = None, dataset_id: str = "unknown", shard_size: int = 1024):
        if cache_dir is None:
            cache_dir = os.environ.get("CKL_CACHE_DIR") or Path.home() / ".cache" / "ckl" / "grads"
        self.root = Path(cache_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.dataset_id = dataset_id
        self.shard_size = shard_size
        self.invalidations = 0
        self._open: dict[tuple[str, int], tuple[np.memmap, np.memmap]] = {}
        self._hashes: dict[int, str] = {}

    def teacher_hash(self, teacher: Classifier) -> str:
        key = id(teacher)
        if key not in self._hashes:
            self._hashes[key] = teacher.content_hash()
        return self._hashes[key]

    def _path(self, teacher_key: str, shard: int) -> Path:
        return self.root / f"{self.dataset_id}__{teacher_key}__shard{shard:05d}.bin"

    def _shard(self, teacher_key: str, thash: str, shard: int, dim: int, dtype: np.dtype):
        handle = self._open.get((teacher_key, shard))
        if handle is not None and handle[2] == thash:
            return handle[0], handle[1]
        path = self._path(teacher_key, shard)
        header = {
            "teacher_hash": thash,
            "dataset_id": self.dataset_id,
            "dim": dim,
            "dtype": np.dtype(dtype).newbyteorder("<").str,
            "id_start": shard * self.shard_size,
            "id_stop": (shard + 1) * self.shard_size,
        }
        if path.exists() and self._read_header(path) != header:
            logger.info("gradient cache %s is stale; recomputing", path.name)
            path.unlink()
            self.invalidations += 1
        hbytes = json.dumps(header, sort_keys=True).encode()
        offset = len(_MAGIC) + 4 + len(hbytes)
        n = self.shard_size
        itemsize = np.dtype(dtype).itemsize
        if not path.exists():
            with open(path, "wb") as fh:
                fh.write(_MAGIC + struct.pack("<I", len(hbytes)) + hbytes)
                fh.truncate(offset + n + n * dim * itemsize)
        present = np.memmap(path, dtype=np.uint8, mode="r+", offset=offset, shape=(n,))
        rows = np.memmap(path, dtype=header["dtype"], mode="r+", offset=offset + n, shape=(n, dim))
        self._open[(teacher_key, shard)] = (present, rows, thash)
        return present, rows

    @staticmethod
    def _read_header(path: Path) -> dict | None:
        try:
            with open(path, "rb") as fh:
                if fh.read(len(_MAGIC)) != _MAGIC:
                    return None
                (hlen,) = struct.unpack("<I", fh.read(4))
                return json.loads(fh.read(hlen))
        except (OSError, ValueError, struct.error):
            return None

    def lookup(self, teacher_key: str, teacher: Classifier, ids: np.ndarray, dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
        """Cached rows for ``ids`` and a boolean mask of which were present."""
        thash = self.teacher_hash(teacher)
        out = np.zeros((len(ids), dim), dtype=dtype)
        hit = np.zeros(len(ids), dtype=bool)
        for shard in np.unique(ids // self.shard_size):
            sel = np.flatnonzero(ids // self.shard_size == shard)
            present, rows = self._shard(teacher_key, thash, int(shard), dim, dtype)
            local = ids[sel] - shard * self.shard_size
            ok = present[local] == 1
            out[sel[ok]] = rows[local[ok]]
            hit[sel[ok]] = True
        return out, hit

    def store(self, teacher_key: str, teacher: Classifier, ids: np.ndarray, values: np.ndarray) -> None:
        thash = self.teacher_hash(teacher)
        for shard in np.unique(ids // self.shard_size):
            sel = np.flatnonzero(ids // self.shard_size == shard)
            present, rows = self._shard(teacher_key, thash, int(shard), values.shape[1], values.dtype)
            local = ids[sel] - shard * self.shard_size
            rows[local] = values[sel]
            present[local] = 1
            rows.flush()
            present.flush()


def teacher_gradient_bundle(
    teachers: Sequence[Classifier],
    batch: ImageBatch,
    cache: GradientCache | None = None,
    teacher_keys: Sequence[str] | None = None,
) -> GradientBundle:
    """Per-teacher input gradients of the cross-entropy w.r.t. the true labels."""
    keys = list(teacher_keys or [f"t{i}-{t.spec.arch_id}" for i, t in enumerate(teachers)])
    ids = batch.ids.numpy()
    if cache is not None and (ids < 0).any():
        raise ValueError("cached gradients need non-negative sample ids")
    rows = []
    for key, teacher in zip(keys, teachers):
        if cache is None:
            rows.append(input_gradient(teacher, batch).detach())
            continue
        dim = batch.pixels[0].numel()
        np_dtype = torch.empty((), dtype=teacher.dtype).numpy().dtype
        cached, hit = cache.lookup(key, teacher, ids, dim, np_dtype)
        if not hit.all():
            miss = np.flatnonzero(~hit)
            fresh = input_gradient(teacher, batch.select(torch.from_numpy(miss))).detach().numpy()
            cached[miss] = fresh
            cache.store(key, teacher, ids[miss], fresh)
        rows.append(torch.from_numpy(cached))
    dtype = torch.promote_types(*[r.dtype for r in rows]) if len(rows) > 1 else rows[0].dtype
    return GradientBundle(torch.stack([r.to(dtype) for r in rows]), batch.ids.clone())


# --------------------------------------------------------------------------
# gradient matching loss


def check_second_order(model: Classifier) -> None:
    """Fail fast if the model cannot differentiate its input gradient w.r.t. its parameters."""
    c, h, w = model.input_shape
    probe = ImageBatch(torch.full((1, c, h, w), 0.5, dtype=model.dtype), torch.zeros(1, dtype=torch.long))
    params = [p for p in model.parameters() if p.requires_grad]
    try:
        g = input_gradient(model, probe, create_graph=True)
        if not g.requires_grad:
            raise SecondOrderUnsupportedError("input gradient is not differentiable w.r.t. parameters")
        grads = torch.autograd.grad(g.pow(2).sum(), params, allow_unused=True)
    except RuntimeError as e:
        if isinstance(e, SecondOrderUnsupportedError):
            raise
        raise SecondOrderUnsupportedError(f"{model.spec.arch_id}: second-order gradients unavailable ({e})") from e
    # a first-order-only op cuts the graph, leaving no parameter reachable
    if params and all(gp is None for gp in grads):
        raise SecondOrderUnsupportedError(f"{model.spec.arch_id}: input gradient does not depend on the parameters")


def grad_loss(student: Classifier, batch: ImageBatch, d: torch.Tensor) -> torch.Tensor:
    """Batch mean of ||grad_x L_S(x) - d(x)||^2, differentiable w.r.t. the student."""
    gs = input_gradient(student, batch, create_graph=True)
    if d.shape != gs.shape:
        raise ValueError(f"target gradient has shape {tuple(d.shape)}, expected {tuple(gs.shape)}")
    return (gs - d.to(gs.dtype)).pow(2).sum(1).mean()


def total_loss(kd, grad, lam: float):
    return kd + lam * grad


# --------------------------------------------------------------------------
# training loop


@dataclass
class CKLConfig:
    lam: float = 500.0
    temperature: float = 1.0
    epochs: int = 600
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 3e-4
    lr_schedule: str = "cosine"
    grad_mode: str = "pcgrad"
    projection_order_seed: int = 0
    cache_teacher_gradients: bool = False
    cache_dir: str | None = None
    # extension, not part of the objective by default: weight of a ground-truth CE term
    ce_weight: float = 0.0
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")
        if self.augment and self.cache_teacher_gradients:
            logger.warning("augmentation is on; teacher gradient caching disabled")
            self.cache_teacher_gradients = False

    @property
    def uses_gradients(self) -> bool:
        return self.grad_mode != "off" and self.lam > 0

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("cache_dir")
        return stable_hash(d)[:16]


@dataclass
class CKLLog:
    config: dict
    epochs: list[dict] = field(default_factory=list)

    def column(self, name: str) -> list:
        return [row[name] for row in self.epochs]


def check_compatible(student: Classifier, teachers: Sequence[Classifier]) -> None:
    if not teachers:
        raise ValueError("at least one teacher is required")
    for t in teachers:
        if t.num_classes != student.num_classes:
            raise ValueError(
                f"teacher {t.spec.arch_id} has {t.num_classes} classes, student has {student.num_classes}"
            )
        if t.input_shape != student.input_shape:
            raise ValueError(f"teacher {t.spec.arch_id} expects {t.input_shape}, student {student.input_shape}")


def train_student(
    student: Classifier,
    teachers: Sequence[Classifier],
    train_data: ImageDataset,
    config: CKLConfig | None = None,
    val_data: ImageDataset | None = None,
    teacher_keys: Sequence[str] | None = None,
) -> tuple[Classifier, CKLLog]:
    """Train ``student`` in place on the CKL objective.

    Teachers are frozen for the duration and restored afterwards.  Each
    epoch logs the batch-mean L_KD, L_Grad, lambda * L_Grad and (if
    ``val_data`` is given) validation accuracy.
    """
    cfg = config or CKLConfig()
    check_compatible(student, teachers)
    if train_data.num_classes != student.num_classes:
        raise ValueError("dataset and student disagree on the number of classes")
    if cfg.uses_gradients:
        check_second_order(student)
    log = CKLLog(config=cfg.to_dict())
    if cfg.epochs <= 0:
        return student, log

    cache = None
    if cfg.cache_teacher_gradients and cfg.uses_gradients:
        cache = GradientCache(cfg.cache_dir, dataset_id=train_data.dataset_id)

    frozen = [(p, p.requires_grad) for t in teachers for p in t.parameters()]
    for p, _ in frozen:
        p.requires_grad_(False)
    for t in teachers:
        t.eval()

    seed_everything(cfg.seed)
    steps_per_epoch = math.ceil(len(train_data) / cfg.batch_size)
    opt, sched = make_optimizer(student, cfg, cfg.epochs * steps_per_epoch)
    aug_gen = torch.Generator().manual_seed(cfg.seed + 1)
    try:
        for epoch in range(cfg.epochs):
            student.train()
            t0 = time.perf_counter()
            sums = {"kd": 0.0, "grad": 0.0, "ce": 0.0}
            seen = 0
            batches = train_data.batches(
                cfg.batch_size, shuffle=True, seed=cfg.seed * 100_003 + epoch, dtype=student.dtype
            )
            for step, batch in enumerate(batches):
                if cfg.augment:
                    batch = augment_batch(batch, aug_gen)
                kd = kd_loss(teachers, student, batch, cfg.temperature)
                loss = kd
                gl = torch.zeros((), dtype=student.dtype)
                if cfg.uses_gradients:
                    bundle = teacher_gradient_bundle(teachers, batch, cache, teacher_keys)
                    d = combine_teacher_gradients(
                        bundle.per_teacher, cfg.grad_mode, cfg.projection_order_seed, batch.ids.numpy()
                    )
                    gl = grad_loss(student, batch, d)
                    loss = total_loss(kd, gl, cfg.lam)
                if cfg.ce_weight:
                    ce = F.cross_entropy(student(batch.pixels), batch.labels)
                    loss = loss + cfg.ce_weight * ce
                    sums["ce"] += ce.item() * len(batch)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite CKL loss {loss.item()} at epoch {epoch}, batch {step} "
                        f"(kd={kd.item()}, grad={gl.item()})"
                    )
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                sched.step()
                sums["kd"] += kd.item() * len(batch)
                sums["grad"] += gl.item() * len(batch)
                seen += len(batch)
            row = {
                "epoch": epoch,
                "kd_loss": sums["kd"] / seen,
                "grad_loss": sums["grad"] / seen,
                "weighted_grad_loss": cfg.lam * sums["grad"] / seen,
                "seconds": time.perf_counter() - t0,
            }
            if cfg.ce_weight:
                row["ce_loss"] = sums["ce"] / seen
            if val_data is not None:
                row["val_acc"] = accuracy(student, val_data.as_batch(student.dtype))
            log.epochs.append(row)
            logger.info("ckl epoch %d %s", epoch, row)
    finally:
        for p, flag in frozen:
            p.requires_grad_(flag)
    student.eval()
    student.trained_on = train_data.dataset_id
    student.training_config_hash = cfg.config_hash()
    return student, log
