"""Attack success metrics and model-pair matrices.

* ``asr``: fraction of adversarial examples not classified as the true label.
* ``tasr``: fraction classified exactly as the designated target.
* ``output_inconsistency``: mean symmetrised KL between two models' softmax outputs.
* ``conflict_ratio``: fraction of inputs whose input gradients have negative dot product.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attacks import AdversarialBatch, AttackConfig, attack_dataset, random_targets
from .modelzoo.core import ImageBatch, forward_logits, input_gradient, predict


def _as_batch(data) -> ImageBatch:
    return data if isinstance(data, ImageBatch) else data.as_batch()


def _model_id(m, i: int) -> str:
    spec = getattr(m, "spec", None)
    return f"{spec.arch_id}#{i}" if spec is not None else f"model#{i}"


def asr(target: nn.Module, adv: AdversarialBatch) -> float:
    """1 - #correct / #total, "correct" meaning argmax equals the original true label."""
    if len(adv) == 0:
        raise ValueError("empty adversarial batch")
    pred = predict(target, adv.adv_pixels)
    return 1.0 - int((pred == adv.labels).sum()) / len(adv)


def tasr(target: nn.Module, adv: AdversarialBatch) -> float:
    """#(argmax == target label) / #total."""
    if adv.target_labels is None:
        raise ValueError("adversarial batch carries no target labels")
    if len(adv) == 0:
        raise ValueError("empty adversarial batch")
    pred = predict(target, adv.adv_pixels)
    return int((pred == adv.target_labels).sum()) / len(adv)


def symmetric_kl(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """Per-row 0.5 * (KL(p||q) + KL(q||p)) of the softmax distributions."""
    lp = F.log_softmax(p_logits.double(), dim=1)
    lq = F.log_softmax(q_logits.double(), dim=1)
    return 0.5 * ((lp.exp() * (lp - lq)).sum(1) + (lq.exp() * (lq - lp)).sum(1))


def output_inconsistency(model_a: nn.Module, model_b: nn.Module, data, batch_size: int = 500) -> float:
    if model_a.num_classes != model_b.num_classes:
        raise ValueError(f"class counts differ: {model_a.num_classes} vs {model_b.num_classes}")
    batch = _as_batch(data)
    total = 0.0
    for i in range(0, len(batch), batch_size):
        x = batch.pixels[i : i + batch_size]
        total += float(symmetric_kl(forward_logits(model_a, x), forward_logits(model_b, x)).sum())
    return total / len(batch)


def conflict_ratio(model_a: nn.Module, model_b: nn.Module, data, batch_size: int = 500) -> float:
    """#{x : grad_a(x) . grad_b(x) < 0} / #x, gradients of the true-label cross-entropy."""
    batch = _as_batch(data)
    if len(batch) == 0:
        raise ValueError("empty dataset")
    conflicts = 0
    for i in range(0, len(batch), batch_size):
        sub = batch.select(slice(i, i + batch_size))
        ga = input_gradient(model_a, sub).double()
        gb = input_gradient(model_b, sub).double()
        conflicts += int(((ga * gb).sum(1) < 0).sum())
    return conflicts / len(batch)


@dataclass
class ModelMatrix:
    model_ids: list[str]
    values: np.ndarray
    metric: str
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source\\target", *self.model_ids])
        for mid, row in zip(self.model_ids, self.values):
            w.writerow([mid, *(repr(float(v)) for v in row)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_report(self) -> dict:
        return {
            "metric": self.metric,
            "model_ids": self.model_ids,
            "values": self.values.tolist(),
            "metadata": self.metadata,
        }

    def save(self, directory, stem: str) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.to_csv(d / f"{stem}.csv")
        (d / f"{stem}.json").write_text(json.dumps(self.to_report(), indent=2) + "\n")
        return [d / f"{stem}.csv", d / f"{stem}.json"]


class TransferMatrix(ModelMatrix):
    pass


class InconsistencyMatrix(ModelMatrix):
    pass


class ConflictMatrix(ModelMatrix):
    pass


def _ids(models, model_ids):
    return list(model_ids) if model_ids is not None else [_model_id(m, i) for i, m in enumerate(models)]


def _hashes(models) -> list:
    return [m.content_hash() if hasattr(m, "content_hash") else None for m in models]


def transfer_matrix(
    models: Sequence[nn.Module],
    attack_config: AttackConfig,
    data,
    pairwise_average: bool = False,
    model_ids: Sequence[str] | None = None,
    dataset_id: str | None = None,
) -> TransferMatrix:
    """Entry (i, j): success rate on model j of examples crafted on model i.

    The metric is tASR for targeted configs (random targets != label,
    drawn from ``attack_config.seed``) and ASR otherwise.  With
    ``pairwise_average`` the (i, j) and (j, i) entries are replaced by
    their mean, as when each model of a pair takes its turn as source.
    """
    if len(models) < 2:
        raise ValueError("a transfer matrix needs at least two models")
    batch = _as_batch(data)
    targeted = attack_config.targeted or attack_config.method == "logit"
    targets = random_targets(batch.labels, models[0].num_classes, attack_config.seed) if targeted else None
    metric = tasr if targeted else asr
    m = len(models)
    values = np.zeros((m, m))
    for i, src in enumerate(models):
        adv = attack_dataset(src, batch, attack_config, targets)
        for j, tgt in enumerate(models):
            values[i, j] = metric(tgt, adv)
    if pairwise_average:
        values = 0.5 * (values + values.T)
    return TransferMatrix(
        _ids(models, model_ids),
        values,
        "tasr" if targeted else "asr",
        {
            "attack_config": attack_config.to_dict(),
            "attack_config_hash": attack_config.config_hash(),
            "dataset_id": dataset_id or getattr(data, "dataset_id", None),
            "pairwise_average": pairwise_average,
            "model_hashes": _hashes(models),
            "n_samples": len(batch),
        },
    )


def inconsistency_matrix(models, data, model_ids=None, dataset_id=None) -> InconsistencyMatrix:
    m = len(models)
    values = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            values[i, j] = values[j, i] = output_inconsistency(models[i], models[j], data)
    return InconsistencyMatrix(
        _ids(models, model_ids),
        values,
        "symmetric_kl",
        {
            "symmetrization": "0.5*(KL(p_a||p_b)+KL(p_b||p_a))",
            "dataset_id": dataset_id or getattr(data, "dataset_id", None),
            "model_hashes": _hashes(models),
        },
    )


def conflict_matrix(models, data, model_ids=None, dataset_id=None) -> ConflictMatrix:
    m = len(models)
    values = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            values[i, j] = values[j, i] = conflict_ratio(models[i], models[j], data)
    return ConflictMatrix(
        _ids(models, model_ids),
        values,
        "conflict_ratio",
        {"dataset_id": dataset_id or getattr(data, "dataset_id", None), "model_hashes": _hashes(models)},
    )


@dataclass
class TimingReport:
    names: list[str]
    seconds: list[float]

    @property
    def ratios(self) -> list[float]:
        return [s / self.seconds[0] for s in self.seconds]

    def rows(self) -> list[dict]:
        return [{"source": n, "seconds": s, "ratio": r} for n, s, r in zip(self.names, self.seconds, self.ratios)]


def timing_report(
    sources: Sequence[nn.Module],
    attack_config: AttackConfig,
    data,
    names: Sequence[str] | None = None,
    repeats: int = 1,
) -> TimingReport:
    """Wall-clock seconds to attack ``data`` with each source (after one untimed warm-up step)."""
    if not sources:
        raise ValueError("timing_report needs at least one source")
    batch = _as_batch(data)
    targeted = attack_config.targeted or attack_config.method == "logit"
    targets = random_targets(batch.labels, sources[0].num_classes, attack_config.seed) if targeted else None
    warm = AttackConfig(**{**attack_config.to_dict(), "iterations": 1})
    seconds = []
    for src in sources:
        attack_dataset(src, batch.select(slice(0, min(8, len(batch)))), warm,
                       None if targets is None else targets[: min(8, len(batch))])
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            attack_dataset(src, batch, attack_config, targets, batch_size=len(batch))
            best = min(best, time.perf_counter() - t0)
        seconds.append(best)
    return TimingReport(list(names) if names else [_model_id(s, i) for i, s in enumerate(sources)], seconds)
