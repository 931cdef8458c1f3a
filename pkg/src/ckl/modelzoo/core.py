from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .._utils import flatten_per_sample, git_blob_hash
from .architectures import REGISTRY, ArchitectureSpec, UnknownArchitectureError


class ShapeMismatchError(ValueError):
    pass


class NotDifferentiableError(RuntimeError):
    pass


@dataclass
class ImageBatch:
    """N images in [0, 1] with integer labels.

    ``ids`` are dataset-level sample identifiers; they key the teacher
    gradient cache and per-sample projection orders.
    """

    pixels: torch.Tensor
    labels: torch.Tensor
    ids: torch.Tensor | None = None

    def __post_init__(self):
        if not isinstance(self.pixels, torch.Tensor):
            self.pixels = torch.as_tensor(self.pixels)
        if not torch.is_floating_point(self.pixels):
            raise TypeError("pixels must be a floating point tensor")
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.pixels.ndim != 4:
            raise ShapeMismatchError(f"pixels must be N x C x H x W, got shape {tuple(self.pixels.shape)}")
        n = self.pixels.shape[0]
        if n < 1:
            raise ValueError("an ImageBatch needs at least one image")
        if self.labels.shape != (n,):
            raise ShapeMismatchError(f"expected {n} labels, got shape {tuple(self.labels.shape)}")
        if self.labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values must lie in [0, 1], got range [{lo}, {hi}]")
        if self.ids is None:
            self.ids = torch.arange(n)
        else:
            self.ids = torch.as_tensor(self.ids, dtype=torch.long)

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def to(self, dtype: torch.dtype) -> "ImageBatch":
        if self.pixels.dtype == dtype:
            return self
        return ImageBatch(self.pixels.to(dtype), self.labels, self.ids)

    def select(self, index) -> "ImageBatch":
        return ImageBatch(self.pixels[index], self.labels[index], self.ids[index])


class Classifier(nn.Module):
    """A network plus the metadata needed to identify and reproduce it."""

    def __init__(
        self,
        spec: ArchitectureSpec,
        net: nn.Module,
        trained_on: str | None = None,
        training_config_hash: str | None = None,
    ):
        super().__init__()
        self.spec = spec
        self.net = net
        self.trained_on = trained_on
        self.training_config_hash = training_config_hash
        self.forward_calls = 0

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.spec.input_shape

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.forward_calls += 1
        return self.net(x)

    def parameter_bytes(self) -> bytes:
        chunks = []
        for t in self.net.state_dict().values():
            a = t.detach().cpu().numpy()
            chunks.append(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
        return b"".join(chunks)

    def content_hash(self) -> str:
        return git_blob_hash(repr(self.spec.to_dict()).encode() + self.parameter_bytes())

    def __repr__(self) -> str:
        return f"Classifier({self.spec.arch_id}, K={self.num_classes}, input={self.input_shape})"


def build_model(spec: ArchitectureSpec | str, seed: int = 0, **spec_kwargs) -> Classifier:
    """Freshly initialised classifier; the same (spec, seed) gives identical weights."""
    if isinstance(spec, str):
        spec = ArchitectureSpec(spec, **spec_kwargs)
    if spec.arch_id not in REGISTRY:
        raise UnknownArchitectureError(f"unknown architecture {spec.arch_id!r}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = REGISTRY[spec.arch_id](spec)
    net = net.to(spec.dtype)
    model = Classifier(spec, net)
    model.eval()
    return model


def _check_input(model: nn.Module, pixels: torch.Tensor) -> None:
    shape = getattr(model, "input_shape", None)
    if shape is not None and tuple(pixels.shape[1:]) != tuple(shape):
        raise ShapeMismatchError(
            f"batch has image shape {tuple(pixels.shape[1:])}, model expects {tuple(shape)}"
        )


def _model_dtype(model: nn.Module) -> torch.dtype:
    return getattr(model, "dtype", None) or next(model.parameters()).dtype


def forward_logits(model: nn.Module, batch: ImageBatch | torch.Tensor) -> torch.Tensor:
    """N x K logits in evaluation mode, without building an autograd graph."""
    pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
    _check_input(model, pixels)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(pixels.to(_model_dtype(model)))
    finally:
        model.train(was_training)


def per_sample_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels, reduction="none")


def ce_loss(model: nn.Module, batch: ImageBatch) -> torch.Tensor:
    """Mean cross-entropy of the model on the batch (differentiable w.r.t. parameters)."""
    _check_input(model, batch.pixels)
    logits = model(batch.pixels.to(_model_dtype(model)))
    _check_labels(logits, batch.labels)
    return F.cross_entropy(logits, batch.labels)


def _check_labels(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if labels.max() >= logits.shape[1]:
        raise ValueError(f"label {int(labels.max())} out of range for {logits.shape[1]} classes")


def input_gradient(
    model: nn.Module,
    batch: ImageBatch,
    labels: torch.Tensor | None = None,
    create_graph: bool = False,
) -> torch.Tensor:
    """Per-sample gradient of the cross-entropy w.r.t. the input, flattened to N x D.

    Each row is the gradient of that sample's own (unreduced) loss, so the
    values do not depend on the batch size.  With ``create_graph`` the result
    stays differentiable w.r.t. the model parameters.
    """
    _check_input(model, batch.pixels)
    labels = batch.labels if labels is None else labels
    x = batch.pixels.detach().to(_model_dtype(model)).requires_grad_(True)
    with torch.enable_grad():
        logits = model(x)
        if not torch.is_floating_point(logits):
            raise NotDifferentiableError("model produced non floating point logits")
        _check_labels(logits, labels)
        loss = per_sample_ce(logits, labels).sum()
        if not loss.requires_grad:
            return torch.zeros(x.shape[0], x[0].numel(), dtype=x.dtype)
        (grad,) = torch.autograd.grad(loss, x, create_graph=create_graph, allow_unused=True)
    if grad is None:
        return torch.zeros(x.shape[0], x[0].numel(), dtype=x.dtype)
    return flatten_per_sample(grad)


def predict(model: nn.Module, batch: ImageBatch | torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    """Argmax predictions; ties resolve to the lowest class index."""
    pixels = batch.pixels if isinstance(batch, ImageBatch) else batch
    out = [forward_logits(model, pixels[i : i + batch_size]).argmax(dim=1) for i in range(0, len(pixels), batch_size)]
    return torch.cat(out)


def accuracy(model: nn.Module, batch: ImageBatch, batch_size: int = 512) -> float:
    return float((predict(model, batch, batch_size) == batch.labels).double().mean())
