import math
import os

import numpy as np
import pytest
import torch
import torch.nn as nn

from ckl.modelzoo import (
    ARCHITECTURES,
    ArchitectureSpec,
    CheckpointError,
    Classifier,
    DatasetCorruptError,
    DatasetNotFoundError,
    ImageBatch,
    ShapeMismatchError,
    TrainConfig,
    TrainingDivergedError,
    UnknownArchitectureError,
    accuracy,
    build_model,
    ce_loss,
    checkpoint_hash,
    convert_cifar,
    forward_logits,
    input_gradient,
    load_checkpoint,
    load_dataset,
    make_synthetic,
    read_manifest,
    save_checkpoint,
    train_supervised,
)

from .conftest import SHAPE


def _batch(n=4, shape=(3, 32, 32), k=10, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return ImageBatch(torch.rand(n, *shape, generator=g, dtype=dtype), torch.randint(0, k, (n,), generator=g))


class ConstantLogits(nn.Module):
    """Logits that ignore the input."""

    def __init__(self, values):
        super().__init__()
        self.values = nn.Parameter(torch.as_tensor(values, dtype=torch.float64))

    def forward(self, x):
        return self.values.expand(x.shape[0], -1)


class Logistic(nn.Module):
    """Two-class model with logits (0, w.x)."""

    def __init__(self, w):
        super().__init__()
        self.w = nn.Parameter(torch.as_tensor(w, dtype=torch.float64))

    def forward(self, x):
        z = x.flatten(1) @ self.w
        return torch.stack([torch.zeros_like(z), z], dim=1)


def _wrap(net, k, shape):
    return Classifier(ArchitectureSpec("mlp_smooth", k, shape), net)


# -- build_model ------------------------------------------------------------


def test_build_small_cnn_output_shape():
    m = build_model(ArchitectureSpec("small_cnn", 10, (3, 32, 32)), seed=0)
    assert forward_logits(m, _batch(5)).shape == (5, 10)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_build_is_deterministic(arch):
    spec = ArchitectureSpec(arch, 10, SHAPE)
    a, b = build_model(spec, 3), build_model(spec, 3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert torch.equal(pa, pb)
    c = build_model(spec, 4)
    assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_unknown_architecture_rejected():
    with pytest.raises(UnknownArchitectureError, match="unknown architecture"):
        ArchitectureSpec("resnet50_full")
    with pytest.raises(UnknownArchitectureError, match="unknown architecture"):
        build_model("resnet50_full")


@pytest.mark.parametrize(
    "kwargs",
    [dict(num_classes=1), dict(input_shape=(3, 0, 32)), dict(input_shape=(3, 32)), dict(activation="tanh")],
)
def test_spec_invariants(kwargs):
    with pytest.raises(ValueError):
        ArchitectureSpec("small_cnn", **kwargs)


def test_mlp_smooth_defaults_to_float64_softplus():
    spec = ArchitectureSpec("mlp_smooth", 3, (1, 2, 2))
    assert spec.activation == "softplus"
    assert build_model(spec).dtype == torch.float64


def test_small_cnn_parameter_budget():
    from ckl.modelzoo import count_parameters

    n = count_parameters(build_model(ArchitectureSpec("small_cnn", 10, (3, 32, 32))))
    assert 150_000 <= n <= 250_000


# -- forward_logits ---------------------------------------------------------


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_forward_shape_and_finite(arch):
    m = build_model(ArchitectureSpec(arch, 7, SHAPE), 0)
    out = forward_logits(m, _batch(4, SHAPE, k=7))
    assert out.shape == (4, 7)
    assert torch.isfinite(out).all()


def test_forward_is_deterministic():
    m = build_model(ArchitectureSpec("vit_tiny", 10, SHAPE), 0)
    b = _batch(4, SHAPE)
    assert torch.equal(forward_logits(m, b), forward_logits(m, b))


def test_forward_shape_mismatch():
    m = build_model(ArchitectureSpec("small_cnn", 10, SHAPE), 0)
    with pytest.raises(ShapeMismatchError):
        forward_logits(m, _batch(2, (3, 32, 32)))


def test_zero_head_gives_equal_logits():
    m = build_model(ArchitectureSpec("small_cnn", 10, SHAPE), 0)
    last = m.net.head[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.zero_()
    out = forward_logits(m, _batch(3, SHAPE))
    assert torch.equal(out, out[:, :1].expand_as(out))


# -- ImageBatch -------------------------------------------------------------


def test_image_batch_validation():
    with pytest.raises(ValueError):
        ImageBatch(torch.full((1, 1, 2, 2), 1.5), torch.tensor([0]))
    with pytest.raises(ValueError):
        ImageBatch(torch.zeros(0, 1, 2, 2), torch.zeros(0, dtype=torch.long))
    with pytest.raises(ShapeMismatchError):
        ImageBatch(torch.zeros(2, 1, 2, 2), torch.tensor([0]))


# -- ce_loss ----------------------------------------------------------------


def test_ce_uniform_logits_is_log_k():
    m = _wrap(ConstantLogits(torch.zeros(10)), 10, (1, 2, 2))
    b = ImageBatch(torch.rand(6, 1, 2, 2), torch.arange(6))
    assert ce_loss(m, b).item() == pytest.approx(math.log(10), abs=1e-12)
    assert math.log(10) == pytest.approx(2.302585, abs=1e-6)


def test_ce_large_margin_goes_to_zero():
    logits = torch.zeros(10)
    logits[3] = 20.0
    m = _wrap(ConstantLogits(logits), 10, (1, 2, 2))
    b = ImageBatch(torch.rand(4, 1, 2, 2), torch.full((4,), 3))
    assert 0 <= ce_loss(m, b).item() < 1e-3


def test_ce_matches_logsumexp_recomputation():
    m = build_model(ArchitectureSpec("mlp_smooth", 5, (2, 3, 3)), 1)
    b = _batch(7, (2, 3, 3), k=5, seed=2, dtype=torch.float64)
    z = forward_logits(m, b).numpy()
    y = b.labels.numpy()
    expected = 0.0
    for row, label in zip(z, y):
        mx = max(row)
        expected += (mx + math.log(sum(math.exp(v - mx) for v in row))) - row[label]
    expected /= len(y)
    assert float(ce_loss(m, b)) == pytest.approx(expected, rel=1e-12)


# -- input_gradient ---------------------------------------------------------


def test_input_gradient_zero_when_input_ignored():
    m = _wrap(ConstantLogits(torch.randn(4)), 4, (1, 3, 3))
    g = input_gradient(m, ImageBatch(torch.rand(5, 1, 3, 3, dtype=torch.float64), torch.arange(5) % 4))
    assert g.shape == (5, 9)
    assert torch.count_nonzero(g) == 0


def test_input_gradient_logistic_closed_form():
    w = torch.tensor([0.7, -1.3, 2.1, 0.4], dtype=torch.float64)
    m = _wrap(Logistic(w), 2, (1, 2, 2))
    x = torch.rand(6, 1, 2, 2, dtype=torch.float64)
    y = torch.tensor([0, 1, 1, 0, 1, 0])
    g = input_gradient(m, ImageBatch(x, y))
    p1 = torch.sigmoid(x.flatten(1) @ w)
    expected = (p1 - y.double())[:, None] * w[None, :]
    torch.testing.assert_close(g, expected, rtol=1e-12, atol=1e-14)


def test_input_gradient_matches_finite_differences():
    m = build_model(ArchitectureSpec("mlp_smooth", 4, (2, 4, 4)), 5)
    b = _batch(3, (2, 4, 4), k=4, seed=9, dtype=torch.float64)
    g = input_gradient(m, b)
    h = 1e-4
    rng = np.random.default_rng(0)
    ok = total = 0
    for n in range(3):
        for idx in rng.choice(32, size=20, replace=False):
            x = b.pixels[n : n + 1].clone().flatten()
            xp, xm = x.clone(), x.clone()
            xp[idx] += h
            xm[idx] -= h
            lp = nn.functional.cross_entropy(m(xp.view(1, 2, 4, 4)), b.labels[n : n + 1])
            lm = nn.functional.cross_entropy(m(xm.view(1, 2, 4, 4)), b.labels[n : n + 1])
            fd = float(lp - lm) / (2 * h)
            an = float(g[n, idx])
            total += 1
            ok += abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-8)
    assert ok / total >= 0.95


def test_input_gradient_independent_of_batch_size():
    m = build_model(ArchitectureSpec("small_cnn", 10, SHAPE), 0)
    b = _batch(6, SHAPE)
    full = input_gradient(m, b)
    single = input_gradient(m, b.select(slice(2, 3)))
    torch.testing.assert_close(full[2:3], single, rtol=1e-5, atol=1e-7)


# -- checkpoints ------------------------------------------------------------


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_checkpoint_roundtrip_bit_identical(tmp_path, arch):
    m = build_model(ArchitectureSpec(arch, 10, SHAPE), 11)
    probe = _batch(4, SHAPE, seed=5)
    before = forward_logits(m, probe)
    save_checkpoint(m, tmp_path / "ck", training_config={"epochs": 0})
    loaded = load_checkpoint(tmp_path / "ck")
    assert torch.equal(before, forward_logits(loaded, probe))
    assert loaded.spec == m.spec
    assert loaded.content_hash() == m.content_hash()


def test_checkpoint_manifest_contents(tmp_path):
    m = build_model(ArchitectureSpec("small_cnn", 10, SHAPE), 0)
    m.trained_on = "synthetic-k10-s0"
    save_checkpoint(m, tmp_path / "ck")
    man = read_manifest(tmp_path / "ck")
    assert man["format_version"] == 1
    assert man["arch_id"] == "small_cnn"
    assert man["input_shape"] == list(SHAPE)
    assert man["dataset_id"] == "synthetic-k10-s0"
    blob = (tmp_path / "ck" / "weights.bin").read_bytes()
    assert len(blob) == 4 * sum(p.numel() for p in m.net.state_dict().values())
    first = m.net.state_dict()[man["parameters"][0]["name"]].flatten()[0].item()
    assert np.frombuffer(blob[:4], dtype="<f4")[0] == np.float32(first)


def test_checkpoint_arch_mismatch(tmp_path):
    save_checkpoint(build_model(ArchitectureSpec("small_cnn", 10, SHAPE)), tmp_path / "ck")
    with pytest.raises(CheckpointError, match="small_cnn"):
        load_checkpoint(tmp_path / "ck", arch_id="vit_tiny")


def test_checkpoint_requires_format_version(tmp_path):
    save_checkpoint(build_model(ArchitectureSpec("mlp_smooth", 3, (1, 2, 2))), tmp_path / "ck")
    man = tmp_path / "ck" / "manifest.json"
    man.write_text(man.read_text().replace('"format_version": 1,', ""))
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_truncated_weights(tmp_path):
    save_checkpoint(build_model(ArchitectureSpec("mlp_smooth", 3, (1, 2, 2))), tmp_path / "ck")
    w = tmp_path / "ck" / "weights.bin"
    w.write_bytes(w.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_hash_is_content_based(tmp_path):
    m = build_model(ArchitectureSpec("small_cnn", 10, SHAPE), 0)
    save_checkpoint(m, tmp_path / "a")
    save_checkpoint(m, tmp_path / "b")
    assert checkpoint_hash(tmp_path / "a") == checkpoint_hash(tmp_path / "b")
    save_checkpoint(build_model(ArchitectureSpec("small_cnn", 10, SHAPE), 1), tmp_path / "c")
    assert checkpoint_hash(tmp_path / "a") != checkpoint_hash(tmp_path / "c")


# -- training ---------------------------------------------------------------


def test_zero_epochs_leaves_parameters(synth_train):
    m = build_model(ArchitectureSpec("small_cnn", 10, SHAPE), 0)
    before = [p.clone() for p in m.parameters()]
    _, log = train_supervised(m, synth_train, TrainConfig(epochs=0))
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))
    assert log.epochs == []


def test_training_defaults_logged(synth_train):
    _, log = train_supervised(build_model(ArchitectureSpec("mlp_smooth", 10, SHAPE)), synth_train.subset(64),
                              TrainConfig(epochs=1))
    assert log.config["lr"] == 0.1
    assert log.config["momentum"] == 0.9
    assert log.config["weight_decay"] == 0.0003
    assert log.config["lr_schedule"] == "cosine"


def test_training_is_deterministic(synth_train):
    data = synth_train.subset(256)
    runs = []
    for _ in range(2):
        m = build_model(ArchitectureSpec("small_cnn", 10, SHAPE), 0)
        train_supervised(m, data, TrainConfig(epochs=1, batch_size=64, seed=3, augment=True))
        runs.append([p.detach().clone() for p in m.parameters()])
    assert all(torch.equal(a, b) for a, b in zip(*runs))


def test_training_divergence_aborts(synth_train):
    m = build_model(ArchitectureSpec("small_cnn", 10, SHAPE), 0)
    with pytest.raises(TrainingDivergedError, match="batch"):
        train_supervised(m, synth_train.subset(512), TrainConfig(epochs=3, lr=1e12, lr_schedule="constant"))


def test_small_cnn_learns_synthetic(trained_cnn, synth_test):
    # synthetic stand-in for the CIFAR accuracy floor, checked in the acceptance suite
    assert accuracy(trained_cnn, synth_test.as_batch()) >= 0.60
    assert trained_cnn.trained_on.startswith("synthetic")


# -- datasets ---------------------------------------------------------------


def test_synthetic_is_deterministic():
    a = make_synthetic(2, 256, seed=1)
    b = load_dataset("synthetic", "train", num_classes=2, n=256, seed=1)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)


def test_synthetic_splits_share_classes_but_not_samples():
    tr = make_synthetic(4, 64, seed=2, split="train")
    te = make_synthetic(4, 64, seed=2, split="test")
    assert tr.dataset_id == te.dataset_id
    assert not np.array_equal(tr.images, te.images)


def test_batches_respect_invariants(synth_train):
    seen = 0
    for b in synth_train.batches(300, shuffle=True, seed=0):
        assert b.pixels.min() >= 0 and b.pixels.max() <= 1
        assert b.labels.min() >= 0 and b.labels.max() < 10
        assert torch.equal(b.pixels * 255, (b.pixels * 255).round())
        seen += len(b)
    assert seen == len(synth_train)


def test_stratified_subset_balanced(synth_train):
    sub = synth_train.stratified_subset(200, seed=1)
    assert len(sub) == 200
    assert np.bincount(sub.labels, minlength=10).min() == 20


def _write_cifar_binary(root, dataset, n, label_bytes):
    rng = np.random.default_rng(0)
    k = 10 if dataset == "cifar10" else 100
    rec = np.zeros((n, label_bytes + 3072), dtype=np.uint8)
    labels = rng.integers(0, k, n)
    rec[:, label_bytes - 1] = labels
    if label_bytes == 2:
        rec[:, 0] = labels // 5
    rec[:, label_bytes:] = rng.integers(0, 256, (n, 3072))
    return rec, labels


def test_cifar10_binary_test_split(tmp_path):
    d = tmp_path / "cifar-10-batches-bin"
    d.mkdir()
    rec, labels = _write_cifar_binary(tmp_path, "cifar10", 10_000, 1)
    rec.tofile(d / "test_batch.bin")
    ds = load_dataset("cifar10", "test", data_dir=tmp_path)
    assert len(ds) == 10_000 and ds.num_classes == 10 and ds.image_shape == (3, 32, 32)
    assert np.array_equal(ds.labels, labels)
    b = ds.subset(3).as_batch()
    assert torch.equal(b.pixels[0].flatten(), torch.from_numpy(rec[0, 1:]).float() / 255)


def test_cifar100_binary_uses_fine_labels(tmp_path):
    d = tmp_path / "cifar-100-binary"
    d.mkdir()
    rec, labels = _write_cifar_binary(tmp_path, "cifar100", 10_000, 2)
    rec.tofile(d / "test.bin")
    ds = load_dataset("cifar100", "test", data_dir=tmp_path)
    assert ds.num_classes == 100
    assert np.array_equal(ds.labels, labels)


def test_cifar_pickle_layout_and_converter(tmp_path):
    import pickle

    d = tmp_path / "cifar-10-batches-py"
    d.mkdir()
    rng = np.random.default_rng(1)
    data = rng.integers(0, 256, (10_000, 3072), dtype=np.uint8)
    labels = rng.integers(0, 10, 10_000).tolist()
    with open(d / "test_batch", "wb") as fh:
        pickle.dump({b"data": data, b"labels": labels}, fh)
    ds = load_dataset("cifar10", "test", data_dir=tmp_path)
    assert np.array_equal(ds.images.reshape(10_000, -1), data)
    out = convert_cifar("cifar10", tmp_path, tmp_path / "internal", splits=("test",))
    again = load_dataset("cifar10", "test", data_dir=tmp_path / "internal")
    assert out[0].name == "cifar10_test.npz"
    assert np.array_equal(again.images, ds.images)


def test_cifar_missing_names_path(tmp_path):
    with pytest.raises(DatasetNotFoundError, match=str(tmp_path)):
        load_dataset("cifar10", "test", data_dir=tmp_path)
    (tmp_path / "cifar-10-batches-bin").mkdir()
    with pytest.raises(DatasetNotFoundError, match="test_batch.bin"):
        load_dataset("cifar10", "test", data_dir=tmp_path)


def test_cifar_corrupt_file(tmp_path):
    d = tmp_path / "cifar-10-batches-bin"
    d.mkdir()
    np.zeros(3073 * 2 + 5, dtype=np.uint8).tofile(d / "test_batch.bin")
    with pytest.raises(DatasetCorruptError, match="test_batch.bin"):
        load_dataset("cifar10", "test", data_dir=tmp_path)


def test_cifar_data_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CKL_DATA_DIR", str(tmp_path))
    with pytest.raises(DatasetNotFoundError, match=str(tmp_path)):
        load_dataset("cifar100", "train")


_CIFAR = os.environ.get("CKL_DATA_DIR")


@pytest.mark.skipif(not _CIFAR, reason="CIFAR not available (set CKL_DATA_DIR)")
@pytest.mark.parametrize("dataset,split,n,k", [("cifar10", "test", 10_000, 10), ("cifar100", "train", 50_000, 100)])
def test_real_cifar_counts(dataset, split, n, k):
    try:
        ds = load_dataset(dataset, split)
    except DatasetNotFoundError:
        pytest.skip(f"{dataset} not under CKL_DATA_DIR")
    assert len(ds) == n and ds.num_classes == k and ds.image_shape == (3, 32, 32)
