"""Acceptance suite: one PASS/FAIL line per criterion.

CIFAR-bound criteria read CIFAR-10 from ``CKL_DATA_DIR`` and fail with a
diagnostic when it is absent.  The inconsistency, conflict-ratio and timing
checks use the CIFAR-10 test subset when present, else the synthetic proxy.
Set ``CKL_WORK_DIR`` to keep desk-scale checkpoints between runs.
"""

import math
import os
import time

import numpy as np
import pytest
import torch

from ckl.attacks import METHODS, AttackConfig, attack_dataset, check_budget, ensemble_source, random_targets
from ckl.distill import grad_loss, kd_divergence, kd_loss, project_out, resolve_conflicts
from ckl.evaluation import asr, conflict_ratio, output_inconsistency, timing_report
from ckl.experiments import DeskSetup, ablation, ckl_gain, load_desk_data
from ckl.modelzoo import (
    ArchitectureSpec,
    DatasetNotFoundError,
    ImageBatch,
    TrainConfig,
    accuracy,
    build_model,
    make_synthetic,
    train_supervised,
)

EPS, ALPHA = 8 / 255, 1 / 255
PROXY_SHAPE = (3, 16, 16)


@pytest.fixture
def report(capsys):
    def _report(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return _report


def _cifar_or_none():
    try:
        return load_desk_data(DeskSetup())
    except DatasetNotFoundError as exc:
        return exc


@pytest.fixture(scope="module")
def cifar():
    return _cifar_or_none()


@pytest.fixture(scope="module")
def desk_data(cifar):
    """(train, test, label) on CIFAR when present, else the synthetic proxy."""
    if not isinstance(cifar, Exception):
        return (*cifar, "cifar10")
    train = make_synthetic(10, 2000, seed=0, split="train", image_shape=PROXY_SHAPE)
    test = make_synthetic(10, 500, seed=0, split="test", image_shape=PROXY_SHAPE)
    return train, test, "synthetic proxy"


@pytest.fixture(scope="module")
def desk_models(desk_data):
    train, _, label = desk_data
    epochs = 30 if label == "cifar10" else 6
    out = {}
    for name, arch, seed in (("cnn_a", "small_cnn", 10), ("cnn_b", "small_cnn", 11),
                             ("vit", "vit_tiny", 12), ("mixer", "mixer_tiny", 13)):
        m = build_model(ArchitectureSpec(arch, train.num_classes, train.image_shape), seed)
        train_supervised(m, train, TrainConfig(epochs=epochs, seed=seed))
        out[name] = m
    return out


def _work_dir():
    return os.environ.get("CKL_WORK_DIR")


# --------------------------------------------------------------------------
# exact properties


def test_projection_correctness(report):
    gen = torch.Generator().manual_seed(0)
    t0 = time.perf_counter()
    worst, pairs = 0.0, 0
    for dim in (2, 64, 3072):
        while pairs < 400 * (1 + (dim > 2) + (dim > 64)):
            gi = torch.randn(dim, generator=gen, dtype=torch.float64)
            gj = torch.randn(dim, generator=gen, dtype=torch.float64)
            if torch.dot(gi, gj) >= 0:
                gj = -gj
            out = project_out(gi, gj)
            cos = torch.dot(out, gj) / (out.norm() * gj.norm())
            worst = max(worst, abs(float(cos)))
            pairs += 1
    anti = [project_out(g, -2.5 * g) for g in torch.randn(50, 64, generator=gen, dtype=torch.float64)]
    anti_max = max(float(a.abs().max()) for a in anti)
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-6 and anti_max <= 1e-12 and seconds < 10 and pairs >= 1000
    report("projection correctness", ok,
           f"{pairs} pairs, max |cos| {worst:.2e}, anti-parallel max |out| {anti_max:.1e}, {seconds:.2f}s")


def test_two_teacher_postcondition(report):
    gen = torch.Generator().manual_seed(1)
    worst, n = math.inf, 0
    for dim in (2, 64, 3072):
        g = torch.randn(2, 400, dim, generator=gen, dtype=torch.float64)
        _, adj = resolve_conflicts(g, order_seed=0, return_adjusted=True)
        worst = min(worst, float((adj[0] * g[1]).sum(1).min()), float((adj[1] * g[0]).sum(1).min()))
        n += g.shape[1]
    report("two-teacher conflict postcondition", worst >= -1e-9 and n >= 1000,
           f"{n} pairs, min dot {worst:.2e}")


def test_second_order_finite_differences(report):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    s = build_model(ArchitectureSpec("mlp_smooth", 4, (2, 3, 3)), 3)
    b = ImageBatch(torch.rand(6, 2, 3, 3, dtype=torch.float64), torch.tensor([0, 1, 2, 3, 1, 0]))
    d = torch.randn(6, 18, dtype=torch.float64) * 0.1
    params = list(s.parameters())
    flat = torch.cat([a.flatten() for a in torch.autograd.grad(grad_loss(s, b, d), params)])
    sizes = np.cumsum([0] + [p.numel() for p in params])
    coords = np.random.default_rng(0).choice(flat.numel(), size=min(100, flat.numel()), replace=False)
    h, good = 1e-5, 0
    for c in coords:
        pi = int(np.searchsorted(sizes, c, side="right") - 1)
        p = params[pi].data.view(-1)
        local, orig = c - sizes[pi], p[c - sizes[pi]].item()
        p[local] = orig + h
        up = grad_loss(s, b, d).item()
        p[local] = orig - h
        down = grad_loss(s, b, d).item()
        p[local] = orig
        fd, an = (up - down) / (2 * h), float(flat[c])
        good += abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-7)
    frac, seconds = good / len(coords), time.perf_counter() - t0
    report("second-order check", len(coords) == 100 and frac >= 0.95 and seconds < 120,
           f"{good}/{len(coords)} coordinates within rel err 1e-4, {seconds:.1f}s")


def test_kd_identities(report):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        p = rng.dirichlet(np.ones(rng.integers(2, 20)))
        worst = max(worst, abs(float(kd_divergence(p, p))))
    net = build_model(ArchitectureSpec("small_cnn", 10, PROXY_SHAPE), 0)
    self_kd = abs(kd_loss([net], net, ImageBatch(torch.rand(16, *PROXY_SHAPE), torch.arange(16) % 10)).item())
    worked = float(kd_divergence([0.5, 0.5], [0.25, 0.75]))
    ok = worst <= 1e-9 and self_kd <= 1e-9 and abs(worked - 0.130812) <= 1e-6
    report("KD identities", ok, f"max |KL(p,p)| {worst:.1e}, self-distillation {self_kd:.1e}, worked {worked:.6f}")


# --------------------------------------------------------------------------
# attack contracts


def _attack_config(method, **kw):
    return AttackConfig.for_method(method, epsilon=EPS, alpha=ALPHA, iterations=30, di_low=14, di_high=16, **kw)


def _targets(method, batch):
    return random_targets(batch.labels, 10, seed=0) if method == "logit" else None


def test_attack_budget_contract(report, trained_cnn):
    data = make_synthetic(10, 1000, seed=3, split="test", image_shape=PROXY_SHAPE)
    batch = data.as_batch()
    lines, ok = [], True
    for method in METHODS:
        adv = attack_dataset(trained_cnn, data, _attack_config(method), _targets(method, batch))
        x = adv.adv_pixels.double()
        linf = float((x - batch.pixels.double()).abs().amax())
        in_range = bool(((x >= 0) & (x <= 1)).all())
        on_grid = float(((x * 255 - (x * 255).round()).abs() <= 1e-4).double().mean())
        check_budget(adv, batch.pixels, EPS)
        good = linf <= EPS + 2**-20 and in_range and on_grid == 1.0
        ok &= good
        lines.append(f"{method} Linf*255={linf * 255:.4f} grid={on_grid:.4f}")
    report("attack budget contract", ok, "1000 samples; " + "; ".join(lines))


def test_epsilon_zero_identity(report, trained_cnn, synth_test):
    batch = synth_test.as_batch()
    clean = accuracy(trained_cnn, batch)
    lines, ok = [], True
    for method in METHODS:
        cfg = AttackConfig.for_method(method, epsilon=0.0, iterations=5, di_low=14, di_high=16)
        adv = attack_dataset(trained_cnn, synth_test, cfg, _targets(method, batch))
        a = asr(trained_cnn, adv)
        ok &= torch.equal(adv.adv_pixels, batch.pixels) and a == 1 - clean
        lines.append(f"{method} ASR={a:.4f}")
    report("epsilon=0 identity", ok, f"1 - clean accuracy = {1 - clean:.4f}; " + ", ".join(lines))


# --------------------------------------------------------------------------
# CIFAR-bound desk experiments


def test_white_box_diagonal(report, cifar):
    if isinstance(cifar, Exception):
        report("white-box diagonal (CIFAR-10)", False, f"dataset not found: {cifar}")
    train, test = cifar
    t0 = time.perf_counter()
    model = build_model(ArchitectureSpec("small_cnn", 10, train.image_shape), 0)
    train_supervised(model, train, TrainConfig(epochs=30))
    acc = accuracy(model, test.as_batch())
    a = asr(model, attack_dataset(model, test, AttackConfig(method="mi")))
    minutes = (time.perf_counter() - t0) / 60
    report("white-box diagonal (CIFAR-10)", acc >= 0.6 and a >= 0.99,
           f"clean accuracy {acc:.3f}, MI-FGSM white-box ASR {a:.4f}, {minutes:.1f} min")


def test_ckl_gain(report, cifar):
    if isinstance(cifar, Exception):
        report("desk-scale CKL gain (CIFAR-10)", False, f"dataset not found: {cifar}")
    res = ckl_gain(DeskSetup(), seeds=(0, 1, 2), work_dir=_work_dir(), data=cifar)
    gain = 100 * res.gain("ckl", "baseline")
    worst = 100 * min(res.per_seed_gain("ckl", "baseline"))
    report("desk-scale CKL gain (CIFAR-10)", gain >= 3 and worst >= -1,
           f"mean gain {gain:+.2f} pts, worst seed {worst:+.2f} pts, "
           f"ckl {res.variants['ckl']}, baseline {res.variants['baseline']}, {res.seconds / 3600:.2f} h")


def test_ablation_ordering(report, cifar):
    if isinstance(cifar, Exception):
        report("ablation ordering (CIFAR-10)", False, f"dataset not found: {cifar}")
    res = ablation(DeskSetup(), seeds=(0, 1, 2), work_dir=_work_dir(), data=cifar)
    diff = 100 * res.gain("pcgrad", "off")
    report("ablation ordering (CIFAR-10)", diff >= -0.5,
           f"pcgrad - off = {diff:+.2f} pts ({res.mean('pcgrad'):.4f} vs {res.mean('off'):.4f})")


# --------------------------------------------------------------------------
# model-relationship measurements


def test_conflict_ratio_properties(report, desk_data, desk_models):
    _, test, label = desk_data
    cnn, mixer = desk_models["cnn_a"], desk_models["mixer"]
    self_r = conflict_ratio(cnn, cnn, test)
    cross = conflict_ratio(cnn, mixer, test)
    ok = self_r == 0.0 and 0.0 <= cross <= 1.0 and cross > 0.05
    report("conflict-ratio properties", ok, f"{label}: R(cnn,cnn)={self_r}, R(cnn,mixer)={cross:.4f}")


def test_inconsistency_ordering(report, desk_data, desk_models):
    _, test, label = desk_data
    same = output_inconsistency(desk_models["cnn_a"], desk_models["cnn_b"], test)
    cross = output_inconsistency(desk_models["cnn_a"], desk_models["vit"], test)
    report("inconsistency ordering", same < cross, f"{label}: CNN-CNN {same:.4f} < CNN-ViT {cross:.4f}")


def test_timing_ratio(report, desk_data):
    train, test, label = desk_data
    shape, k = train.image_shape, train.num_classes
    archs = ("small_cnn", "resnet_tiny", "vit_tiny", "mixer_tiny")
    members = [build_model(ArchitectureSpec(a, k, shape), i) for i, a in enumerate(archs)]
    student = build_model(ArchitectureSpec("resnet_tiny", k, shape), 9)
    pool = test if len(test) >= 512 else make_synthetic(k, 512, seed=5, split="test", image_shape=shape)
    batch = pool.as_batch().select(slice(0, 512))
    cfg = AttackConfig(method="mi", di_low=shape[1] - 2, di_high=shape[1])
    rep = timing_report([student, ensemble_source(members)], cfg, batch, names=["student", "ensemble4"])
    ratio = rep.ratios[1]
    report("timing ratio", ratio >= 2 and len(batch) == 512,
           f"{label}: single {rep.seconds[0]:.2f}s, 4-model ensemble {rep.seconds[1]:.2f}s, ratio {ratio:.2f}")
