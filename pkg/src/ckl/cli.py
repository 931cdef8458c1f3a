"""Command-line entry point: ``ckl <subcommand> [options]``.

Subcommands: train-teacher, train-student, attack, evaluate,
inconsistency, conflicts, transfer-matrix, timing.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 internal invariant violation.  Every output directory receives a
``run.json`` with the resolved config, the content hashes of all input
checkpoints, the seed and the tool version.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import (
    BudgetViolationError,
    attack_dataset,
    ensemble_source,
    load_adversarial,
    random_targets,
    save_adversarial,
)
from .config import (
    ConfigError,
    attack_config,
    ckl_config,
    deep_update,
    load_config,
    parse_assignment,
    train_config,
)
from .distill import SecondOrderUnsupportedError, train_student
from .evaluation import (
    asr,
    conflict_matrix,
    inconsistency_matrix,
    tasr,
    timing_report,
    transfer_matrix,
)
from .modelzoo import (
    ArchitectureSpec,
    CheckpointError,
    DatasetCorruptError,
    DatasetNotFoundError,
    TrainingDivergedError,
    accuracy,
    build_model,
    checkpoint_hash,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    train_supervised,
)

logger = logging.getLogger("ckl.cli")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def _prepare_out(path) -> Path:
    if path is None:
        raise UsageError("no output directory: pass --out or set [output] dir")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise OSError(f"cannot write to output directory {out}: {e.strerror or e}") from e
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


def _write_run(out: Path, command: str, cfg: dict, inputs: dict, extra: dict | None = None) -> None:
    record = {
        "tool": "ckl",
        "version": __version__,
        "command": command,
        "seed": cfg["seed"],
        "config": cfg,
        "input_checkpoints": inputs,
    }
    if extra:
        record.update(extra)
    _write_json(out / "run.json", record)


def _load_models(paths) -> tuple[list, dict]:
    if not paths:
        raise UsageError("no model checkpoints given")
    models, hashes = [], {}
    for p in paths:
        models.append(load_checkpoint(p))
        hashes[str(p)] = checkpoint_hash(p)
    return models, hashes


def _model_ids(paths) -> list[str]:
    """Run-directory names for ``<run>/checkpoint`` paths; full paths if these collide."""
    ids = []
    for p in paths:
        p = Path(p)
        ids.append(p.parent.name if p.name == "checkpoint" and p.parent.name else p.name)
    if len(set(ids)) == len(ids):
        return ids
    return [f"{i}#{k}" for k, i in enumerate(ids)] if len(set(map(str, paths))) < len(paths) else [str(p) for p in paths]


def _dataset(cfg: dict, split: str):
    d = cfg["data"]
    if d["dataset"] == "synthetic":
        n = d["synthetic_train"] if split == "train" else d["synthetic_test"]
        return load_dataset(
            "synthetic",
            split,
            num_classes=d["num_classes"],
            n=n,
            seed=d["synthetic_seed"],
            image_shape=tuple(d["image_shape"]),
        )
    data = load_dataset(d["dataset"], split, d["data_dir"])
    n = d["train_subset"] if split == "train" else d["test_subset"]
    if 0 < n < len(data):
        data = data.stratified_subset(n, seed=d["subset_seed"])
    return data


def _attack_summary(ac) -> dict:
    s = {
        "method": ac.method,
        "targeted": ac.targeted,
        "epsilon": f"{ac.epsilon * 255:g}/255",
        "alpha": f"{ac.alpha * 255:g}/255",
        "iterations": ac.iterations,
        "mu": ac.mu,
    }
    if ac.uses_di:
        s["di_range"] = f"[{ac.di_low}, {ac.di_high})"
    if ac.method == "vni":
        s.update(vni_n=ac.vni_n, vni_beta=ac.vni_beta)
    return s


def _heatmap(matrix, path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(matrix.model_ids), 1 + 0.7 * len(matrix.model_ids)))
    im = ax.imshow(matrix.values, cmap="viridis")
    ax.set_xticks(range(len(matrix.model_ids)), matrix.model_ids, rotation=45, ha="right")
    ax.set_yticks(range(len(matrix.model_ids)), matrix.model_ids)
    for (i, j), v in np.ndenumerate(matrix.values):
        ax.text(j, i, f"{v:.2f}", ha="center", va="center", color="w", fontsize=8)
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# --------------------------------------------------------------------------
# subcommands


def cmd_train_teacher(args, cfg, explicit) -> int:
    out = _prepare_out(args.out)
    tc = train_config(cfg, explicit)
    train = _dataset(cfg, "train")
    test = _dataset(cfg, "test")
    spec = ArchitectureSpec(cfg["models"]["arch"], train.num_classes, train.image_shape, cfg["models"]["activation"])
    model = build_model(spec, seed=cfg["seed"])
    model, log = train_supervised(model, train, tc, val_data=test)
    ckpt = out / "checkpoint"
    save_checkpoint(model, ckpt, training_config=tc.to_dict())
    _write_rows(out / "training_log.csv", log.epochs)
    metrics = {"accuracy": accuracy(model, test.as_batch()), "dataset_id": test.dataset_id, "n_test": len(test)}
    metrics["checkpoint_hash"] = checkpoint_hash(ckpt)
    _write_json(out / "metrics.json", metrics)
    _write_run(out, "train-teacher", cfg, {}, {"training_config": tc.to_dict()})
    print(f"checkpoint {ckpt} accuracy {metrics['accuracy']:.4f}")
    return EXIT_OK


def _write_rows(path: Path, rows: list[dict]) -> None:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys or ["epoch"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_train_student(args, cfg, explicit) -> int:
    out = _prepare_out(args.out)
    teachers, hashes = _load_models(cfg["teachers"]["checkpoints"])
    cc = ckl_config(cfg, explicit)
    train = _dataset(cfg, "train")
    test = _dataset(cfg, "test")
    spec = ArchitectureSpec(cfg["models"]["arch"], train.num_classes, train.image_shape, cfg["models"]["activation"])
    student = build_model(spec, seed=cfg["seed"])
    keys = [f"{Path(p).name}-{h[:12]}" for p, h in hashes.items()]
    student, log = train_student(student, teachers, train, cc, val_data=test, teacher_keys=keys)
    ckpt = out / "checkpoint"
    save_checkpoint(student, ckpt, training_config=cc.to_dict())
    _write_rows(out / "curves.csv", log.epochs)
    metrics = {"accuracy": accuracy(student, test.as_batch()), "checkpoint_hash": checkpoint_hash(ckpt)}
    _write_json(out / "metrics.json", metrics)
    _write_run(out, "train-student", cfg, hashes, {"ckl_config": cc.to_dict()})
    print(f"checkpoint {ckpt} accuracy {metrics['accuracy']:.4f}")
    return EXIT_OK


def _source(args):
    if args.source and args.ensemble:
        raise UsageError("give either --source or --ensemble, not both")
    if args.source:
        models, hashes = _load_models([args.source])
        return models[0], hashes
    if args.ensemble:
        models, hashes = _load_models(args.ensemble)
        return ensemble_source(models), hashes
    raise UsageError("attack needs --source CKPT or --ensemble CKPT [CKPT ...]")


def cmd_attack(args, cfg, explicit) -> int:
    out = _prepare_out(args.out)
    source, hashes = _source(args)
    ac = attack_config(cfg, explicit)
    data = _dataset(cfg, "test")
    batch = data.as_batch()
    targets = random_targets(batch.labels, data.num_classes, ac.seed) if ac.targeted else None
    adv = attack_dataset(source, batch, ac, targets, batch_size=cfg["attack"]["batch_size"])
    src_hash = next(iter(hashes.values())) if args.source else None
    save_adversarial(adv, out / "adversarial", source_checkpoint_hash=src_hash)
    summary = _attack_summary(ac)
    _write_run(
        out,
        "attack",
        cfg,
        hashes,
        {"attack_config": ac.to_dict(), "attack_config_hash": ac.config_hash(), "attack": summary,
         "target_policy": "random label different from the true label" if ac.targeted else None},
    )
    print(json.dumps(summary))
    return EXIT_OK


def cmd_evaluate(args, cfg, explicit) -> int:
    out = _prepare_out(args.out)
    adv_dir = Path(args.adv)
    if not (adv_dir / "manifest.json").exists() and (adv_dir / "adversarial" / "manifest.json").exists():
        adv_dir = adv_dir / "adversarial"
    if not (adv_dir / "manifest.json").exists():
        raise FileNotFoundError(f"no adversarial batch at {adv_dir}")
    adv = load_adversarial(adv_dir)
    manifest = json.loads((adv_dir / "manifest.json").read_text())
    paths = args.targets or cfg["eval"]["models"]
    targets, hashes = _load_models(paths)

    problems = []
    if "attack" in explicit:
        expected = attack_config(cfg, explicit).config_hash()
        if expected != manifest.get("config_hash"):
            problems.append(f"attack config hash {expected} differs from the batch's {manifest.get('config_hash')}")
    if args.source:
        h = checkpoint_hash(args.source)
        hashes[str(args.source)] = h
        if manifest.get("source_checkpoint_hash") not in (None, h):
            problems.append(f"source checkpoint {args.source} hash {h} differs from {manifest['source_checkpoint_hash']}")
    for p in problems:
        logger.warning(p)
    if problems and not args.force:
        raise UsageError("hash mismatch; pass --force to evaluate anyway")

    rows = []
    for mid, m, p in zip(_model_ids(paths), targets, paths):
        row = {"model_id": mid, "checkpoint_hash": hashes[str(p)], "asr": asr(m, adv)}
        if adv.target_labels is not None:
            row["tasr"] = tasr(m, adv)
        rows.append(row)
    _write_rows(out / "evaluation.csv", rows)
    _write_json(
        out / "evaluation.json",
        {"adversarial": str(adv_dir), "adversarial_manifest": manifest, "results": rows, "forced": bool(problems)},
    )
    _write_run(out, "evaluate", cfg, hashes)
    for r in rows:
        print(", ".join(f"{k}={v}" for k, v in r.items()))
    return EXIT_OK


def _matrix_command(name, builder, stem, title):
    def run(args, cfg, explicit) -> int:
        out = _prepare_out(args.out)
        paths = args.models or cfg["eval"]["models"]
        models, hashes = _load_models(paths)
        data = _dataset(cfg, "test")
        matrix = builder(models, data, _model_ids(paths), cfg, explicit, args)
        matrix.metadata["checkpoint_hashes"] = list(hashes.values())
        matrix.save(out, stem)
        if cfg["eval"]["heatmaps"]:
            _heatmap(matrix, out / f"{stem}.png", title)
        _write_run(out, name, cfg, hashes)
        print(matrix.to_csv(), end="")
        return EXIT_OK

    return run


def _build_inconsistency(models, data, ids, cfg, explicit, args):
    return inconsistency_matrix(models, data, model_ids=ids)


def _build_conflicts(models, data, ids, cfg, explicit, args):
    return conflict_matrix(models, data, model_ids=ids)


def _build_transfer(models, data, ids, cfg, explicit, args):
    ac = attack_config(cfg, explicit)
    pairwise = args.pairwise_average or cfg["eval"]["pairwise_average"]
    tm = transfer_matrix(models, ac, data, pairwise_average=pairwise, model_ids=ids)
    tm.metadata["attack"] = _attack_summary(ac)
    return tm


cmd_inconsistency = _matrix_command("inconsistency", _build_inconsistency, "inconsistency", "symmetric KL")
cmd_conflicts = _matrix_command("conflicts", _build_conflicts, "conflicts", "conflict ratio")
cmd_transfer_matrix = _matrix_command("transfer-matrix", _build_transfer, "transfer", "transfer success rate")


def cmd_timing(args, cfg, explicit) -> int:
    out = _prepare_out(args.out)
    if not args.sources:
        raise UsageError("timing needs at least one --sources entry")
    sources, names, hashes = [], [], {}
    for entry in args.sources:
        parts = [p for p in entry.split(",") if p]
        models, h = _load_models(parts)
        hashes.update(h)
        sources.append(models[0] if len(models) == 1 else ensemble_source(models))
        names.append(entry)
    ac = attack_config(cfg, explicit)
    data = _dataset(cfg, "test")
    report = timing_report(sources, ac, data, names=names, repeats=cfg["eval"]["repeats"])
    _write_rows(out / "timing.csv", report.rows())
    _write_json(out / "timing.json", {"rows": report.rows(), "n_samples": len(data), "attack": _attack_summary(ac)})
    _write_run(out, "timing", cfg, hashes)
    for r in report.rows():
        print(f"{r['source']}: {r['seconds']:.3f}s (x{r['ratio']:.2f})")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _flag_overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            if section is None:
                o[key] = value
            else:
                o.setdefault(section, {})[key] = value

    put(None, "seed", getattr(args, "seed", None))
    put("data", "dataset", getattr(args, "dataset", None))
    put("data", "data_dir", getattr(args, "data_dir", None))
    put("models", "arch", getattr(args, "arch", None))
    put("teachers", "epochs", getattr(args, "teacher_epochs", None))
    if getattr(args, "teachers", None):
        put("teachers", "checkpoints", list(args.teachers))
    put("ckl", "lam", getattr(args, "lam", None))
    put("ckl", "grad_mode", getattr(args, "grad_mode", None))
    put("ckl", "epochs", getattr(args, "student_epochs", None))
    put("attack", "method", getattr(args, "method", None))
    if getattr(args, "targeted", False):
        put("attack", "targeted", True)
    put("attack", "epsilon", getattr(args, "epsilon", None))
    put("attack", "alpha", getattr(args, "alpha", None))
    put("attack", "iterations", getattr(args, "iterations", None))
    for item in getattr(args, "set", None) or []:
        deep_update(o, parse_assignment(item))
    return o


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ckl", description="Common knowledge learning: distillation, transfer attacks, evaluation.")
    p.add_argument("--version", action="version", version=f"ckl {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="TOML run config")
        sp.add_argument("--out", help="output directory (overrides [output] dir)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--dataset", choices=["cifar10", "cifar100", "synthetic"])
        sp.add_argument("--data-dir")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")
        sp.add_argument("-v", "--verbose", action="store_true")

    def attack_flags(sp):
        sp.add_argument("--method", choices=["mi", "di", "vni", "logit"])
        sp.add_argument("--targeted", action="store_true")
        sp.add_argument("--epsilon", help="L-inf budget, e.g. 8/255")
        sp.add_argument("--alpha", help="step size, e.g. 1/255")
        sp.add_argument("--iterations", type=int)

    sp = sub.add_parser("train-teacher", help="train a classifier with cross-entropy")
    common(sp)
    sp.add_argument("--arch")
    sp.add_argument("--epochs", dest="teacher_epochs", type=int)
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("train-student", help="distil a student from teacher checkpoints")
    common(sp)
    sp.add_argument("--arch")
    sp.add_argument("--teachers", nargs="+", metavar="CKPT")
    sp.add_argument("--lam", type=float)
    sp.add_argument("--grad-mode", choices=["pcgrad", "average", "max", "off"])
    sp.add_argument("--epochs", dest="student_epochs", type=int)
    sp.set_defaults(func=cmd_train_student)

    sp = sub.add_parser("attack", help="craft adversarial examples on a source model")
    common(sp)
    attack_flags(sp)
    sp.add_argument("--source", metavar="CKPT")
    sp.add_argument("--ensemble", nargs="+", metavar="CKPT")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("evaluate", help="ASR / tASR of an adversarial batch on target models")
    common(sp)
    sp.add_argument("--adv", required=True, help="directory written by `ckl attack`")
    sp.add_argument("--targets", nargs="+", metavar="CKPT")
    sp.add_argument("--source", metavar="CKPT", help="source checkpoint to check against the batch manifest")
    sp.add_argument("--force", action="store_true", help="proceed despite hash mismatches")
    sp.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (
        ("inconsistency", cmd_inconsistency, "symmetric-KL output inconsistency matrix"),
        ("conflicts", cmd_conflicts, "conflicting input-gradient ratio matrix"),
        ("transfer-matrix", cmd_transfer_matrix, "pairwise transfer success matrix"),
    ):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--models", nargs="+", metavar="CKPT")
        if name == "transfer-matrix":
            attack_flags(sp)
            sp.add_argument("--pairwise-average", action="store_true")
        sp.set_defaults(func=func)

    sp = sub.add_parser("timing", help="wall-clock attack time per source")
    common(sp)
    attack_flags(sp)
    sp.add_argument(
        "--sources", nargs="+", metavar="CKPT[,CKPT...]", help="each entry is a checkpoint or a comma-joined ensemble"
    )
    sp.set_defaults(func=cmd_timing)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        overrides = _flag_overrides(args)
        cfg, explicit = load_config(args.config, overrides)
        if args.out is None:
            args.out = cfg["output"]["dir"]
        return args.func(args, cfg, explicit)
    except (UsageError, ConfigError) as e:
        print(f"ckl: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetNotFoundError, DatasetCorruptError, CheckpointError, OSError) as e:
        print(f"ckl: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (BudgetViolationError, TrainingDivergedError, SecondOrderUnsupportedError) as e:
        print(f"ckl: invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except ValueError as e:
        print(f"ckl: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
