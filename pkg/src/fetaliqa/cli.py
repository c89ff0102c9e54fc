"""Command-line entry point.

One executable, five subcommands:

* ``gen-data``        write a synthetic manifest + images for one split
* ``extract-roi``     aggregate one stack's brain ROI and save the mask
* ``train``           run mean-teacher training on a manifest
* ``evaluate``        score a checkpoint on a split, optionally dump probs
* ``simulate-reacq``  missed-slice curve over reacquisition fractions

Every option can also be set in a flat ``key = value`` config file passed
via ``--config``; precedence is command-line flag > config file > default.
Unknown config keys are rejected by name.  Subcommands that own an output
directory echo the resolved configuration and a manifest of produced files
into it, so a run is reproducible from the directory alone.

Exit codes: 0 success; 2 usage error; 3 bad configuration; 4 I/O error;
5 malformed data (manifest, probs CSV, degenerate stack); 6 numeric
failure; 1 unexpected internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from . import evaluation, reacq, roi, trainer
from .backbone import build_architecture
from .data import (
    Dataset,
    Label,
    group_by_stack,
    load_manifest,
    save_image,
    save_manifest,
    with_labeled_budget,
)
from .errors import (
    ConfigError,
    FetalIqaError,
    ManifestError,
    NoReliableMasksError,
    NumericError,
)
from .losses import LossWeights
from .synth import SynthConfig, generate_synthetic

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_DATA = 5
EXIT_NUMERIC = 6
EXIT_INTERNAL = 1

OUT_DIR_ENV = "FETALIQA_OUT"

PROBS_HEADER = ["stack_id", "slice_index", "p_d", "p_n", "p_w"]


# ---------------------------------------------------------------------------
# Config keys and resolution
# ---------------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_opt_int(text: str) -> int | None:
    if text.strip().lower() in ("none", ""):
        return None
    return int(text)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], object]
    default: object
    help: str


TRAIN_KEYS = [
    Key("preset", str, "desk", "base defaults: desk, full, or tiny"),
    Key("alpha", float, 0.994, "teacher EMA coefficient"),
    Key("lam", float, 1.0, "prediction-consistency weight"),
    Key("beta", float, 1.0, "ROI feature-consistency weight"),
    Key("gamma", float, 1.0, "prediction-entropy weight"),
    Key("ramp_epochs", int, 5, "epochs over which unsupervised weights ramp up"),
    Key("batch_size", int, 64, "slices per batch"),
    Key("labeled_per_batch", int, 16, "labeled slices per batch"),
    Key("epochs", int, 60, "training epochs"),
    Key("lr0", float, 5e-3, "initial learning rate (cosine decay to 0)"),
    Key("seed", int, 0, "run seed; run i of a multi-run uses seed + i"),
    Key("runs", int, 1, "number of seeds to train"),
    Key("arch", str, "small_cnn", "architecture id (small_cnn, tiny_cnn, resnet34)"),
    Key("steps_per_epoch", _parse_opt_int, None,
        "optimizer steps per epoch; default covers the dataset once"),
    Key("flip_prob", float, 0.5, "horizontal flip probability"),
    Key("max_shift_frac", float, 0.1, "max translation as a fraction of the side"),
    Key("noise_sigma", float, 0.05, "additive Gaussian pixel noise sigma"),
    Key("area_min_frac", float, 0.01, "min mask area (fraction of pixels) for the ROI"),
    Key("roi_threshold", float, 0.5, "intensity threshold of the stub segmenter"),
    Key("n_labeled", _parse_opt_int, None,
        "keep only this many labels in the train split (rest become unlabeled)"),
    Key("n_unlabeled", _parse_opt_int, None,
        "subsample the unlabeled train pool to this count"),
]

PRESET_OVERRIDES: dict[str, dict[str, object]] = {
    "desk": {},
    "full": {"batch_size": 384, "labeled_per_batch": 96, "arch": "resnet34"},
    "tiny": {"batch_size": 16, "labeled_per_batch": 4, "epochs": 2,
             "arch": "tiny_cnn"},
}

GEN_KEYS = [
    Key("n_stacks", int, 8, "stacks to generate"),
    Key("slices_per_stack", int, 30, "slices per stack"),
    Key("frac_d", float, 0.5, "fraction of diagnostic slices"),
    Key("frac_n", float, 0.3, "fraction of non-diagnostic slices"),
    Key("frac_w", float, 0.2, "fraction of no-brain slices"),
    Key("corruption_strength", float, 0.7, "artifact severity in [0, 1]"),
    Key("seed", int, 0, "generator seed"),
    Key("image_size", int, 64, "square slice side in pixels"),
    Key("split", str, "train", "split name: train, val, or test"),
    Key("n_labeled", _parse_opt_int, None,
        "keep only this many labels (rest written as UNLABELED)"),
    Key("n_unlabeled", _parse_opt_int, None,
        "subsample the unlabeled pool to this count (with n_labeled)"),
]

ROI_KEYS = [
    Key("split", str, None, "split to read when --manifest is a directory"),
    Key("stack_id", str, None, "stack to aggregate; default: first in manifest"),
    Key("area_min_frac", float, 0.01, "min mask area as a fraction of pixels"),
    Key("threshold", float, 0.5, "intensity threshold of the stub segmenter"),
    Key("literal_area_weights", _parse_bool, False,
        "use area/|B| weights instead of normalized area weights"),
]

EVAL_KEYS = [
    Key("split", str, "test", "split to read when --manifest is a directory"),
    Key("model", str, "teacher", "which checkpointed model to run: teacher or student"),
]

REACQ_KEYS = [
    Key("q", str, "0.1,0.2,0.3,0.4,0.5", "comma-separated reacquisition fractions"),
    Key("trials", int, 100, "random-baseline draws per stack and q"),
    Key("seed", int, 0, "random-baseline seed"),
    Key("split", str, "test", "split to read when --manifest is a directory"),
]


def load_config_file(path: Path | str) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' starts a comment; blanks ignored."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(
                    f"{path}, line {lineno}: expected 'key = value', got {raw.rstrip()!r}"
                )
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def resolve_keys(
    keys: list[Key],
    args: argparse.Namespace,
    file_values: dict[str, str],
    preset: dict[str, object] | None = None,
) -> dict[str, object]:
    known = {k.name for k in keys}
    unknown = sorted(set(file_values) - known)
    if unknown:
        raise ConfigError(
            "unknown config key" + ("s" if len(unknown) > 1 else "")
            + ": " + ", ".join(repr(u) for u in unknown)
        )
    resolved: dict[str, object] = {}
    for key in keys:
        flag_value = getattr(args, key.name)
        if flag_value is not None:
            resolved[key.name] = flag_value  # argparse already applied key.parse
        elif key.name in file_values:
            try:
                resolved[key.name] = key.parse(file_values[key.name])
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(
                    f"bad value for config key {key.name!r}: "
                    f"{file_values[key.name]!r} ({exc})"
                ) from None
        elif preset and key.name in preset:
            resolved[key.name] = preset[key.name]
        else:
            resolved[key.name] = key.default
    return resolved


def _add_keys(parser: argparse.ArgumentParser, keys: list[Key]) -> None:
    for key in keys:
        parser.add_argument(
            "--" + key.name.replace("_", "-"),
            dest=key.name,
            type=key.parse,
            default=None,
            help=f"{key.help} (default: {key.default})",
            metavar="V",
        )


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

class _JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps(
            {
                "level": record.levelname,
                "logger": record.name,
                "message": record.getMessage(),
            },
            sort_keys=True,
        )


def _setup_logging(log_file: Path | None) -> list[logging.Handler]:
    root = logging.getLogger("fetaliqa")
    root.setLevel(logging.INFO)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    handlers: list[logging.Handler] = []
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(stream)
    handlers.append(stream)
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        fileh = logging.FileHandler(log_file, mode="w", encoding="utf-8")
        fileh.setFormatter(_JsonLineFormatter())
        root.addHandler(fileh)
        handlers.append(fileh)
    return handlers


def _load_split(manifest: str, split: str | None, default_split: str) -> Dataset:
    path = Path(manifest)
    if path.is_dir():
        name = split or default_split
        candidate = path / f"{name}.csv"
        if not candidate.exists():
            raise FileNotFoundError(f"no {name}.csv under {path}")
        return load_manifest(candidate, name)
    return load_manifest(path, split)


def _write_resolved_config(out_dir: Path, subcommand: str,
                           resolved: dict[str, object],
                           extra: dict[str, object]) -> Path:
    path = out_dir / "resolved_config.txt"
    items = {"subcommand": subcommand, **resolved, **extra}
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(items):
            fh.write(f"{key} = {items[key]}\n")
    return path


def _write_produced_files(out_dir: Path, paths: list[Path]) -> Path:
    listing = out_dir / "produced_files.txt"
    rels = sorted(str(p.relative_to(out_dir)) for p in paths)
    with open(listing, "w", encoding="utf-8") as fh:
        fh.writelines(rel + "\n" for rel in rels)
    return listing


def _emit(record: dict) -> None:
    json.dump(record, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    cfg = resolve_keys(GEN_KEYS, args, file_values)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _setup_logging(out_dir / "log.jsonl")

    synth_cfg = SynthConfig(
        n_stacks=cfg["n_stacks"],
        slices_per_stack=cfg["slices_per_stack"],
        label_fractions=(cfg["frac_d"], cfg["frac_n"], cfg["frac_w"]),
        corruption_strength=cfg["corruption_strength"],
        seed=cfg["seed"],
        image_size=cfg["image_size"],
    )
    dataset = generate_synthetic(synth_cfg, split=cfg["split"])
    if cfg["n_labeled"] is not None:
        dataset = with_labeled_budget(
            dataset, cfg["n_labeled"], seed=cfg["seed"],
            n_unlabeled=cfg["n_unlabeled"],
        )
    manifest_path = out_dir / f"{cfg['split']}.csv"
    written = save_manifest(dataset, manifest_path)
    logger.info("wrote %d slices to %s", dataset.n_total, manifest_path)

    written.append(_write_resolved_config(out_dir, "gen-data", cfg,
                                          {"out": out_dir}))
    written.append(out_dir / "log.jsonl")
    _write_produced_files(out_dir, written)
    _emit(
        {
            "manifest": str(manifest_path),
            "split": cfg["split"],
            "n_labeled": dataset.n_labeled,
            "n_unlabeled": len(dataset.unlabeled),
        }
    )
    return EXIT_OK


def cmd_extract_roi(args: argparse.Namespace) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    cfg = resolve_keys(ROI_KEYS, args, file_values)
    _setup_logging(Path(args.log_file) if args.log_file else None)
    dataset = _load_split(args.manifest, cfg["split"], "train")
    stacks = group_by_stack(dataset)
    if not stacks:
        raise ManifestError("manifest contains no slices")
    stack_id = cfg["stack_id"]
    if stack_id is None:
        stack_id = next(iter(stacks))  # first stack in manifest order
    if stack_id not in stacks:
        raise ManifestError(f"stack {stack_id!r} not present in manifest")
    entries = stacks[stack_id]
    size = dataset.image_size
    roi_cfg = roi.RoiConfig.from_fraction(size, cfg["area_min_frac"])
    masks = [
        roi.mask_stats(roi.threshold_segmenter_stub(s, cfg["threshold"]))
        for s, _ in entries
    ]
    circle = roi.aggregate_stack_roi(
        masks, roi_cfg, literal_area_weights=cfg["literal_area_weights"]
    )
    raster = roi.rasterize_circle(circle, (size, size))
    save_image(args.out, raster.astype(np.float64))
    logger.info("stack %s: ROI center (%.2f, %.2f), radius %.2f",
                stack_id, circle.center[0], circle.center[1], circle.radius)
    _emit(
        {
            "stack_id": stack_id,
            "center": [circle.center[0], circle.center[1]],
            "spread": circle.spread,
            "radius": circle.radius,
            "mask_pixels": int(raster.sum()),
            "out": str(args.out),
        }
    )
    return EXIT_OK


def _train_config_from(cfg: dict[str, object]) -> trainer.TrainConfig:
    weights = LossWeights(
        lam=cfg["lam"], beta=cfg["beta"], gamma=cfg["gamma"], T=cfg["ramp_epochs"]
    )
    perturb = trainer.PerturbConfig(
        flip_prob=cfg["flip_prob"],
        max_shift_frac=cfg["max_shift_frac"],
        noise_sigma=cfg["noise_sigma"],
    )
    return trainer.TrainConfig(
        alpha=cfg["alpha"],
        weights=weights,
        batch_size=cfg["batch_size"],
        labeled_per_batch=cfg["labeled_per_batch"],
        epochs=cfg["epochs"],
        lr0=cfg["lr0"],
        seed=cfg["seed"],
        runs=cfg["runs"],
        arch=cfg["arch"],
        steps_per_epoch=cfg["steps_per_epoch"],
        perturb=perturb,
        area_min_frac=cfg["area_min_frac"],
        roi_threshold=cfg["roi_threshold"],
    ).validate()


def cmd_train(args: argparse.Namespace) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    preset_name = args.preset or file_values.get("preset", "desk")
    if preset_name not in PRESET_OVERRIDES:
        raise ConfigError(
            f"unknown preset {preset_name!r}; choose from "
            + ", ".join(sorted(PRESET_OVERRIDES))
        )
    cfg = resolve_keys(TRAIN_KEYS, args, file_values,
                       preset=PRESET_OVERRIDES[preset_name])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _setup_logging(out_dir / "log.jsonl")

    train_ds = _load_split(args.manifest, "train", "train")
    if cfg["n_labeled"] is not None:
        train_ds = with_labeled_budget(
            train_ds, cfg["n_labeled"], seed=cfg["seed"],
            n_unlabeled=cfg["n_unlabeled"],
        )
    val_ds = None
    if args.val_manifest:
        val_ds = _load_split(args.val_manifest, "val", "val")
    elif Path(args.manifest).is_dir() and (Path(args.manifest) / "val.csv").exists():
        val_ds = _load_split(args.manifest, "val", "val")

    config = _train_config_from(cfg)
    roi_masks = roi.compute_stack_rois(
        train_ds, config.area_min_frac, config.roi_threshold
    )
    produced = [
        _write_resolved_config(out_dir, "train", cfg,
                               {"out": out_dir, "manifest": args.manifest}),
        out_dir / "log.jsonl",
    ]

    summaries = []
    if config.runs == 1:
        results = [trainer.train(train_ds, val_ds, config, out_dir, roi_masks)]
        produced += [out_dir / "metrics.jsonl", out_dir / "best.ckpt",
                     out_dir / "final.ckpt"]
    else:
        results = trainer.train_runs(train_ds, val_ds, config, out_dir, roi_masks)
        for i in range(config.runs):
            run_dir = out_dir / f"run_{i}"
            produced += [run_dir / "metrics.jsonl", run_dir / "best.ckpt",
                         run_dir / "final.ckpt"]
    for i, res in enumerate(results):
        summaries.append(
            {
                "run": i,
                "seed": res.config.seed,
                "best_epoch": res.best_epoch,
                "best_val_accuracy": res.best_val_accuracy,
            }
        )
    _write_produced_files(out_dir, produced)

    best_accs = [s["best_val_accuracy"] for s in summaries]
    record = {
        "out": str(out_dir),
        "runs": summaries,
        "mean_best_val_accuracy": float(np.mean(best_accs)),
    }
    if config.runs == 1:
        record["checkpoint"] = str(out_dir / "best.ckpt")
    _emit(record)
    return EXIT_OK


def _dump_probs(path: Path, dataset: Dataset, probs: np.ndarray) -> None:
    slices = list(dataset.iter_slices())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PROBS_HEADER)
        for s, p in zip(slices, probs):
            writer.writerow(
                [s.stack_id, str(s.slice_index)] + [f"{v:.10f}" for v in p]
            )


def cmd_evaluate(args: argparse.Namespace) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    cfg = resolve_keys(EVAL_KEYS, args, file_values)
    _setup_logging(Path(args.log_file) if args.log_file else None)
    if cfg["model"] not in ("teacher", "student"):
        raise ConfigError(f"model must be 'teacher' or 'student', got {cfg['model']!r}")

    loaded = ckpt.load_checkpoint(args.checkpoint)
    meta = loaded["meta"]
    arch = build_architecture(meta["arch"], meta["image_size"])
    params = loaded[cfg["model"]]

    dataset = _load_split(args.manifest, cfg["split"], "test")
    if dataset.n_labeled == 0:
        raise ManifestError("evaluation split has no labeled slices")
    slices = list(dataset.iter_slices())
    probs = evaluation.predict_probs(arch, params, slices)
    n_l = dataset.n_labeled
    true = np.array([int(lab) for _, lab in dataset.labeled], dtype=np.int64)
    preds = np.argmax(probs[:n_l], axis=1)
    try:
        auc = evaluation.auc_n(probs[:n_l, int(Label.N)], true)
    except ValueError:
        auc = None
    report = {
        "accuracy": evaluation.accuracy(preds, true),
        "auc_n": auc,
        "n_examples": n_l,
        "per_class_counts": [int((true == k).sum()) for k in range(3)],
        "model": cfg["model"],
        "split": dataset.split,
    }
    if args.dump_probs:
        _dump_probs(Path(args.dump_probs), dataset, probs)
        report["probs_csv"] = str(args.dump_probs)
    if args.roc_csv:
        points = evaluation.roc_points(probs[:n_l, int(Label.N)], true)
        with open(args.roc_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fpr", "tpr"])
            writer.writerows([f"{x:.10f}" for x in row] for row in points)
        report["roc_csv"] = str(args.roc_csv)
    _emit(report)
    return EXIT_OK


def _read_probs_csv(path: Path | str) -> dict[str, list[tuple[int, list[float]]]]:
    by_stack: dict[str, list[tuple[int, list[float]]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PROBS_HEADER:
            raise ManifestError(
                f"{path}: bad probs header {header!r}, expected {PROBS_HEADER!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ManifestError(
                    f"{path}, line {lineno}: expected 5 fields, got {len(row)}"
                )
            try:
                idx = int(row[1])
                values = [float(v) for v in row[2:5]]
            except ValueError as exc:
                raise ManifestError(f"{path}, line {lineno}: {exc}") from None
            by_stack.setdefault(row[0], []).append((idx, values))
    for entries in by_stack.values():
        entries.sort(key=lambda e: e[0])
    return by_stack


def cmd_simulate_reacq(args: argparse.Namespace) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    cfg = resolve_keys(REACQ_KEYS, args, file_values)
    _setup_logging(Path(args.log_file) if args.log_file else None)
    try:
        q_values = [float(part) for part in str(cfg["q"]).split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad q list {cfg['q']!r}: {exc}") from None
    if not q_values:
        raise ConfigError("q list is empty")
    if any(not 0.0 <= q <= 1.0 for q in q_values):
        raise ConfigError(f"q values must lie in [0, 1], got {q_values}")

    dataset = _load_split(args.manifest, cfg["split"], "test")
    label_of = {
        (s.stack_id, s.slice_index): int(lab) for s, lab in dataset.labeled
    }
    by_stack = _read_probs_csv(args.probs)
    if not by_stack:
        raise ManifestError(f"{args.probs}: no probability rows")
    stacks = []
    for stack_id in sorted(by_stack):
        entries = by_stack[stack_id]
        labels = []
        for idx, _ in entries:
            try:
                labels.append(label_of[(stack_id, idx)])
            except KeyError:
                raise ManifestError(
                    f"no label in manifest for stack {stack_id!r} slice {idx}"
                ) from None
        probs = np.array([values for _, values in entries], dtype=np.float64)
        stacks.append((probs, np.array(labels, dtype=np.int64)))

    rows = reacq.sweep_q(stacks, q_values, trials=cfg["trials"], seed=cfg["seed"])
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["q", "mean_missed", "std_missed", "random_mean"])
            for row in rows:
                writer.writerow(
                    [f"{row['q']:.6f}", f"{row['mean_missed']:.6f}",
                     f"{row['std_missed']:.6f}", f"{row['random_mean']:.6f}"]
                )
    if args.plot:
        _plot_reacq(Path(args.plot), rows)
    _emit({"rows": rows, "n_stacks": len(stacks),
           "out": str(args.out) if args.out else None})
    return EXIT_OK


def _plot_reacq(path: Path, rows: list[dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    qs = [r["q"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(qs, [r["mean_missed"] for r in rows],
                yerr=[r["std_missed"] for r in rows],
                marker="o", capsize=3, label="model")
    ax.plot(qs, [r["random_mean"] for r in rows], marker="s", linestyle="--",
            label="random")
    ax.set_xlabel("reacquisition fraction q")
    ax.set_ylabel("missed non-diagnostic slices")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fetaliqa",
        description="Slice-level MR image quality assessment: synthetic data, "
                    "ROI extraction, mean-teacher training, evaluation, and "
                    "reacquisition simulation.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    env_out = os.environ.get(OUT_DIR_ENV)

    def common(p: argparse.ArgumentParser, *, out_dir: bool) -> None:
        p.add_argument("--config", help="flat key = value config file", metavar="F")
        if out_dir:
            p.add_argument(
                "--out", default=env_out, required=env_out is None,
                help=f"output directory (or set ${OUT_DIR_ENV})", metavar="DIR",
            )
        else:
            p.add_argument("--log-file", default=None, metavar="F",
                           help="optional line-delimited log file")

    p_gen = sub.add_parser("gen-data", help="generate a synthetic split")
    common(p_gen, out_dir=True)
    _add_keys(p_gen, GEN_KEYS)
    p_gen.set_defaults(func=cmd_gen_data)

    p_roi = sub.add_parser("extract-roi", help="aggregate one stack's brain ROI")
    common(p_roi, out_dir=False)
    p_roi.add_argument("--manifest", required=True, metavar="M",
                       help="manifest CSV or directory of split CSVs")
    p_roi.add_argument("--out", required=True, metavar="F",
                       help="output mask image ({0,1} grayscale)")
    _add_keys(p_roi, ROI_KEYS)
    p_roi.set_defaults(func=cmd_extract_roi)

    p_train = sub.add_parser("train", help="train a mean-teacher model pair")
    common(p_train, out_dir=True)
    p_train.add_argument("--manifest", required=True, metavar="M",
                         help="train manifest CSV or directory of split CSVs")
    p_train.add_argument("--val-manifest", default=None, metavar="M",
                         help="validation manifest (default: val.csv next to "
                              "a directory manifest)")
    _add_keys(p_train, TRAIN_KEYS)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="score a checkpoint on a split")
    common(p_eval, out_dir=False)
    p_eval.add_argument("--checkpoint", required=True, metavar="C")
    p_eval.add_argument("--manifest", required=True, metavar="M")
    p_eval.add_argument("--dump-probs", default=None, metavar="F",
                        help="write per-slice class probabilities to this CSV")
    p_eval.add_argument("--roc-csv", default=None, metavar="F",
                        help="write ROC points for the non-diagnostic class")
    _add_keys(p_eval, EVAL_KEYS)
    p_eval.set_defaults(func=cmd_evaluate)

    p_sim = sub.add_parser("simulate-reacq",
                           help="missed-slice curve over reacquisition fractions")
    common(p_sim, out_dir=False)
    p_sim.add_argument("--probs", required=True, metavar="F",
                       help="probabilities CSV from evaluate --dump-probs")
    p_sim.add_argument("--manifest", required=True, metavar="M",
                       help="manifest providing the true labels")
    p_sim.add_argument("--out", default=None, metavar="F",
                       help="output CSV of (q, mean_missed, std_missed, random_mean)")
    p_sim.add_argument("--plot", default=None, metavar="F",
                       help="optional plot image of the curves")
    _add_keys(p_sim, REACQ_KEYS)
    p_sim.set_defaults(func=cmd_simulate_reacq)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestError, NoReliableMasksError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FetalIqaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - safety net
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
