"""Mean-teacher training loop.

One optimizer step runs four forward passes: the student on perturbed full
images, the teacher on (differently) perturbed full images, the teacher on
perturbed brain-masked images, and the student on perturbed masked images
for the labeled subset.  The composite objective from :mod:`fetaliqa.losses`
couples them; only the student takes a gradient step (Adam, cosine decay),
after which the teacher tracks it by exponential moving average.

Batches carry a fixed labeled quota (labeled rows first) drawn from
shuffled cycles over the two pools, so the sequence of batches is a
deterministic function of the seed.  Checkpoints and the per-epoch metrics
log are byte-stable for the same reason, which makes reruns verifiable by
file digest.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import evaluation, roi
from .backbone import Architecture, Params, build_architecture, clone_params, ema_update
from .data import Dataset, Slice
from .errors import ConfigError, NumericError
from .losses import BatchForward, LossBreakdown, LossWeights, composite_loss_and_grads, ramp_up

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class PerturbConfig:
    """Input perturbation family: flip, integer shift, additive noise."""

    flip_prob: float = 0.5
    max_shift_frac: float = 0.1  # of the image side, each axis
    noise_sigma: float = 0.05

    def validate(self) -> "PerturbConfig":
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if not 0.0 <= self.max_shift_frac <= 0.1:
            raise ConfigError(
                f"max_shift_frac must lie in [0, 0.1], got {self.max_shift_frac}"
            )
        if self.noise_sigma < 0.0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        return self

    @property
    def disabled(self) -> bool:
        return self.flip_prob == 0 and self.max_shift_frac == 0 and self.noise_sigma == 0


NO_PERTURB = PerturbConfig(flip_prob=0.0, max_shift_frac=0.0, noise_sigma=0.0)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.994
    weights: LossWeights = LossWeights()
    batch_size: int = 64
    labeled_per_batch: int = 16
    epochs: int = 60
    lr0: float = 5e-3
    seed: int = 0
    runs: int = 5
    arch: str = "small_cnn"
    steps_per_epoch: int | None = None
    perturb: PerturbConfig = PerturbConfig()
    area_min_frac: float = 0.01
    roi_threshold: float = 0.5

    def validate(self) -> "TrainConfig":
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.labeled_per_batch <= self.batch_size:
            raise ConfigError(
                f"labeled_per_batch must lie in (0, batch_size], got "
                f"{self.labeled_per_batch} with batch_size {self.batch_size}"
            )
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1 when given")
        if self.runs < 1:
            raise ConfigError(f"runs must be >= 1, got {self.runs}")
        if not 0.0 < self.area_min_frac < 1.0:
            raise ConfigError("area_min_frac must lie in (0, 1)")
        self.weights.validate()
        self.perturb.validate()
        return self

    @property
    def supervised_only(self) -> bool:
        w = self.weights
        return w.lam == 0 and w.beta == 0 and w.gamma == 0

    def flat_dict(self) -> dict:
        """One-level key/value view, the form the config file and echo use."""
        return {
            "alpha": self.alpha,
            "lam": self.weights.lam,
            "beta": self.weights.beta,
            "gamma": self.weights.gamma,
            "ramp_epochs": self.weights.T,
            "batch_size": self.batch_size,
            "labeled_per_batch": self.labeled_per_batch,
            "epochs": self.epochs,
            "lr0": self.lr0,
            "seed": self.seed,
            "runs": self.runs,
            "arch": self.arch,
            "steps_per_epoch": self.steps_per_epoch,
            "flip_prob": self.perturb.flip_prob,
            "max_shift_frac": self.perturb.max_shift_frac,
            "noise_sigma": self.perturb.noise_sigma,
            "area_min_frac": self.area_min_frac,
            "roi_threshold": self.roi_threshold,
        }


# ---------------------------------------------------------------------------
# Perturbation
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Perturbation:
    """One realized draw of the input perturbation.

    ``noise`` stores the realized additive field (already scaled by sigma)
    so that applying the same Perturbation twice gives identical pixels.
    """

    flip: bool
    translation: tuple[int, int]
    noise_sigma: float
    noise: np.ndarray | None = None

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        x = pixels[:, ::-1] if self.flip else pixels
        dr, dc = self.translation
        if dr or dc:
            x = _shift2d(x, dr, dc)
        if self.noise is not None:
            x = np.clip(x + self.noise.astype(pixels.dtype), 0.0, 1.0)
        elif self.flip or dr or dc:
            x = x.copy()
        return x


def _shift2d(x: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Integer translation with zero fill (no wrap-around)."""
    h, w = x.shape[-2:]
    out = np.zeros_like(x)
    out[
        ..., max(dr, 0) : h + min(dr, 0), max(dc, 0) : w + min(dc, 0)
    ] = x[..., max(-dr, 0) : h + min(-dr, 0), max(-dc, 0) : w + min(-dc, 0)]
    return out


def perturb(
    s: Slice | np.ndarray,
    rng: np.random.Generator,
    config: PerturbConfig = PerturbConfig(),
) -> tuple[np.ndarray, Perturbation]:
    """Draw one perturbation, apply it, and return (pixels, realized draw)."""
    pixels = s.pixels if isinstance(s, Slice) else np.asarray(s)
    side = pixels.shape[-1]
    m = int(config.max_shift_frac * side)
    flip = bool(rng.random() < config.flip_prob)
    dr = int(rng.integers(-m, m + 1)) if m else 0
    dc = int(rng.integers(-m, m + 1)) if m else 0
    noise = None
    if config.noise_sigma > 0:
        noise = rng.standard_normal(pixels.shape) * config.noise_sigma
    draw = Perturbation(flip=flip, translation=(dr, dc),
                        noise_sigma=config.noise_sigma, noise=noise)
    return draw.apply(pixels), draw


def _perturb_batch(
    x: np.ndarray, rng: np.random.Generator, config: PerturbConfig
) -> np.ndarray:
    """Vectorized per-image perturbation of a (B, H, W) stack."""
    if config.disabled:
        return x
    b, h, w = x.shape
    m = int(config.max_shift_frac * w)
    flips = rng.random(b) < config.flip_prob
    drs = rng.integers(-m, m + 1, size=b) if m else np.zeros(b, dtype=int)
    dcs = rng.integers(-m, m + 1, size=b) if m else np.zeros(b, dtype=int)
    out = np.empty_like(x)
    for i in range(b):
        xi = x[i, :, ::-1] if flips[i] else x[i]
        out[i] = _shift2d(xi, int(drs[i]), int(dcs[i])) if (drs[i] or dcs[i]) else xi
    if config.noise_sigma > 0:
        noise = rng.standard_normal((b, h, w)).astype(x.dtype) * x.dtype.type(
            config.noise_sigma
        )
        out += noise
        np.clip(out, 0.0, 1.0, out=out)
    return out


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Batch:
    """Labeled-first batch: first ``n_labeled`` slices carry ``labels``."""

    slices: list[Slice]
    labels: np.ndarray  # (n_labeled,) int
    n_labeled: int


class _ShuffledCycle:
    """Endless stream over range(n): a fresh permutation per exhausted pass."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        parts = []
        while k > 0:
            if self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            step = min(k, self.n - self.pos)
            parts.append(self.order[self.pos : self.pos + step])
            self.pos += step
            k -= step
        return np.concatenate(parts) if len(parts) != 1 else parts[0]


class BatchSampler:
    """Draws labeled-quota batches from a dataset, reshuffling per pass."""

    def __init__(self, dataset: Dataset, config: TrainConfig, rng: np.random.Generator):
        self.dataset = dataset
        self.config = config
        self.rng = rng
        if dataset.n_labeled == 0:
            raise ConfigError("training requires a non-empty labeled pool")
        self.all_labeled = len(dataset.unlabeled) == 0
        if self.all_labeled and not config.supervised_only:
            raise ConfigError(
                "unlabeled pool is empty; only allowed when lam=beta=gamma=0"
            )
        self.n_labeled_quota = (
            config.batch_size if self.all_labeled else config.labeled_per_batch
        )
        self._replace = dataset.n_labeled < self.n_labeled_quota
        if self._replace:
            warnings.warn(
                f"labeled pool ({dataset.n_labeled}) is smaller than the "
                f"per-batch quota ({self.n_labeled_quota}); sampling with "
                "replacement",
                stacklevel=2,
            )
        self._labeled_cycle = _ShuffledCycle(dataset.n_labeled, rng)
        n_unlab = len(dataset.unlabeled)
        self._unlabeled_cycle = _ShuffledCycle(n_unlab, rng) if n_unlab else None

    def sample_batch(self) -> Batch:
        cfg = self.config
        if self._replace:
            lab_idx = self.rng.integers(0, self.dataset.n_labeled, self.n_labeled_quota)
        else:
            lab_idx = self._labeled_cycle.take(self.n_labeled_quota)
        slices = [self.dataset.labeled[i][0] for i in lab_idx]
        labels = np.array(
            [int(self.dataset.labeled[i][1]) for i in lab_idx], dtype=np.int64
        )
        if not self.all_labeled:
            unl_idx = self._unlabeled_cycle.take(cfg.batch_size - self.n_labeled_quota)
            slices += [self.dataset.unlabeled[i] for i in unl_idx]
        return Batch(slices=slices, labels=labels, n_labeled=len(lab_idx))


def sample_batch(dataset: Dataset, config: TrainConfig, rng: np.random.Generator) -> Batch:
    """One-off batch draw; training uses a persistent BatchSampler instead."""
    return BatchSampler(dataset, config, rng).sample_batch()


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * step / total_steps))."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass(eq=False)
class TrainState:
    arch: Architecture
    student: Params
    teacher: Params
    adam_m: Params
    adam_v: Params
    step: int
    total_steps: int
    perturb_rng: np.random.Generator
    last_breakdown: LossBreakdown | None = None
    epoch: int = 0


def init_state(
    arch: Architecture,
    config: TrainConfig,
    init_rng: np.random.Generator,
    perturb_rng: np.random.Generator,
    total_steps: int,
) -> TrainState:
    student = arch.init_params(init_rng)
    trainable = [n for n in student if n not in arch.buffer_names]
    zeros = {n: np.zeros_like(student[n]) for n in trainable}
    return TrainState(
        arch=arch,
        student=student,
        teacher=clone_params(student),
        adam_m=zeros,
        adam_v={n: z.copy() for n, z in zeros.items()},
        step=0,
        total_steps=total_steps,
        perturb_rng=perturb_rng,
    )


def adam_step(
    params: Params,
    grads: Params,
    m: Params,
    v: Params,
    lr: float,
    t: int,
) -> None:
    """In-place Adam update; ``t`` is the 1-based step count."""
    b1c = 1.0 - ADAM_BETA1**t
    b2c = 1.0 - ADAM_BETA2**t
    for name, g in grads.items():
        m[name] = ADAM_BETA1 * m[name] + (1.0 - ADAM_BETA1) * g
        v[name] = ADAM_BETA2 * v[name] + (1.0 - ADAM_BETA2) * (g * g)
        mhat = m[name] / b1c
        vhat = v[name] / b2c
        params[name] = params[name] - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def _stack_pixels(slices: list[Slice], dtype=np.float32) -> np.ndarray:
    return np.stack([s.pixels for s in slices]).astype(dtype, copy=False)


def _masked_pixels(
    slices: list[Slice], pixels: np.ndarray, roi_masks: dict[str, np.ndarray]
) -> np.ndarray:
    out = np.empty_like(pixels)
    for i, s in enumerate(slices):
        try:
            mask = roi_masks[s.stack_id]
        except KeyError:
            raise KeyError(f"no ROI mask for stack {s.stack_id!r}") from None
        out[i] = pixels[i] * mask.astype(pixels.dtype)
    return out


def train_step(
    state: TrainState,
    batch: Batch,
    roi_masks: dict[str, np.ndarray],
    config: TrainConfig,
) -> TrainState:
    """One optimizer step; mutates and returns ``state``."""
    arch = state.arch
    w = config.weights
    n_l = batch.n_labeled
    rng = state.perturb_rng

    pixels = _stack_pixels(batch.slices)
    need_teacher = w.lam > 0 or w.beta > 0
    need_masked_teacher = w.beta > 0
    masked = None
    if need_masked_teacher or n_l > 0:
        masked = _masked_pixels(batch.slices, pixels, roi_masks)

    # Perturbation draws are consumed in a fixed pass order so the stream
    # of random numbers, and hence the whole run, is reproducible.
    x_student_full = _perturb_batch(pixels, rng, config.perturb)
    x_teacher_full = _perturb_batch(pixels, rng, config.perturb) if w.lam > 0 else None
    x_teacher_masked = (
        _perturb_batch(masked, rng, config.perturb) if need_masked_teacher else None
    )
    x_student_masked = (
        _perturb_batch(masked[:n_l], rng, config.perturb) if n_l > 0 else None
    )

    res_full = arch.forward_batch(
        state.student, x_student_full, training=True, need_grad=True, update_stats=True
    )
    teacher_probs = None
    teacher_features = None
    if w.lam > 0:
        teacher_probs = arch.forward_batch(state.teacher, x_teacher_full).probs
    if need_masked_teacher:
        teacher_features = arch.forward_batch(state.teacher, x_teacher_masked).features
    res_masked = None
    if n_l > 0:
        res_masked = arch.forward_batch(
            state.student, x_student_masked, training=True, need_grad=True
        )

    fwd = BatchForward(
        probs_full=res_full.probs,
        features_full=res_full.features,
        n_labeled=n_l,
        probs_masked=None if res_masked is None else res_masked.probs,
        teacher_probs_full=teacher_probs,
        teacher_features_masked=teacher_features,
    )
    breakdown, d_logits_full, d_feature_full, d_logits_masked = (
        composite_loss_and_grads(fwd, batch.labels, w, state.epoch)
    )
    bad = [k for k, val in breakdown.as_dict().items() if not math.isfinite(val)]
    if bad:
        raise NumericError(
            f"non-finite loss at step {state.step}: "
            + ", ".join(f"{k}={getattr(breakdown, k)}" for k in bad)
        )

    grads = arch.backward(state.student, res_full.tape, d_logits_full, d_feature_full)
    if res_masked is not None:
        for name, g in arch.backward(
            state.student, res_masked.tape, d_logits_masked
        ).items():
            grads[name] += g

    lr = cosine_lr(state.step, state.total_steps, config.lr0)
    adam_step(state.student, grads, state.adam_m, state.adam_v, lr, state.step + 1)
    if res_full.stat_updates:
        state.student.update(res_full.stat_updates)
    state.teacher = ema_update(state.teacher, state.student, config.alpha)
    state.step += 1
    state.last_breakdown = breakdown
    return state


# ---------------------------------------------------------------------------
# Full training runs
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TrainResult:
    arch: Architecture
    student: Params
    teacher: Params
    best_teacher: Params
    best_epoch: int
    best_val_accuracy: float
    metrics: list[dict]
    config: TrainConfig


def _epoch_record(
    epoch: int,
    lr: float,
    ramp: float,
    term_means: dict[str, float],
    val_student: evaluation.EvalReport | None,
    val_teacher: evaluation.EvalReport | None,
) -> dict:
    rec = {"epoch": epoch, "lr": lr, "ramp": ramp}
    for name, value in term_means.items():
        rec[f"loss_{name}"] = value
    for tag, rep in (("student", val_student), ("teacher", val_teacher)):
        rec[f"val_{tag}_accuracy"] = None if rep is None else rep.accuracy
        rec[f"val_{tag}_auc_n"] = None if rep is None else rep.auc_n
    return rec


def train(
    train_ds: Dataset,
    val_ds: Dataset | None,
    config: TrainConfig,
    out_dir: Path | str | None = None,
    roi_masks: dict[str, np.ndarray] | None = None,
) -> TrainResult:
    """Train one model pair; deterministic given the config seed.

    Writes ``metrics.jsonl``, ``best.ckpt`` and ``final.ckpt`` into
    ``out_dir`` when given.  The teacher with the highest validation
    accuracy is kept as ``best_teacher`` (the reported model).
    """
    config.validate()
    image_size = train_ds.image_size
    if image_size == 0:
        raise ConfigError("training dataset is empty")
    arch = build_architecture(config.arch, image_size)

    ss = np.random.SeedSequence([config.seed, 0x7EAC])
    init_ss, sampler_ss, perturb_ss = ss.spawn(3)
    init_rng = np.random.Generator(np.random.PCG64(init_ss))
    sampler_rng = np.random.Generator(np.random.PCG64(sampler_ss))
    perturb_rng = np.random.Generator(np.random.PCG64(perturb_ss))

    steps_per_epoch = config.steps_per_epoch or max(
        1, math.ceil(train_ds.n_total / config.batch_size)
    )
    total_steps = config.epochs * steps_per_epoch
    state = init_state(arch, config, init_rng, perturb_rng, total_steps)

    if roi_masks is None and config.epochs > 0:
        roi_masks = roi.compute_stack_rois(
            train_ds, config.area_min_frac, config.roi_threshold
        )
    sampler = (
        BatchSampler(train_ds, config, sampler_rng) if config.epochs > 0 else None
    )

    metrics: list[dict] = []
    best_teacher = clone_params(state.teacher)
    best_epoch = -1
    best_acc = -1.0
    for epoch in range(config.epochs):
        state.epoch = epoch
        lr_epoch = cosine_lr(epoch * steps_per_epoch, total_steps, config.lr0)
        sums = {k: 0.0 for k in ("cls", "cls_roi", "con", "con_roi", "ent", "total")}
        for _ in range(steps_per_epoch):
            train_step(state, sampler.sample_batch(), roi_masks, config)
            for key in sums:
                sums[key] += getattr(state.last_breakdown, key)
        term_means = {k: v / steps_per_epoch for k, v in sums.items()}

        val_student = val_teacher = None
        if val_ds is not None and val_ds.n_labeled > 0:
            val_student = evaluation.evaluate_model(arch, state.student, val_ds)
            val_teacher = evaluation.evaluate_model(arch, state.teacher, val_ds)
            if val_teacher.accuracy > best_acc:
                best_acc = val_teacher.accuracy
                best_epoch = epoch
                best_teacher = clone_params(state.teacher)
        rec = _epoch_record(
            epoch, lr_epoch, ramp_up(epoch, config.weights.T),
            term_means, val_student, val_teacher,
        )
        metrics.append(rec)
        logger.info(
            "epoch %d: loss %.4f, val teacher acc %s", epoch,
            term_means["total"],
            "n/a" if val_teacher is None else f"{val_teacher.accuracy:.4f}",
        )

    if best_epoch < 0:
        # no validation signal; fall back to the final teacher
        best_teacher = clone_params(state.teacher)
        best_epoch = config.epochs - 1

    result = TrainResult(
        arch=arch,
        student=state.student,
        teacher=state.teacher,
        best_teacher=best_teacher,
        best_epoch=best_epoch,
        best_val_accuracy=best_acc,
        metrics=metrics,
        config=config,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.jsonl", metrics)
        meta = {
            "arch": arch.arch_id,
            "image_size": image_size,
            "seed": config.seed,
            "config": config.flat_dict(),
        }
        ckpt.save_checkpoint(
            out / "best.ckpt",
            student=state.student,
            teacher=best_teacher,
            adam_m=state.adam_m,
            adam_v=state.adam_v,
            meta={**meta, "epoch": best_epoch, "step": state.step,
                  "val_accuracy": best_acc, "kind": "best"},
        )
        ckpt.save_checkpoint(
            out / "final.ckpt",
            student=state.student,
            teacher=state.teacher,
            adam_m=state.adam_m,
            adam_v=state.adam_v,
            meta={**meta, "epoch": config.epochs - 1, "step": state.step,
                  "val_accuracy": -1.0 if not metrics else
                  metrics[-1]["val_teacher_accuracy"], "kind": "final"},
        )
    return result


def write_metrics(path: Path | str, metrics: list[dict]) -> None:
    """Line-delimited records with sorted keys and no timestamps."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train_runs(
    train_ds: Dataset,
    val_ds: Dataset | None,
    config: TrainConfig,
    out_dir: Path | str | None = None,
    roi_masks: dict[str, np.ndarray] | None = None,
) -> list[TrainResult]:
    """Repeat training over ``config.runs`` consecutive seeds."""
    results = []
    for i in range(config.runs):
        run_cfg = replace(config, seed=config.seed + i)
        run_dir = None if out_dir is None else Path(out_dir) / f"run_{i}"
        results.append(train(train_ds, val_ds, run_cfg, run_dir, roi_masks))
    return results
