"""Loss terms, schedules, and the composite training objective.

The objective combines two supervised terms and three unsupervised terms:

    total = cls + cls_roi + w(t) * (lam * con + beta * con_roi + gamma * ent)

* cls      mean cross-entropy of the student on full labeled images
* cls_roi  mean cross-entropy of the student on brain-masked labeled images
* con      mean KL(teacher || student) on full images, whole batch
* con_roi  mean squared distance between the teacher's feature of the masked
           image and the student's feature of the full image, whole batch
* ent      mean prediction entropy of the student, whole batch

w(t) is a ramp that grows from exp(-5) at epoch 0 to 1 at epoch T and stays
there; it scales only the three unsupervised coefficients.  Each term is a
mean over its own support (labeled subset for the cls terms, whole batch
otherwise), so coefficients stay comparable across batch compositions.

Teacher outputs are constants under differentiation: gradients flow only
into the student's logits and features.  All scalar reductions run in
float64 so that toggling a coefficient shifts the total by exactly the
removed term, to well below 1e-9.

Probabilities are floored at EPS before every log, which keeps the terms
finite under one-hot saturation without perturbing exact values such as
KL(p, p) = 0 or H(uniform) = ln 3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Label
from .errors import ConfigError

EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the unsupervised terms and the ramp horizon in epochs."""

    lam: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    T: int = 5

    def validate(self) -> "LossWeights":
        for name in ("lam", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        return self


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    cls_roi: float
    con: float
    con_roi: float
    ent: float
    ramp: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "cls": self.cls,
            "cls_roi": self.cls_roi,
            "con": self.con,
            "con_roi": self.con_roi,
            "ent": self.ent,
            "ramp": self.ramp,
            "total": self.total,
        }


def _log_floored(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, EPS))


def ramp_up(epoch: float, horizon: float) -> float:
    """exp(-5 (1 - min(t, T)/T)^2); 1 for all t >= T."""
    t = min(max(float(epoch), 0.0), float(horizon))
    u = 1.0 - t / float(horizon)
    return float(np.exp(-5.0 * u * u))


def cross_entropy(probs: np.ndarray, label: Label | int) -> float:
    """-log p[label] with the probability floored at EPS."""
    return float(-_log_floored(np.asarray(probs, dtype=np.float64))[int(label)])


def kl_consistency(teacher_probs: np.ndarray, student_probs: np.ndarray) -> float:
    """KL(teacher || student) for one probability vector pair, EPS-floored."""
    t = np.asarray(teacher_probs, dtype=np.float64)
    s = np.asarray(student_probs, dtype=np.float64)
    # t * log t is taken as 0 where t == 0
    terms = np.where(t > 0.0, t * (_log_floored(t) - _log_floored(s)), 0.0)
    return float(terms.sum())


def roi_feature_mse(teacher_feature: np.ndarray, student_feature: np.ndarray) -> float:
    """Mean squared difference over the feature dimension."""
    t = np.asarray(teacher_feature, dtype=np.float64)
    s = np.asarray(student_feature, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"feature shape mismatch: {t.shape} vs {s.shape}")
    return float(np.mean((t - s) ** 2))


def entropy_term(probs: np.ndarray) -> float:
    """Shannon entropy -sum p log p, EPS-floored."""
    p = np.asarray(probs, dtype=np.float64)
    terms = np.where(p > 0.0, p * _log_floored(p), 0.0)
    return float(-terms.sum())


@dataclass(eq=False)
class BatchForward:
    """Forward outputs the composite objective consumes, labeled rows first.

    ``probs_full`` and ``features_full`` come from the student on full
    images and always cover the whole batch.  ``probs_masked`` covers only
    the first ``n_labeled`` rows (student on masked images).  The two
    teacher arrays cover the whole batch; either may be None when its
    coefficient is exactly zero, in which case the term reports 0.
    """

    probs_full: np.ndarray  # (B, 3) student on full images
    features_full: np.ndarray  # (B, F) student on full images
    n_labeled: int
    probs_masked: np.ndarray | None = None  # (n_labeled, 3) student on masked
    teacher_probs_full: np.ndarray | None = None  # (B, 3)
    teacher_features_masked: np.ndarray | None = None  # (B, F)


def _mean64(x: np.ndarray) -> float:
    return float(np.sum(x, dtype=np.float64) / x.shape[0])


def _check_batch(fwd: BatchForward, labels: np.ndarray, weights: LossWeights):
    b = fwd.probs_full.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    if fwd.features_full.shape[0] != b:
        raise ValueError("probs_full and features_full disagree on batch size")
    n_l = int(fwd.n_labeled)
    if len(labels) != n_l:
        raise ValueError(f"got {len(labels)} labels for {n_l} labeled slices")
    if n_l > b:
        raise ValueError(f"n_labeled {n_l} exceeds batch size {b}")
    if n_l > 0 and fwd.probs_masked is None:
        raise ValueError("missing student forward on masked labeled images")
    if n_l > 0 and fwd.probs_masked.shape[0] != n_l:
        raise ValueError("probs_masked does not cover the labeled subset")
    if weights.lam > 0 and fwd.teacher_probs_full is None:
        raise ValueError("missing teacher forward on full images (lam > 0)")
    if weights.beta > 0 and fwd.teacher_features_masked is None:
        raise ValueError("missing teacher forward on masked images (beta > 0)")
    if fwd.teacher_features_masked is not None and (
        fwd.teacher_features_masked.shape != fwd.features_full.shape
    ):
        raise ValueError("teacher/student feature shapes differ")


def composite_loss(
    fwd: BatchForward,
    labels: np.ndarray,
    weights: LossWeights,
    epoch: float,
) -> LossBreakdown:
    breakdown, _, _, _ = composite_loss_and_grads(
        fwd, labels, weights, epoch, need_grads=False
    )
    return breakdown


def composite_loss_and_grads(
    fwd: BatchForward,
    labels: np.ndarray,
    weights: LossWeights,
    epoch: float,
    *,
    need_grads: bool = True,
):
    """Composite loss with hand-derived gradients w.r.t. student outputs.

    Returns ``(breakdown, d_logits_full, d_feature_full, d_logits_masked)``,
    where the gradient arrays are with respect to the student's pre-softmax
    logits (full and masked passes) and its pooled feature on the full
    pass.  Teacher inputs never receive gradient.
    Gradient arrays are None when the corresponding pass is absent.
    """
    labels = np.asarray(labels, dtype=np.int64)
    _check_batch(fwd, labels, weights)
    p = fwd.probs_full
    b = p.shape[0]
    n_l = int(fwd.n_labeled)
    ramp = ramp_up(epoch, weights.T)
    dtype = p.dtype

    p64 = p.astype(np.float64, copy=False)
    logp = _log_floored(p64)

    d_logits_full = np.zeros_like(p, dtype=dtype) if need_grads else None
    d_logits_masked = None
    d_feature_full = None

    # -- supervised terms over the labeled subset ---------------------------
    cls = 0.0
    cls_roi = 0.0
    if n_l > 0:
        rows = np.arange(n_l)
        cls = float(-logp[rows, labels].sum() / n_l)
        pm64 = fwd.probs_masked.astype(np.float64, copy=False)
        cls_roi = float(-_log_floored(pm64)[rows, labels].sum() / n_l)
        if need_grads:
            onehot = np.zeros((n_l, p.shape[1]), dtype=dtype)
            onehot[rows, labels] = 1.0
            d_logits_full[:n_l] += (p[:n_l] - onehot) / n_l
            d_logits_masked = (fwd.probs_masked - onehot) / n_l

    # -- consistency between teacher and student predictions ----------------
    con = 0.0
    if fwd.teacher_probs_full is not None:
        t64 = fwd.teacher_probs_full.astype(np.float64, copy=False)
        terms = np.where(t64 > 0.0, t64 * (_log_floored(t64) - logp), 0.0)
        con = float(terms.sum() / b)
        if need_grads and weights.lam > 0:
            scale = dtype.type(ramp * weights.lam / b)
            d_logits_full += scale * (p - fwd.teacher_probs_full.astype(dtype, copy=False))

    # -- feature consistency between masked teacher and full student --------
    con_roi = 0.0
    if fwd.teacher_features_masked is not None:
        z = fwd.features_full
        zt = fwd.teacher_features_masked
        diff64 = z.astype(np.float64, copy=False) - zt.astype(np.float64, copy=False)
        f_dim = z.shape[1]
        con_roi = float(np.sum(diff64 * diff64) / (b * f_dim))
        if need_grads and weights.beta > 0:
            scale = dtype.type(ramp * weights.beta * 2.0 / (b * f_dim))
            d_feature_full = scale * (z - zt.astype(dtype, copy=False))

    # -- entropy of the student's predictions -------------------------------
    h_rows = -np.where(p64 > 0.0, p64 * logp, 0.0).sum(axis=1)
    ent = float(h_rows.sum() / b)
    if need_grads and weights.gamma > 0:
        scale = dtype.type(ramp * weights.gamma / b)
        d_logits_full += scale * (-p * (logp + h_rows[:, None])).astype(dtype, copy=False)

    unsup = weights.lam * con + weights.beta * con_roi + weights.gamma * ent
    total = cls + cls_roi + ramp * unsup
    breakdown = LossBreakdown(
        cls=cls, cls_roi=cls_roi, con=con, con_roi=con_roi, ent=ent,
        ramp=ramp, total=total,
    )
    return breakdown, d_logits_full, d_feature_full, d_logits_masked
