"""Accuracy, class-N ROC AUC, and multi-run aggregation.

AUC uses the rank (Mann-Whitney) formulation with average ranks for ties:
positives are the non-diagnostic class, scored by its predicted
probability P_N.  Multi-run aggregation reports mean and sample (n-1)
standard deviation, matching how repeated-seed experiments are summarized.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import Dataset, Label, Slice

N_CLASSES = 3


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    auc_n: float | None
    n_examples: int
    per_class_counts: tuple[int, int, int]  # true-label counts for D, N, W


def accuracy(pred_labels, true_labels) -> float:
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    return float(np.mean(pred == true))


def auc_n(scores_pn, true_labels) -> float:
    """One-vs-rest AUC for class N from P_N scores, ties counted as 0.5.

    Computed as the normalized Mann-Whitney U statistic via average ranks.
    """
    scores = np.asarray(scores_pn, dtype=np.float64)
    true = np.asarray(true_labels, dtype=np.int64)
    if scores.shape != true.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {true.shape}")
    pos = true == int(Label.N)
    n_pos = int(pos.sum())
    n_neg = int(scores.size - n_pos)
    if n_pos == 0:
        raise ValueError("no examples of class N; AUC undefined")
    if n_neg == 0:
        raise ValueError("no examples outside class N; AUC undefined")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def predict_probs(
    arch, params, slices: list[Slice], chunk: int = 256
) -> np.ndarray:
    """Class probabilities for a list of slices, evaluated in chunks."""
    if not slices:
        return np.zeros((0, N_CLASSES), dtype=np.float32)
    out = []
    for start in range(0, len(slices), chunk):
        pixels = np.stack([s.pixels for s in slices[start : start + chunk]])
        out.append(arch.forward_batch(params, pixels).probs)
    return np.concatenate(out, axis=0)


def evaluate_model(arch, params, dataset: Dataset, chunk: int = 256) -> EvalReport:
    """Evaluate on the labeled part of a dataset; prediction = argmax probs.

    argmax breaks ties toward the lowest class index.  ``auc_n`` is None
    when the labeled pool lacks either N or non-N examples.
    """
    if dataset.n_labeled == 0:
        raise ValueError("dataset has no labeled slices to evaluate on")
    slices = [s for s, _ in dataset.labeled]
    true = np.array([int(lab) for _, lab in dataset.labeled], dtype=np.int64)
    probs = predict_probs(arch, params, slices, chunk=chunk)
    preds = np.argmax(probs, axis=1)
    counts = tuple(int((true == k).sum()) for k in range(N_CLASSES))
    try:
        auc = auc_n(probs[:, int(Label.N)], true)
    except ValueError:
        auc = None
    return EvalReport(
        accuracy=accuracy(preds, true),
        auc_n=auc,
        n_examples=int(true.size),
        per_class_counts=counts,
    )


def aggregate_runs(reports: list[EvalReport]) -> dict[str, tuple[float, float]]:
    """Mean and sample (n-1) std of accuracy and auc_n across runs.

    A single run gets std 0 by convention, with a warning.  Reports whose
    auc_n is undefined are left out of the auc aggregate.
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    if len(reports) == 1:
        warnings.warn("aggregating a single run; std is 0 by convention",
                      stacklevel=2)

    def _stats(values: list[float]) -> tuple[float, float]:
        arr = np.asarray(values, dtype=np.float64)
        std = 0.0 if arr.size <= 1 else float(np.std(arr, ddof=1))
        return float(arr.mean()), std

    out = {"accuracy": _stats([r.accuracy for r in reports])}
    aucs = [r.auc_n for r in reports if r.auc_n is not None]
    out["auc_n"] = _stats(aucs) if aucs else (float("nan"), 0.0)
    return out


def roc_points(scores_pn, true_labels) -> np.ndarray:
    """(fpr, tpr) pairs for class N, one row per distinct threshold.

    Starts at (0, 0) and ends at (1, 1); trapezoidal integration of the
    curve equals :func:`auc_n` (ties are grouped, so tied blocks become
    diagonal segments).
    """
    scores = np.asarray(scores_pn, dtype=np.float64)
    true = np.asarray(true_labels, dtype=np.int64)
    pos = (true == int(Label.N)).astype(np.float64)
    n_pos = pos.sum()
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC undefined without both N and non-N examples")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    tp = np.cumsum(pos[order])
    fp = np.cumsum(1.0 - pos[order])
    # keep only the last index of each tied block
    keep = np.r_[sorted_scores[1:] != sorted_scores[:-1], True]
    tpr = np.r_[0.0, tp[keep] / n_pos]
    fpr = np.r_[0.0, fp[keep] / n_neg]
    return np.column_stack([fpr, tpr])
