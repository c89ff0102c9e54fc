"""Online reacquisition simulation.

Each slice in a freshly acquired stack gets a quality score s = 1 - P_N;
the n_re lowest-scoring slices are flagged for reacquisition, where n_re is
a proportion q of the stack size.  The figure of merit is how many truly
non-diagnostic slices the selection misses, compared against picking the
same number of slices uniformly at random.

Selection sorts by score with ties broken by ascending slice index, so for
a fixed stack the selected sets are nested as q grows; the missed count is
therefore non-increasing in q.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Label


@dataclass(frozen=True)
class ReacqConfig:
    n_acq: int
    q_frac: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_acq < 1:
            raise ValueError(f"n_acq must be >= 1, got {self.n_acq}")
        if not 0.0 <= self.q_frac <= 1.0:
            raise ValueError(f"q_frac must lie in [0, 1], got {self.q_frac}")

    @property
    def n_re(self) -> int:
        """Slices to reacquire: nearest integer to q * n_acq, ties up."""
        return int(math.floor(self.q_frac * self.n_acq + 0.5))


@dataclass(eq=False)
class ReacqResult:
    scores: np.ndarray | None  # None for the random baseline
    selected: np.ndarray  # sorted indices, len == n_re
    missed: int


def iqa_score(probs: np.ndarray) -> float:
    """Quality score s = 1 - P_N for one probability vector."""
    return float(1.0 - np.asarray(probs, dtype=np.float64)[int(Label.N)])


def select_reacquire(scores, n_re: int) -> np.ndarray:
    """Indices of the n_re lowest scores, ties broken by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= n_re <= scores.size:
        raise ValueError(f"n_re {n_re} outside [0, {scores.size}]")
    order = np.lexsort((np.arange(scores.size), scores))
    return np.sort(order[:n_re])


def _count_missed(true_labels: np.ndarray, selected: np.ndarray) -> int:
    is_n = true_labels == int(Label.N)
    covered = np.zeros(true_labels.size, dtype=bool)
    covered[selected] = True
    return int(np.count_nonzero(is_n & ~covered))


def simulate_stack(
    slice_probs: np.ndarray, true_labels, config: ReacqConfig
) -> ReacqResult:
    """Score, select, and count missed non-diagnostic slices for one stack."""
    probs = np.asarray(slice_probs, dtype=np.float64)
    true = np.asarray(true_labels, dtype=np.int64)
    if probs.shape[0] != config.n_acq or true.size != config.n_acq:
        raise ValueError(
            f"stack size mismatch: {probs.shape[0]} probs, {true.size} labels, "
            f"n_acq {config.n_acq}"
        )
    scores = 1.0 - probs[:, int(Label.N)]
    selected = select_reacquire(scores, config.n_re)
    return ReacqResult(
        scores=scores, selected=selected, missed=_count_missed(true, selected)
    )


def random_baseline(
    true_labels, config: ReacqConfig, rng: np.random.Generator
) -> ReacqResult:
    """Reacquire a uniform random subset of the same size."""
    true = np.asarray(true_labels, dtype=np.int64)
    if true.size != config.n_acq:
        raise ValueError(f"got {true.size} labels for n_acq {config.n_acq}")
    selected = np.sort(rng.permutation(config.n_acq)[: config.n_re])
    return ReacqResult(
        scores=None, selected=selected, missed=_count_missed(true, selected)
    )


def sweep_q(
    stacks: list[tuple[np.ndarray, np.ndarray]],
    q_values: list[float],
    trials: int = 100,
    seed: int = 0,
) -> list[dict]:
    """Missed-count curve over q for a set of (probs, labels) stacks.

    Returns one record per q: the model's mean and sample std of missed
    counts over stacks, and the random baseline's mean over
    ``trials`` independent draws per stack.
    """
    if not stacks:
        raise ValueError("no stacks to simulate")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xACC])))
    rows = []
    for q in q_values:
        model_missed = []
        random_missed = []
        for probs, labels in stacks:
            config = ReacqConfig(n_acq=len(labels), q_frac=q, seed=seed)
            model_missed.append(simulate_stack(probs, labels, config).missed)
            for _ in range(trials):
                random_missed.append(random_baseline(labels, config, rng).missed)
        arr = np.asarray(model_missed, dtype=np.float64)
        std = 0.0 if arr.size <= 1 else float(np.std(arr, ddof=1))
        rows.append(
            {
                "q": float(q),
                "mean_missed": float(arr.mean()),
                "std_missed": std,
                "random_mean": float(np.mean(random_missed)),
            }
        )
    return rows
