"""Accuracy, rank-based AUC for class N, ROC geometry, run aggregation."""
import numpy as np
import pytest

from fetaliqa.backbone import build_architecture
from fetaliqa.data import Label
from fetaliqa.evaluation import (
    EvalReport,
    accuracy,
    aggregate_runs,
    auc_n,
    evaluate_model,
    predict_probs,
    roc_points,
)

from conftest import tiny_dataset


def pair_count_auc(scores, labels):
    """O(n^2) Mann-Whitney oracle: wins + half-ties over all pos/neg pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[np.asarray(labels) == int(Label.N)]
    neg = scores[np.asarray(labels) != int(Label.N)]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def random_labeled_scores(rng, n, tie_grid=None):
    labels = rng.integers(0, 3, size=n)
    if tie_grid:
        scores = rng.integers(0, tie_grid, size=n) / tie_grid
    else:
        scores = rng.random(n)
    # ensure both sides are populated
    labels[0] = int(Label.N)
    labels[1] = int(Label.D)
    return scores, labels


class TestAccuracy:
    def test_simple_fraction(self):
        assert accuracy([0, 1, 2, 1], [0, 1, 1, 1]) == 0.75

    def test_perfect_and_zero(self):
        assert accuracy([2, 2], [2, 2]) == 1.0
        assert accuracy([0, 0], [1, 2]) == 0.0

    def test_errors(self):
        with pytest.raises(ValueError, match="mismatch"):
            accuracy([0, 1], [0])
        with pytest.raises(ValueError, match="empty"):
            accuracy([], [])


class TestAucN:
    def test_perfect_separation(self):
        labels = [1, 1, 0, 2]
        assert auc_n([0.9, 0.8, 0.1, 0.2], labels) == 1.0
        assert auc_n([0.1, 0.2, 0.9, 0.8], labels) == 0.0

    def test_all_tied_is_half(self):
        assert auc_n([0.5] * 6, [1, 1, 0, 0, 2, 2]) == 0.5

    def test_textbook_tie_case(self):
        # pos {0.8, 0.5}, neg {0.5, 0.2}: pairs -> 1 + 1 + 0.5 + 1 = 3.5 of 4
        scores = [0.8, 0.5, 0.5, 0.2]
        labels = [1, 1, 0, 0]
        assert auc_n(scores, labels) == pytest.approx(0.875, abs=1e-15)

    @pytest.mark.parametrize("tie_grid", [None, 8, 3])
    def test_matches_pair_oracle(self, rng, tie_grid):
        for _ in range(40):
            n = int(rng.integers(5, 40))
            scores, labels = random_labeled_scores(rng, n, tie_grid)
            got = auc_n(scores, labels)
            want = pair_count_auc(scores, labels)
            assert got == pytest.approx(want, abs=1e-12)

    def test_monotone_transform_invariance(self, rng):
        scores, labels = random_labeled_scores(rng, 30)
        base = auc_n(scores, labels)
        assert auc_n(np.exp(4.0 * scores), labels) == pytest.approx(base, abs=1e-12)
        assert auc_n(1.0 - scores, labels) == pytest.approx(1.0 - base, abs=1e-12)

    def test_errors_without_both_classes(self):
        with pytest.raises(ValueError, match="of class N"):
            auc_n([0.1, 0.2], [0, 2])
        with pytest.raises(ValueError, match="outside class N"):
            auc_n([0.1, 0.2], [1, 1])
        with pytest.raises(ValueError, match="mismatch"):
            auc_n([0.1], [1, 0])


class TestRocPoints:
    def test_endpoints(self, rng):
        scores, labels = random_labeled_scores(rng, 25)
        pts = roc_points(scores, labels)
        np.testing.assert_array_equal(pts[0], [0.0, 0.0])
        np.testing.assert_array_equal(pts[-1], [1.0, 1.0])

    def test_monotone_axes(self, rng):
        scores, labels = random_labeled_scores(rng, 40, tie_grid=6)
        pts = roc_points(scores, labels)
        assert np.all(np.diff(pts[:, 0]) >= 0)
        assert np.all(np.diff(pts[:, 1]) >= 0)

    @pytest.mark.parametrize("tie_grid", [None, 5])
    def test_trapezoid_equals_auc(self, rng, tie_grid):
        for _ in range(25):
            scores, labels = random_labeled_scores(rng, int(rng.integers(6, 50)),
                                                   tie_grid)
            pts = roc_points(scores, labels)
            area = float(np.trapezoid(pts[:, 1], pts[:, 0]))
            assert area == pytest.approx(auc_n(scores, labels), abs=1e-12)

    def test_tie_blocks_collapse(self):
        # one distinct threshold -> single diagonal segment
        pts = roc_points([0.3, 0.3, 0.3], [1, 0, 2])
        assert pts.shape == (2, 2)

    def test_requires_both_classes(self):
        with pytest.raises(ValueError):
            roc_points([0.5, 0.6], [0, 0])


class TestPredictAndEvaluate:
    def test_chunking_consistent(self, rng):
        ds = tiny_dataset(rng, n_labeled=10, n_unlabeled=0)
        arch = build_architecture("tiny_cnn", ds.image_size)
        params = arch.init_params(np.random.default_rng(0))
        slices = [s for s, _ in ds.labeled]
        a = predict_probs(arch, params, slices, chunk=3)
        b = predict_probs(arch, params, slices, chunk=256)
        np.testing.assert_allclose(a, b, rtol=1e-6)
        assert a.shape == (10, 3)

    def test_empty_slices(self, rng):
        arch = build_architecture("tiny_cnn", 8)
        params = arch.init_params(np.random.default_rng(0))
        assert predict_probs(arch, params, []).shape == (0, 3)

    def test_evaluate_reports_counts(self, rng):
        ds = tiny_dataset(rng, n_labeled=9, n_unlabeled=4)
        arch = build_architecture("tiny_cnn", ds.image_size)
        params = arch.init_params(np.random.default_rng(0))
        rep = evaluate_model(arch, params, ds)
        assert rep.n_examples == 9
        assert rep.per_class_counts == (3, 3, 3)
        assert 0.0 <= rep.accuracy <= 1.0
        assert rep.auc_n is not None and 0.0 <= rep.auc_n <= 1.0

    def test_evaluate_needs_labels(self, rng):
        ds = tiny_dataset(rng, n_labeled=0, n_unlabeled=4)
        arch = build_architecture("tiny_cnn", ds.image_size)
        params = arch.init_params(np.random.default_rng(0))
        with pytest.raises(ValueError, match="labeled"):
            evaluate_model(arch, params, ds)

    def test_auc_none_without_class_n(self, rng):
        ds = tiny_dataset(rng, n_labeled=4, n_unlabeled=0)
        # relabel everything diagnostic
        ds.labeled = [(s, Label.D) for s, _ in ds.labeled]
        arch = build_architecture("tiny_cnn", ds.image_size)
        params = arch.init_params(np.random.default_rng(0))
        rep = evaluate_model(arch, params, ds)
        assert rep.auc_n is None


def report(acc, auc=None):
    return EvalReport(accuracy=acc, auc_n=auc, n_examples=10,
                      per_class_counts=(4, 3, 3))


class TestAggregateRuns:
    def test_mean_and_sample_std(self):
        out = aggregate_runs([report(0.8, 0.9), report(0.9, 0.7), report(0.7, 0.8)])
        np.testing.assert_allclose(out["accuracy"][0], 0.8)
        np.testing.assert_allclose(out["accuracy"][1], np.std([0.8, 0.9, 0.7], ddof=1))
        np.testing.assert_allclose(out["auc_n"][0], 0.8)

    def test_single_run_warns_with_zero_std(self):
        with pytest.warns(UserWarning, match="single run"):
            out = aggregate_runs([report(0.75, 0.5)])
        assert out["accuracy"] == (0.75, 0.0)
        assert out["auc_n"] == (0.5, 0.0)

    def test_undefined_aucs_excluded(self):
        out = aggregate_runs([report(0.8, None), report(0.6, 0.9), report(0.7, None)])
        assert out["auc_n"][0] == pytest.approx(0.9)
        assert out["accuracy"][0] == pytest.approx(0.7)

    def test_all_aucs_undefined(self):
        out = aggregate_runs([report(0.8), report(0.6)])
        assert np.isnan(out["auc_n"][0])
        assert out["auc_n"][1] == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_runs([])
