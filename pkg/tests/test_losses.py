"""Loss terms, schedules, and the composite objective.

Expected values are recomputed with independent scalar formulas (plain
math.log loops), never by calling the code under test twice.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from fetaliqa.errors import ConfigError
from fetaliqa.losses import (
    EPS,
    BatchForward,
    LossWeights,
    composite_loss,
    composite_loss_and_grads,
    cross_entropy,
    entropy_term,
    kl_consistency,
    ramp_up,
    roi_feature_mse,
)


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# ramp_up
# ---------------------------------------------------------------------------

class TestRampUp:
    def test_start_value(self):
        assert ramp_up(0, 5) == pytest.approx(math.exp(-5.0), abs=1e-12)

    def test_end_value_exact(self):
        assert ramp_up(5, 5) == 1.0

    def test_clamped_beyond_horizon(self):
        assert ramp_up(17, 5) == 1.0
        assert ramp_up(1e9, 5) == 1.0

    def test_clamped_below_zero(self):
        assert ramp_up(-3, 5) == pytest.approx(math.exp(-5.0), abs=1e-12)

    def test_interior_formula(self):
        for t in (0.5, 1, 2.25, 3, 4.9):
            u = 1.0 - t / 5.0
            assert ramp_up(t, 5) == pytest.approx(math.exp(-5.0 * u * u), rel=1e-15)

    def test_monotone_nondecreasing(self):
        ts = np.linspace(-1, 7, 300)
        vals = [ramp_up(t, 5) for t in ts]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# scalar terms
# ---------------------------------------------------------------------------

class TestScalarTerms:
    def test_cross_entropy_value(self):
        p = np.array([0.2, 0.5, 0.3])
        assert cross_entropy(p, 1) == pytest.approx(-math.log(0.5), rel=1e-15)

    def test_cross_entropy_floors_zero_probability(self):
        p = np.array([1.0, 0.0, 0.0])
        assert cross_entropy(p, 2) == pytest.approx(-math.log(EPS), rel=1e-15)

    def test_kl_self_is_exactly_zero(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = rng.dirichlet(np.ones(3))
            assert kl_consistency(p, p) == 0.0

    def test_kl_value_against_loop(self):
        t = np.array([0.7, 0.2, 0.1])
        s = np.array([0.3, 0.4, 0.3])
        expected = sum(ti * math.log(ti / si) for ti, si in zip(t, s))
        assert kl_consistency(t, s) == pytest.approx(expected, rel=1e-12)

    def test_kl_zero_teacher_component_contributes_nothing(self):
        t = np.array([0.0, 1.0, 0.0])
        s = np.array([0.25, 0.5, 0.25])
        assert kl_consistency(t, s) == pytest.approx(-math.log(0.5), rel=1e-12)

    def test_kl_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            t = rng.dirichlet(np.ones(3))
            s = rng.dirichlet(np.ones(3))
            assert kl_consistency(t, s) >= 0.0

    def test_entropy_uniform_is_ln3(self):
        p = np.full(3, 1.0 / 3.0)
        assert entropy_term(p) == pytest.approx(math.log(3.0), abs=1e-12)

    def test_entropy_onehot_is_zero(self):
        assert entropy_term(np.array([0.0, 1.0, 0.0])) == 0.0

    def test_entropy_value_against_loop(self):
        p = np.array([0.6, 0.3, 0.1])
        expected = -sum(pi * math.log(pi) for pi in p)
        assert entropy_term(p) == pytest.approx(expected, rel=1e-12)

    def test_roi_feature_mse_value(self):
        t = np.array([1.0, 2.0, 3.0, 4.0])
        s = np.array([1.5, 2.0, 2.0, 6.0])
        expected = (0.25 + 0.0 + 1.0 + 4.0) / 4.0
        assert roi_feature_mse(t, s) == pytest.approx(expected, rel=1e-15)

    def test_roi_feature_mse_shape_mismatch(self):
        with pytest.raises(ValueError):
            roi_feature_mse(np.zeros(3), np.zeros(4))


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lam, w.beta, w.gamma, w.T) == (1.0, 1.0, 1.0, 5)

    @pytest.mark.parametrize("kwargs", [
        {"lam": -0.1}, {"beta": -1.0}, {"gamma": -1e-9}, {"T": 0},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigError):
            LossWeights(**kwargs).validate()


# ---------------------------------------------------------------------------
# composite loss
# ---------------------------------------------------------------------------

def make_forward(rng, b=6, n_l=2, f=4, dtype=np.float64):
    probs_full = rng.dirichlet(np.ones(3), size=b).astype(dtype)
    return BatchForward(
        probs_full=probs_full,
        features_full=rng.standard_normal((b, f)).astype(dtype),
        n_labeled=n_l,
        probs_masked=rng.dirichlet(np.ones(3), size=n_l).astype(dtype),
        teacher_probs_full=rng.dirichlet(np.ones(3), size=b).astype(dtype),
        teacher_features_masked=rng.standard_normal((b, f)).astype(dtype),
    )


def oracle_breakdown(fwd, labels, weights, epoch):
    """Scalar-loop recomputation of every term of the composite objective."""
    b = fwd.probs_full.shape[0]
    n_l = fwd.n_labeled
    cls = sum(cross_entropy(fwd.probs_full[i], labels[i]) for i in range(n_l)) / max(n_l, 1)
    cls_roi = sum(cross_entropy(fwd.probs_masked[i], labels[i]) for i in range(n_l)) / max(n_l, 1)
    con = sum(
        kl_consistency(fwd.teacher_probs_full[i], fwd.probs_full[i]) for i in range(b)
    ) / b
    con_roi = sum(
        roi_feature_mse(fwd.teacher_features_masked[i], fwd.features_full[i])
        for i in range(b)
    ) / b
    ent = sum(entropy_term(fwd.probs_full[i]) for i in range(b)) / b
    ramp = ramp_up(epoch, weights.T)
    total = cls + cls_roi + ramp * (
        weights.lam * con + weights.beta * con_roi + weights.gamma * ent
    )
    return cls, cls_roi, con, con_roi, ent, ramp, total


class TestCompositeLoss:
    def test_matches_scalar_oracle(self, rng):
        for _ in range(20):
            fwd = make_forward(rng)
            labels = rng.integers(0, 3, size=fwd.n_labeled)
            weights = LossWeights(lam=1.3, beta=0.7, gamma=0.4, T=5)
            epoch = float(rng.uniform(0, 8))
            bd = composite_loss(fwd, labels, weights, epoch)
            cls, cls_roi, con, con_roi, ent, ramp, total = oracle_breakdown(
                fwd, labels, weights, epoch
            )
            assert bd.cls == pytest.approx(cls, rel=1e-12, abs=1e-12)
            assert bd.cls_roi == pytest.approx(cls_roi, rel=1e-12, abs=1e-12)
            assert bd.con == pytest.approx(con, rel=1e-12, abs=1e-12)
            assert bd.con_roi == pytest.approx(con_roi, rel=1e-12, abs=1e-12)
            assert bd.ent == pytest.approx(ent, rel=1e-12, abs=1e-12)
            assert bd.ramp == ramp
            assert bd.total == pytest.approx(total, rel=1e-12, abs=1e-12)

    def test_coefficient_toggling_shifts_total_by_scaled_term(self, rng):
        """Zeroing one coefficient removes exactly ramp * coeff * term."""
        for trial in range(30):
            fwd = make_forward(rng, b=5, n_l=3)
            labels = rng.integers(0, 3, size=3)
            epoch = float(rng.uniform(0, 7))
            base_w = LossWeights(lam=0.9, beta=1.4, gamma=0.5, T=5)
            base = composite_loss(fwd, labels, base_w, epoch)
            for name, term in (("lam", base.con), ("beta", base.con_roi),
                               ("gamma", base.ent)):
                toggled_w = LossWeights(**{**base_w.__dict__, name: 0.0})
                toggled = composite_loss(fwd, labels, toggled_w, epoch)
                removed = base.ramp * getattr(base_w, name) * term
                assert abs((base.total - toggled.total) - removed) <= 1e-9

    def test_terms_computed_even_when_coefficient_zero(self, rng):
        """A zero coefficient keeps the term observable (for logging)."""
        fwd = make_forward(rng)
        labels = np.array([0, 1])
        bd = composite_loss(fwd, labels, LossWeights(lam=0, beta=0, gamma=0), 3)
        assert bd.con > 0 and bd.con_roi > 0 and bd.ent > 0
        assert bd.total == pytest.approx(bd.cls + bd.cls_roi, rel=1e-12)

    def test_unlabeled_only_batch(self, rng):
        fwd = make_forward(rng, n_l=0)
        fwd.probs_masked = None
        bd = composite_loss(fwd, np.array([], dtype=np.int64), LossWeights(), 2)
        assert bd.cls == 0.0 and bd.cls_roi == 0.0
        assert bd.total == pytest.approx(
            bd.ramp * (bd.con + bd.con_roi + bd.ent), rel=1e-12
        )

    def test_missing_teacher_rejected_when_needed(self, rng):
        fwd = make_forward(rng)
        fwd.teacher_probs_full = None
        with pytest.raises(ValueError, match="teacher"):
            composite_loss(fwd, np.array([0, 1]), LossWeights(lam=1.0), 0)

    def test_missing_teacher_allowed_when_coefficient_zero(self, rng):
        fwd = make_forward(rng)
        fwd.teacher_probs_full = None
        fwd.teacher_features_masked = None
        bd = composite_loss(fwd, np.array([0, 1]), LossWeights(lam=0, beta=0), 0)
        assert bd.con == 0.0 and bd.con_roi == 0.0

    def test_missing_masked_pass_rejected(self, rng):
        fwd = make_forward(rng)
        fwd.probs_masked = None
        with pytest.raises(ValueError, match="masked"):
            composite_loss(fwd, np.array([0, 1]), LossWeights(), 0)

    def test_label_count_mismatch_rejected(self, rng):
        fwd = make_forward(rng, n_l=2)
        with pytest.raises(ValueError):
            composite_loss(fwd, np.array([0, 1, 2]), LossWeights(), 0)

    def test_empty_batch_rejected(self):
        fwd = BatchForward(
            probs_full=np.zeros((0, 3)), features_full=np.zeros((0, 4)), n_labeled=0
        )
        with pytest.raises(ValueError, match="empty"):
            composite_loss(fwd, np.array([], dtype=np.int64), LossWeights(), 0)


# ---------------------------------------------------------------------------
# gradients w.r.t. logits and features (finite differences on the softmax)
# ---------------------------------------------------------------------------

def loss_from_logits(z_full, z_masked, feat, fwd_template, labels, weights, epoch):
    fwd = BatchForward(
        probs_full=softmax(z_full),
        features_full=feat,
        n_labeled=fwd_template.n_labeled,
        probs_masked=None if z_masked is None else softmax(z_masked),
        teacher_probs_full=fwd_template.teacher_probs_full,
        teacher_features_masked=fwd_template.teacher_features_masked,
    )
    return composite_loss(fwd, labels, weights, epoch).total


class TestCompositeGradients:
    def test_logit_and_feature_gradients_match_finite_differences(self, rng):
        b, n_l, f = 5, 2, 4
        z_full = rng.standard_normal((b, 3))
        z_masked = rng.standard_normal((n_l, 3))
        feat = rng.standard_normal((b, f))
        template = make_forward(rng, b=b, n_l=n_l, f=f)
        labels = rng.integers(0, 3, size=n_l)
        weights = LossWeights(lam=0.8, beta=1.2, gamma=0.6, T=5)
        epoch = 2.5

        fwd = BatchForward(
            probs_full=softmax(z_full),
            features_full=feat,
            n_labeled=n_l,
            probs_masked=softmax(z_masked),
            teacher_probs_full=template.teacher_probs_full,
            teacher_features_masked=template.teacher_features_masked,
        )
        _, d_full, d_feat, d_masked = composite_loss_and_grads(
            fwd, labels, weights, epoch
        )

        h = 1e-6

        def fd(arr, grad):
            worst = 0.0
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                orig = arr[i]
                arr[i] = orig + h
                lp = loss_from_logits(z_full, z_masked, feat, template, labels, weights, epoch)
                arr[i] = orig - h
                lm = loss_from_logits(z_full, z_masked, feat, template, labels, weights, epoch)
                arr[i] = orig
                est = (lp - lm) / (2 * h)
                worst = max(worst, abs(est - grad[i]) / max(abs(est), abs(grad[i]), 1e-8))
            return worst

        assert fd(z_full, d_full) < 1e-5
        assert fd(z_masked, d_masked) < 1e-5
        assert fd(feat, d_feat) < 1e-5

    def test_gradients_preserve_dtype(self, rng):
        fwd = make_forward(rng, dtype=np.float32)
        labels = np.array([0, 1])
        _, d_full, d_feat, d_masked = composite_loss_and_grads(
            fwd, labels, LossWeights(), 1.0
        )
        assert d_full.dtype == np.float32
        assert d_feat.dtype == np.float32
        assert d_masked.dtype == np.float32

    def test_gradient_arrays_absent_without_their_pass(self, rng):
        fwd = make_forward(rng, n_l=0)
        fwd.probs_masked = None
        fwd.teacher_features_masked = None
        _, d_full, d_feat, d_masked = composite_loss_and_grads(
            fwd, np.array([], dtype=np.int64), LossWeights(beta=0.0), 1.0
        )
        assert d_masked is None
        assert d_feat is None
        assert d_full is not None
