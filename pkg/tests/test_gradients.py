import numpy as np
import pytest

from mgll.errors import NonFiniteLoss, ShapeMismatch
from mgll.fixtures import random_batch
from mgll.gradients import (
    cosine_backward,
    finite_difference_check,
    loss_grad,
    pointwise_grad_logits,
    smooth_kl_logit_grad,
)
from mgll.losses import AlignmentBatch, LevelData, LossConfig
from mgll.numerics import sigmoid


class TestPointwiseGradLogits:
    def test_zero_logit_match(self):
        g = pointwise_grad_logits(np.zeros((1, 1)), np.ones((1, 1)))
        assert g[0, 0] == -0.5

    def test_zero_logit_mismatch(self):
        g = pointwise_grad_logits(np.zeros((1, 1)), np.zeros((1, 1)))
        assert g[0, 0] == 0.5

    def test_saturated_match(self):
        g = pointwise_grad_logits(np.full((1, 1), 20.0), np.ones((1, 1)))
        assert g[0, 0] == pytest.approx(-2.061e-9, rel=1e-3)

    def test_closed_form_on_grid(self):
        # (sigmoid(x) - y) recovered exactly after undoing the 1/N scaling
        x = np.linspace(-20.0, 20.0, 1000).reshape(50, 20)
        y = (np.arange(1000).reshape(50, 20) % 2).astype(float)
        g = pointwise_grad_logits(x, y) * x.shape[0]
        assert np.max(np.abs(g - (sigmoid(x) - y))) < 1e-14

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            pointwise_grad_logits(np.zeros((2, 3)), np.zeros((3, 2)))


class TestCosineBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 5))
        b = rng.standard_normal((4, 5))
        d_sim = rng.standard_normal((3, 4))
        d_a, d_b = cosine_backward(a, b, d_sim)

        def f(a_, b_):
            na = np.linalg.norm(a_, axis=1, keepdims=True)
            nb = np.linalg.norm(b_, axis=1, keepdims=True)
            return float(((a_ / na) @ (b_ / nb).T * d_sim).sum())

        h = 1e-7
        for i in range(3):
            for j in range(5):
                ap, am = a.copy(), a.copy()
                ap[i, j] += h
                am[i, j] -= h
                fd = (f(ap, b) - f(am, b)) / (2 * h)
                assert d_a[i, j] == pytest.approx(fd, abs=1e-6)
        for i in range(4):
            for j in range(5):
                bp, bm = b.copy(), b.copy()
                bp[i, j] += h
                bm[i, j] -= h
                fd = (f(a, bp) - f(a, bm)) / (2 * h)
                assert d_b[i, j] == pytest.approx(fd, abs=1e-6)


class TestLossGrad:
    def test_stationary_single_pair_soft_clip(self):
        level = LevelData(
            texts=np.array([[1.0, 0.0]]),
            label_rows=[np.array([0])],
            weights=[np.array([1.0])],
        )
        batch = AlignmentBatch(np.array([[0.6, 0.8]]), [level])
        res = loss_grad(batch, LossConfig(tau=1.0), "soft_clip")
        np.testing.assert_array_equal(res.grad_images, 0.0)
        np.testing.assert_array_equal(res.grad_texts_per_level[0], 0.0)

    def test_exact_smooth_kl_zero_on_identical_levels(self):
        base = random_batch(1, n_samples=5, dim=8, texts_per_level=(6,))
        twin = LevelData(
            texts=base.levels[0].texts,
            label_rows=base.levels[0].label_rows,
            weights=base.levels[0].weights,
        )
        batch = AlignmentBatch(base.images, [base.levels[0], twin])
        res = loss_grad(batch, LossConfig(kl_grad_mode="exact"), "smooth_kl")
        np.testing.assert_array_equal(res.grad_images, 0.0)
        for g in res.grad_texts_per_level:
            np.testing.assert_array_equal(g, 0.0)

    def test_unreferenced_text_rows_get_zero_grad(self):
        rng = np.random.default_rng(2)
        texts = rng.standard_normal((6, 8))
        # only rows 0..3 are ever assigned
        label_rows = [np.array([i]) for i in range(4)]
        weights = [np.array([1.0]) for _ in range(4)]
        level = LevelData(texts=texts, label_rows=label_rows, weights=weights)
        images = rng.standard_normal((4, 8))
        batch = AlignmentBatch(images, [level])
        cfg = LossConfig(tau=0.5)
        for which in ("clip", "soft_clip", "smooth_kl"):
            if which == "smooth_kl":
                twin = LevelData(texts=texts, label_rows=label_rows, weights=weights)
                b = AlignmentBatch(images, [level, twin])
            else:
                b = batch
            res = loss_grad(b, cfg, which)
            np.testing.assert_array_equal(res.grad_texts_per_level[0][4:], 0.0)

    def test_unknown_selector(self):
        batch = random_batch(3, n_samples=3, dim=6, texts_per_level=(4,))
        with pytest.raises(ValueError):
            loss_grad(batch, LossConfig(), "nope")


class TestFiniteDifferenceCheck:
    @pytest.mark.parametrize("which", ["clip", "soft_clip", "pointwise", "smooth_kl", "mgll"])
    def test_agreement_at_default_temperature(self, which):
        cfg = LossConfig(tau=0.07)
        for seed in (0, 1, 2):
            batch = random_batch(seed, n_samples=6, dim=12,
                                 texts_per_level=(5, 6), max_labels=2)
            report = finite_difference_check(batch, cfg, which, probes=32, seed=seed)
            assert report.max_rel_error < 1e-5

    def test_pointwise_high_precision(self):
        cfg = LossConfig(tau=0.07)
        batch = random_batch(5, n_samples=6, dim=10, texts_per_level=(5, 5))
        report = finite_difference_check(
            batch, cfg, "pointwise", step=1e-8, probes=24, seed=7,
            precision="mpmath",
        )
        assert report.max_rel_error < 1e-9

    def test_approximate_kl_mode_fails_check(self):
        exact = LossConfig(tau=0.07, kl_grad_mode="exact")
        approx = LossConfig(tau=0.07, kl_grad_mode="approximate")
        batch = random_batch(6, n_samples=6, dim=10, texts_per_level=(5, 5, 5))
        good = finite_difference_check(batch, exact, "smooth_kl", probes=48, seed=9)
        bad = finite_difference_check(batch, approx, "smooth_kl", probes=48, seed=9)
        assert good.max_rel_error < 1e-5
        assert bad.max_rel_error > 1e-3

    def test_step_validation(self):
        batch = random_batch(7, n_samples=3, dim=6, texts_per_level=(4,))
        with pytest.raises(ValueError):
            finite_difference_check(batch, LossConfig(), "pointwise", step=1e-2)

    def test_non_finite_loss_detected(self):
        batch = random_batch(8, n_samples=3, dim=6, texts_per_level=(4,))
        batch.images[0, 0] = np.inf
        with pytest.raises(NonFiniteLoss):
            finite_difference_check(batch, LossConfig(), "pointwise")


class TestSmoothKlLogitGrad:
    def test_gradient_orthogonal_to_logit_shifts(self):
        # adding a constant to all logits of one level leaves softmax outputs
        # unchanged, so the exact gradient must have zero sum per row
        rng = np.random.default_rng(10)
        logits = [rng.standard_normal((4, 7)) for _ in range(3)]
        _, grads = smooth_kl_logit_grad(logits, mode="exact")
        for g in grads:
            np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-10)

    def test_approximate_mode_not_stationary_at_consensus(self):
        p = np.log(np.array([[0.2, 0.3, 0.5]]))
        _, grads = smooth_kl_logit_grad([p, p.copy()], mode="approximate")
        assert np.max(np.abs(grads[0])) > 1e-3
        _, exact = smooth_kl_logit_grad([p, p.copy()], mode="exact")
        np.testing.assert_allclose(exact[0], 0.0, atol=1e-15)
