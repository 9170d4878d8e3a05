"""Distillation loss components, the confidence blend, and their gradients."""

import math

import numpy as np
import pytest

from picoseg.errors import DomainError, ShapeError
from picoseg.losses import (
    LambdaPolicy,
    balanced_bce,
    dice_loss,
    mse_logits,
    supervised_loss,
    teacher_confidence_lambda,
    total_loss,
)
from picoseg.tensor import Tensor, stable_sigmoid


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def fd_check(fn, s, n_probe=12, eps=1e-6, seed=0):
    """Max rel err of the analytic grad of fn (returning (loss, grad)) vs
    central differences at a sample of logit elements."""
    _, grad = fn(s)
    rng = np.random.default_rng(seed)
    flat = s.data.reshape(-1)
    gflat = grad.data.reshape(-1)
    idxs = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
    worst = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        lp = fn(s)[0]
        flat[i] = orig - eps
        lm = fn(s)[0]
        flat[i] = orig
        num = (lp - lm) / (2 * eps)
        worst = max(worst, abs(gflat[i] - num) / max(1e-12, abs(gflat[i]) + abs(num)))
    return worst


class TestMSE:
    def test_zero_at_match(self):
        s = T(np.linspace(-3, 3, 8).reshape(2, 4))
        loss, grad = mse_logits(s, s.copy())
        assert loss == 0.0
        assert np.all(grad.data == 0)

    def test_hand_value(self):
        loss, grad = mse_logits(T([[1.0, 2.0]]), T([[0.0, 0.0]]))
        assert loss == pytest.approx(2.5)
        assert np.allclose(grad.data, [[1.0, 2.0]])

    def test_rejects_nonfinite_teacher(self):
        with pytest.raises(DomainError):
            mse_logits(T([[0.0]]), T([[math.inf]]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_logits(T([[0.0]]), T([0.0]))


class TestBalancedBCE:
    def test_reduces_to_plain_bce_at_50_50(self):
        rng = np.random.default_rng(0)
        s = T(rng.standard_normal((1, 1, 4, 4)))
        g = np.zeros(16)
        g[:8] = 1
        g = T(rng.permutation(g).reshape(1, 1, 4, 4))
        loss, _ = balanced_bce(s, g)
        p = stable_sigmoid(s.data)
        plain = float(np.mean(-(g.data * np.log(p) + (1 - g.data) * np.log1p(-p))))
        assert loss == pytest.approx(plain, rel=1e-12)

    def test_perfect_prediction_approaches_zero(self):
        g = T(np.array([[1.0, 0.0, 1.0, 0.0]]))
        s = T(np.array([[40.0, -40.0, 40.0, -40.0]]))
        loss, _ = balanced_bce(s, g)
        assert loss < 1e-15

    def test_one_sided_mask_legal(self):
        s = T(np.zeros((2, 2)))
        loss, _ = balanced_bce(s, T(np.ones((2, 2))))
        # all-positive: w_pos = n/(2n) = 0.5, softplus(0) = log 2
        assert loss == pytest.approx(0.5 * math.log(2.0))

    def test_stable_at_extreme_logits(self):
        s = T(np.array([[1000.0, -1000.0]]))
        g = T(np.array([[0.0, 1.0]]))
        loss, grad = balanced_bce(s, g)
        assert np.isfinite(loss) and loss > 100
        assert np.all(np.isfinite(grad.data))

    def test_nonbinary_mask_rejected(self):
        with pytest.raises(DomainError):
            balanced_bce(T([[0.0]]), T([[0.5]]))


class TestDice:
    def test_perfect_overlap_near_zero(self):
        g = T(np.ones((1, 1, 8, 8)))
        s = T(np.full((1, 1, 8, 8), 40.0))
        loss, _ = dice_loss(s, g)
        assert loss == pytest.approx(0.0, abs=1e-6)

    def test_empty_gt_uncertain_prediction(self):
        # p = 0.5 everywhere, g = 0: loss -> 1 - eps/(n/2 + eps) with eps=1
        n = 16
        s = T(np.zeros((1, 1, 4, 4)))
        g = T(np.zeros((1, 1, 4, 4)))
        loss, _ = dice_loss(s, g)
        assert loss == pytest.approx(1.0 - 1.0 / (n / 2 + 1.0))

    def test_single_pixel_limit(self):
        # one pixel, p ~ 1, g = 1: loss = 1 - 3/3 = 0; with g = 0: 1 - 1/2
        s = T(np.full((1, 1), 80.0))
        assert dice_loss(s, T(np.ones((1, 1))))[0] == pytest.approx(0.0, abs=1e-9)
        assert dice_loss(s, T(np.zeros((1, 1))))[0] == pytest.approx(0.5, abs=1e-9)

    def test_grad_sign_pulls_toward_mask(self):
        rng = np.random.default_rng(1)
        s = T(rng.standard_normal((1, 1, 6, 6)))
        g = T((rng.random((1, 1, 6, 6)) > 0.5).astype(np.float64))
        _, grad = dice_loss(s, g)
        # raising a positive-pixel logit reduces the loss
        assert np.all(grad.data[g.data == 1] < 0)


class TestLambda:
    def test_endpoints(self):
        pol = LambdaPolicy(0.2, 0.8)
        sure = T(np.full((4, 4), 100.0))
        unsure = T(np.zeros((4, 4)))
        assert teacher_confidence_lambda(sure, pol) == pytest.approx(0.8)
        assert teacher_confidence_lambda(unsure, pol) == pytest.approx(0.2)

    def test_monotone_in_confidence(self):
        pol = LambdaPolicy(0.1, 0.9)
        lams = [teacher_confidence_lambda(T(np.full((3, 3), t)), pol)
                for t in (0.0, 0.5, 1.0, 2.0, 5.0)]
        assert all(a < b for a, b in zip(lams, lams[1:]))

    def test_always_within_policy_range(self):
        pol = LambdaPolicy(0.3, 0.7)
        rng = np.random.default_rng(2)
        for _ in range(1000):
            t = T(rng.standard_normal((2, 2)) * rng.uniform(0.1, 30))
            lam = teacher_confidence_lambda(t, pol)
            assert 0.3 <= lam <= 0.7

    def test_policy_validation(self):
        with pytest.raises(DomainError):
            LambdaPolicy(0.0, 0.5)
        with pytest.raises(DomainError):
            LambdaPolicy(0.6, 0.5)
        with pytest.raises(DomainError):
            LambdaPolicy(0.5, 1.0)
        LambdaPolicy(0.5, 0.5)


class TestTotalLoss:
    def test_pinned_lambda_blend_is_exact(self):
        # lambda_min == lambda_max makes the blend weight a constant; the
        # total must then equal the hand-computed combination bit for bit
        rng = np.random.default_rng(3)
        s = T(rng.standard_normal((1, 1, 4, 4)))
        t = T(rng.standard_normal((1, 1, 4, 4)))
        g = T((rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64))
        lam = 0.001
        loss, grad, lam_used = total_loss(s, t, g, LambdaPolicy(lam, lam))
        l_mse, g_mse = mse_logits(s, t)
        l_bce, g_bce = balanced_bce(s, g)
        l_dice, g_dice = dice_loss(s, g)
        assert lam_used == lam
        assert loss == lam * l_mse + (1 - lam) * (0.5 * l_bce + 0.5 * l_dice)
        expect = lam * g_mse.data + (1 - lam) * (0.5 * g_bce.data + 0.5 * g_dice.data)
        assert np.array_equal(grad.data, expect)

    def test_lambda_used_reported(self):
        rng = np.random.default_rng(4)
        s = T(rng.standard_normal((1, 1, 4, 4)))
        t = T(np.full((1, 1, 4, 4), 9.0))
        g = T(np.ones((1, 1, 4, 4)))
        _, _, lam = total_loss(s, t, g, LambdaPolicy(0.2, 0.8))
        assert lam == pytest.approx(0.2 + 0.6 * np.mean(np.abs(2 * stable_sigmoid(t.data) - 1)))

    def test_supervised_is_gt_only_endpoint(self):
        rng = np.random.default_rng(5)
        s = T(rng.standard_normal((1, 1, 4, 4)))
        g = T((rng.random((1, 1, 4, 4)) > 0.3).astype(np.float64))
        loss, grad = supervised_loss(s, g)
        l_bce, g_bce = balanced_bce(s, g)
        l_dice, g_dice = dice_loss(s, g)
        assert loss == 0.5 * l_bce + 0.5 * l_dice
        assert np.array_equal(grad.data, 0.5 * g_bce.data + 0.5 * g_dice.data)


class TestGradientsFD:
    @pytest.mark.parametrize("seed", range(5))
    def test_all_losses_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        shape = (1, 1, 5, 5)
        s = T(rng.standard_normal(shape))
        t = T(rng.standard_normal(shape) * 3)
        g = T((rng.random(shape) > 0.5).astype(np.float64))
        pol = LambdaPolicy(0.2, 0.8)

        cases = {
            "mse": lambda x: mse_logits(x, t),
            "bce": lambda x: balanced_bce(x, g),
            "dice": lambda x: dice_loss(x, g),
            "total": lambda x: total_loss(x, t, g, pol)[:2],
            "supervised": lambda x: supervised_loss(x, g),
        }
        for name, fn in cases.items():
            err = fd_check(fn, s, seed=seed)
            assert err < 1e-6, f"{name} seed {seed}: rel err {err:.3e}"
