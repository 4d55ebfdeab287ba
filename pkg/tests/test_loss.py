import math

import numpy as np
import pytest
import torch

from edgecollab.loss import (
    LossConfig,
    balanced_bce,
    total_loss_nonrecurrent,
    total_loss_recurrent,
)
from edgecollab.models.common import SideOutputs


def _cfg(lam=1.0, convention="paper"):
    return LossConfig(lam=lam, alpha_convention=convention)


def hard_label_balanced_bce(e, y, lam):
    """Independent oracle: plain balanced BCE with hard labels (eta == 0)."""
    e = np.clip(np.asarray(e, dtype=np.float64), 1e-6, 1 - 1e-6)
    y = np.asarray(y, dtype=np.float64)
    pos = y.sum()
    neg = (1 - y).sum()
    alpha = lam * pos / (pos + neg)
    beta = neg / (pos + neg)
    return -alpha * (y * np.log(e)).sum() - beta * ((1 - y) * np.log(1 - e)).sum()


class TestBalancedBce:
    def test_two_pixel_hand_value(self):
        # Y=[1,0], Ytilde=[1,0], E=[0.5,0.5], lam=1:
        # pos=1, neg=1, alpha=beta=0.5 -> loss = -log(0.5) = log 2
        e = torch.tensor([0.5, 0.5], dtype=torch.float64)
        y = torch.tensor([1.0, 0.0], dtype=torch.float64)
        loss = balanced_bce(e, y, y, _cfg(lam=1.0))
        assert float(loss) == pytest.approx(math.log(2.0), abs=1e-9)

    def test_two_pixel_hand_value_with_lambda(self):
        # same map, lam=1.1: 0.55*log2 + 0.5*log2
        e = torch.tensor([0.5, 0.5], dtype=torch.float64)
        y = torch.tensor([1.0, 0.0], dtype=torch.float64)
        loss = balanced_bce(e, y, y, _cfg(lam=1.1))
        expected = 0.5 * 1.1 * math.log(2.0) + 0.5 * math.log(2.0)
        assert float(loss) == pytest.approx(expected, abs=1e-9)
        assert float(loss) == pytest.approx(0.727805, abs=5e-6)

    def test_perfect_prediction_is_near_minimum(self):
        rng = np.random.default_rng(0)
        y = (rng.random((8, 8)) < 0.4).astype(np.float64)
        e = torch.tensor(y, dtype=torch.float64)
        loss = float(balanced_bce(e, y, y, _cfg()))
        assert 0.0 <= loss < 1e-3

    def test_strictly_decreases_toward_target_on_one_pixel(self):
        y = np.zeros((4, 4))
        y[1, 1] = 1.0
        base = np.full((4, 4), 0.5)
        losses = []
        for p in (0.5, 0.7, 0.9, 0.99):
            e = base.copy()
            e[1, 1] = p
            losses.append(float(balanced_bce(torch.tensor(e), y, y, _cfg())))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_degenerate_target_warns_and_returns_zero(self):
        # positives where y_soft says negative and vice versa: pos = neg = 0
        y_hard = np.array([[1.0, 0.0]])
        y_soft = np.array([[0.0, 1.0]])
        e = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
        with pytest.warns(UserWarning):
            loss = balanced_bce(e, y_soft, y_hard, _cfg())
        assert float(loss) == 0.0

    def test_eta_zero_reduces_to_hard_label_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            y = (rng.random((12, 12)) < 0.3).astype(np.float64)
            e = rng.uniform(0.05, 0.95, size=(12, 12))
            ours = float(balanced_bce(torch.tensor(e), y, y, _cfg(lam=1.1)))
            oracle = hard_label_balanced_bce(e, y, 1.1)
            assert ours == pytest.approx(oracle, rel=1e-12)

    def test_soft_targets_change_the_weights(self):
        # pos mass = sum(y*y_soft): soft target shrinks the positive count
        y_hard = np.array([[1.0, 0.0]])
        y_soft = np.array([[0.5, 0.0]])
        e = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
        loss = float(balanced_bce(e, y_soft, y_hard, _cfg(lam=1.0)))
        # pos=0.5, neg=1.0, alpha=1/3, beta=2/3; per-pixel log terms all log 2:
        # alpha*0.5 (soft positive) + beta*(0.5 + 1.0) (soft negatives)
        expected = (1 / 3) * 0.5 * math.log(2) + (2 / 3) * 1.5 * math.log(2)
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_hed_convention_swaps_class_weights(self):
        y = np.zeros((10, 10))
        y[0, :] = 1.0  # 10 positives, 90 negatives
        e = torch.full((10, 10), 0.5, dtype=torch.float64)
        paper = float(balanced_bce(e, y, y, _cfg(lam=1.0, convention="paper")))
        hed = float(balanced_bce(e, y, y, _cfg(lam=1.0, convention="hed")))
        # paper: alpha=0.1 on 10 positives, beta=0.9 on 90 negatives
        assert paper == pytest.approx((0.1 * 10 + 0.9 * 90) * math.log(2), rel=1e-12)
        # hed: alpha=0.9 on 10 positives, beta=0.1 on 90 negatives
        assert hed == pytest.approx((0.9 * 10 + 0.1 * 90) * math.log(2), rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        cfg = _cfg(lam=1.1)
        for _ in range(20):
            y_hard = (rng.random((8, 8)) < 0.35).astype(np.float64)
            y_soft = np.clip(
                y_hard + rng.normal(0, 0.1, size=(8, 8)), 0.0, 1.0
            )
            e0 = rng.uniform(0.05, 0.95, size=(8, 8))

            e = torch.tensor(e0, requires_grad=True)
            balanced_bce(e, y_soft, y_hard, cfg).backward()
            autograd = e.grad.numpy()

            # independent closed form: -alpha*ys/e + beta*(1-ys)/(1-e)
            pos = (y_hard * y_soft).sum()
            neg = ((1 - y_hard) * (1 - y_soft)).sum()
            alpha = cfg.lam * pos / (pos + neg)
            beta = neg / (pos + neg)
            closed = -alpha * y_soft / e0 + beta * (1 - y_soft) / (1 - e0)

            h = 1e-6
            idx = rng.integers(0, 8, size=(6, 2))
            for r, c in idx:
                ep = e0.copy()
                em = e0.copy()
                ep[r, c] += h
                em[r, c] -= h
                fd = (
                    float(balanced_bce(torch.tensor(ep), y_soft, y_hard, cfg))
                    - float(balanced_bce(torch.tensor(em), y_soft, y_hard, cfg))
                ) / (2 * h)
                scale = max(abs(fd), 1e-8)
                assert abs(autograd[r, c] - fd) / scale < 1e-4
                assert abs(closed[r, c] - fd) / scale < 1e-4


def _fake_outputs(n_sides, shape, rng):
    logits = [
        torch.tensor(rng.normal(0, 2, size=shape), dtype=torch.float64)
        for _ in range(2 * n_sides)
    ]
    fused_logit = torch.tensor(rng.normal(0, 2, size=shape), dtype=torch.float64)
    return SideOutputs(
        f2c=logits[:n_sides],
        c2f=logits[n_sides:],
        fused=torch.sigmoid(fused_logit),
        fused_logit=fused_logit,
    )


class TestTotalLosses:
    @pytest.mark.parametrize(
        "n_sides,loss_fn",
        [(5, total_loss_recurrent), (4, total_loss_nonrecurrent)],
    )
    def test_matches_sum_of_independent_terms(self, n_sides, loss_fn):
        rng = np.random.default_rng(n_sides)
        out = _fake_outputs(n_sides, (6, 6), rng)
        y = (rng.random((6, 6)) < 0.4).astype(np.float64)
        cfg = _cfg(lam=1.1)
        total = float(loss_fn(out, y, y, cfg))
        terms = [float(balanced_bce(out.fused, y, y, cfg))]
        for logit in out.f2c + out.c2f:
            terms.append(float(balanced_bce(torch.sigmoid(logit), y, y, cfg)))
        assert len(terms) == 2 * n_sides + 1
        assert total == pytest.approx(sum(terms), abs=1e-9)

    def test_term_count_is_visible_in_loss_scale(self):
        # identical maps in every slot: total = (2T+1) * single term
        rng = np.random.default_rng(3)
        shape = (5, 5)
        logit = torch.tensor(rng.normal(0, 1, size=shape), dtype=torch.float64)
        out = SideOutputs(
            f2c=[logit] * 5,
            c2f=[logit] * 5,
            fused=torch.sigmoid(logit),
            fused_logit=logit,
        )
        y = (rng.random(shape) < 0.4).astype(np.float64)
        cfg = _cfg()
        single = float(balanced_bce(torch.sigmoid(logit), y, y, cfg))
        total = float(total_loss_recurrent(out, y, y, cfg))
        assert total == pytest.approx(11 * single, rel=1e-12)

    def test_saturated_prediction_near_minimal(self):
        shape = (6, 6)
        big = torch.full(shape, 40.0, dtype=torch.float64)
        out = SideOutputs(
            f2c=[big] * 5, c2f=[big] * 5, fused=torch.sigmoid(big), fused_logit=big
        )
        y = np.ones(shape)
        loss = float(total_loss_recurrent(out, y, y, _cfg()))
        assert 0.0 <= loss < 1e-2
