import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from cached_det.losses import (LossConfig, combined_loss, focal_loss, focal_loss_with_logits,
                               smooth_l1)
from oracles import fd_probes

CE = LossConfig(gamma=0.0)


def one_hot_probs(pt_values, n_classes=19, label=3):
    """Rows whose true-class probability is ``pt``; the rest is spread evenly."""
    rows = []
    for pt in pt_values:
        row = torch.full((n_classes,), (1 - pt) / (n_classes - 1), dtype=torch.float64)
        row[label] = pt
        rows.append(row)
    return torch.stack(rows), torch.full((len(pt_values),), label, dtype=torch.long)


class TestFocal:
    def test_perfect_prediction(self):
        probs, labels = one_hot_probs([1.0])
        assert focal_loss(probs, labels).item() == 0.0

    def test_cross_entropy_reduction(self):
        probs, labels = one_hot_probs([0.5])
        assert focal_loss(probs, labels, CE).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_gamma_two(self):
        probs, labels = one_hot_probs([0.9])
        expected = 0.01 * -math.log(0.9)
        assert focal_loss(probs, labels).item() == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(1.05361e-3, rel=1e-5)

    def test_log_base(self):
        probs, labels = one_hot_probs([0.25])
        v = focal_loss(probs, labels, LossConfig(gamma=0.0, log_base=2.0)).item()
        assert v == pytest.approx(2.0, abs=1e-12)

    def test_zero_probability_is_finite(self):
        probs, labels = one_hot_probs([0.0])
        v = focal_loss(probs, labels).item()
        assert math.isfinite(v)
        assert v == pytest.approx((1 - 1e-12) ** 2 * math.log(1e12))

    def test_equals_cross_entropy_random(self):
        g = torch.Generator().manual_seed(3)
        for _ in range(10):
            logits = torch.randn(64, 19, generator=g, dtype=torch.float64) * 3
            labels = torch.randint(0, 19, (64,), generator=g)
            ce = F.cross_entropy(logits, labels)
            assert abs(focal_loss_with_logits(logits, labels, CE).item() - ce.item()) < 1e-12
            assert abs(focal_loss(torch.softmax(logits, 1), labels, CE).item() - ce.item()) < 1e-12

    @given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0), st.floats(0.0, 5.0))
    def test_monotone_in_pt(self, a, b, gamma):
        lo, hi = sorted((a, b))
        probs, labels = one_hot_probs([lo, hi])
        cfg = LossConfig(gamma=gamma)
        l_lo = focal_loss(probs[:1], labels[:1], cfg).item()
        l_hi = focal_loss(probs[1:], labels[1:], cfg).item()
        assert l_hi <= l_lo + 1e-15

    def test_class_weights(self):
        logits = torch.randn(6, 19, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 3, 0, 5])
        w = tuple(float(i + 1) for i in range(18))
        weighted = focal_loss_with_logits(logits, labels, LossConfig(class_weights=w))
        per_row = torch.stack([focal_loss_with_logits(logits[i:i + 1], labels[i:i + 1])
                               for i in range(6)])
        scale = torch.tensor([1.0, 1, 2, 3, 1, 5], dtype=torch.float64)
        assert weighted.item() == pytest.approx((per_row * scale).mean().item(), rel=1e-12)

    @pytest.mark.parametrize("kwargs", [dict(gamma=-1), dict(loc_weight=0), dict(log_base=1.0),
                                        dict(beta=0)])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            LossConfig(**kwargs)


class TestSmoothL1:
    def test_zero(self):
        x = torch.randn(5, 4)
        assert smooth_l1(x, x).item() == 0.0

    def test_breakpoint(self):
        assert smooth_l1(torch.tensor([[1.0, 0, 0, 0]]), torch.zeros(1, 4)).item() == 0.5

    def test_linear_branch(self):
        assert smooth_l1(torch.tensor([[3.0, 0, 0, 0]]), torch.zeros(1, 4)).item() == 2.5

    def test_quadratic_branch_with_beta(self):
        v = smooth_l1(torch.tensor([[0.5, 0, 0, 0]]), torch.zeros(1, 4), beta=2.0).item()
        assert v == pytest.approx(0.5 * 0.25 / 2.0)

    def test_empty(self):
        pred = torch.zeros(0, 4, requires_grad=True)
        v = smooth_l1(pred, torch.zeros(0, 4))
        assert v.item() == 0.0
        v.backward()

    def test_mean_over_rows(self):
        pred = torch.tensor([[3.0, 0, 0, 0], [0, 0, 0, 0]])
        assert smooth_l1(pred, torch.zeros(2, 4)).item() == 1.25


class TestCombined:
    def test_all_background(self):
        logits = torch.randn(8, 19, dtype=torch.float64)
        reg = torch.randn(8, 72, dtype=torch.float64, requires_grad=True)
        labels = torch.zeros(8, dtype=torch.long)
        total, parts = combined_loss(logits, reg, labels, torch.randn(8, 4, dtype=torch.float64))
        assert parts["loc"].item() == 0.0
        assert total.item() == parts["cls"].item()
        total.backward()
        assert torch.count_nonzero(reg.grad) == 0

    def test_background_rows_get_no_regression_gradient(self):
        reg = torch.randn(4, 72, dtype=torch.float64, requires_grad=True)
        labels = torch.tensor([0, 7, 0, 18])
        total, _ = combined_loss(torch.randn(4, 19, dtype=torch.float64), reg, labels,
                                 torch.randn(4, 4, dtype=torch.float64))
        total.backward()
        assert torch.count_nonzero(reg.grad[[0, 2]]) == 0
        nz = torch.nonzero(reg.grad[1]).squeeze(1).tolist()
        assert nz == [24, 25, 26, 27]  # class 7 -> columns 24..27
        assert torch.nonzero(reg.grad[3]).squeeze(1).tolist() == [68, 69, 70, 71]

    def test_lambda_scales_localization(self):
        logits = torch.randn(3, 19, dtype=torch.float64)
        reg = torch.randn(3, 72, dtype=torch.float64)
        labels = torch.tensor([2, 0, 5])
        tgt = torch.randn(3, 4, dtype=torch.float64)
        t1, p1 = combined_loss(logits, reg, labels, tgt, LossConfig(loc_weight=1.0))
        t3, p3 = combined_loss(logits, reg, labels, tgt, LossConfig(loc_weight=3.0))
        assert (t3 - t1).item() == pytest.approx(2 * p1["loc"].item(), rel=1e-12)

    def test_hand_computed_three_rois(self):
        # three RoIs, 2 foreground classes plus background, gamma=2
        logits = torch.tensor([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 3.0]], dtype=torch.float64)
        labels = torch.tensor([0, 1, 2])
        reg = torch.zeros(3, 8, dtype=torch.float64)
        reg[1, 0:4] = torch.tensor([0.5, 0.0, 2.0, 0.0], dtype=torch.float64)
        reg[2, 4:8] = torch.tensor([0.0, -0.2, 0.0, 0.0], dtype=torch.float64)
        tgt = torch.zeros(3, 4, dtype=torch.float64)

        def pt(row, k):
            e = [math.exp(v) for v in row]
            return e[k] / sum(e)

        cls = 0.0
        for row, k in (([2, 0, 0], 0), ([0, 1, 0], 1), ([0, 0, 3], 2)):
            p = pt(row, k)
            cls += -(1 - p) ** 2 * math.log(p)
        cls /= 3
        # row 1: 0.5*0.25 + (2 - 0.5); row 2: 0.5*0.04
        loc = ((0.125 + 1.5) + 0.02) / 2
        total, parts = combined_loss(logits, reg, labels, tgt)
        assert parts["cls"].item() == pytest.approx(cls, abs=1e-10)
        assert parts["loc"].item() == pytest.approx(loc, abs=1e-10)
        assert total.item() == pytest.approx(cls + loc, abs=1e-10)

    def test_class_agnostic_regression(self):
        reg = torch.randn(3, 4, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2])
        tgt = torch.randn(3, 4, dtype=torch.float64)
        _, parts = combined_loss(torch.randn(3, 19, dtype=torch.float64), reg, labels, tgt)
        assert parts["loc"].item() == pytest.approx(smooth_l1(reg[1:], tgt[1:]).item())


class TestGradients:
    def test_focal(self):
        logits = torch.randn(16, 19, dtype=torch.float64, requires_grad=True)
        labels = torch.randint(0, 19, (16,))
        assert fd_probes(lambda: focal_loss(torch.softmax(logits, 1), labels), [logits]) < 1e-4
        assert fd_probes(lambda: focal_loss_with_logits(logits, labels, LossConfig(gamma=1.5)),
                         [logits], seed=1) < 1e-4

    def test_smooth_l1(self):
        pred = (torch.randn(12, 4, dtype=torch.float64) * 2).requires_grad_()
        tgt = torch.randn(12, 4, dtype=torch.float64)
        assert fd_probes(lambda: smooth_l1(pred, tgt, beta=0.7), [pred]) < 1e-4

    def test_combined(self):
        logits = torch.randn(10, 19, dtype=torch.float64, requires_grad=True)
        reg = torch.randn(10, 72, dtype=torch.float64, requires_grad=True)
        labels = torch.tensor([0, 3, 0, 18, 1, 0, 5, 5, 0, 2])
        tgt = torch.randn(10, 4, dtype=torch.float64)
        fn = lambda: combined_loss(logits, reg, labels, tgt)[0]  # noqa: E731
        assert fd_probes(fn, [logits, reg], n_probes=40) < 1e-4
