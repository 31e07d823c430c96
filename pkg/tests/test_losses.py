import math

import numpy as np
import pytest
import torch

from triseg.errors import ConfigurationError, InputError
from triseg.losses import (
    MetricAccumulator,
    bce_loss,
    dice_loss,
    fb_iou,
    iou,
    miou,
    total_loss,
)


def _oracle_bce(logits, target):
    total = 0.0
    h, w = logits.shape
    for y in range(h):
        for x in range(w):
            p = 1.0 / (1.0 + math.exp(-float(logits[y, x])))
            t = float(target[y, x])
            total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
    return total / (h * w)


class TestBceLoss:
    def test_zero_logits_give_log_two(self):
        logits = torch.zeros(5, 5, dtype=torch.float64)
        for target in (torch.zeros(5, 5), torch.ones(5, 5), torch.eye(5)):
            loss = bce_loss(logits, target)
            assert math.isclose(float(loss), math.log(2.0), rel_tol=1e-12)

    def test_saturated_logits_vanish(self):
        target = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        logits = torch.where(target > 0, 50.0, -50.0).to(torch.float64)
        assert float(bce_loss(logits, target)) < 1e-20

    def test_matches_per_pixel_oracle(self, rng):
        for _ in range(50):
            logits = torch.tensor(rng.standard_normal((3, 3)) * 3)
            target = torch.tensor((rng.random((3, 3)) < 0.5).astype(np.float64))
            assert math.isclose(
                float(bce_loss(logits, target)), _oracle_bce(logits, target), rel_tol=1e-12
            )

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        logits = torch.randn(4, 4, dtype=torch.float64, requires_grad=True)
        target = (torch.rand(4, 4) < 0.5).to(torch.float64)
        bce_loss(logits, target).backward()
        h = 1e-6
        fd = torch.zeros_like(logits)
        for i in range(4):
            for j in range(4):
                up = logits.detach().clone()
                up[i, j] += h
                down = logits.detach().clone()
                down[i, j] -= h
                fd[i, j] = (float(bce_loss(up, target)) - float(bce_loss(down, target))) / (2 * h)
        assert (logits.grad - fd).norm() / fd.norm() < 1e-4


class TestDiceLoss:
    def test_perfect_overlap_goes_to_zero(self):
        target = torch.zeros(8, 8, dtype=torch.float64)
        target[2:6, 2:6] = 1.0
        logits = torch.where(target > 0, 50.0, -50.0).to(torch.float64)
        assert float(dice_loss(logits, target)) < 1e-12

    def test_disjoint_large_areas_approach_one(self):
        target = torch.zeros(20, 20, dtype=torch.float64)
        target[:10] = 1.0
        logits = torch.full((20, 20), -50.0, dtype=torch.float64)
        logits[10:] = 50.0  # predicted mask disjoint from target, equal area
        assert float(dice_loss(logits, target)) > 0.99

    def test_half_overlap_with_smoothing(self):
        # |p ∩ y| = 2, |p| = |y| = 4: coefficient (4+1)/(8+1), loss 4/9
        target = torch.zeros(4, 4, dtype=torch.float64)
        target[0, :4] = 1.0
        logits = torch.full((4, 4), -500.0, dtype=torch.float64)
        logits[0, 2:] = 500.0
        logits[1, :2] = 500.0
        loss = float(dice_loss(logits, target))
        assert math.isclose(loss, 1.0 - 5.0 / 9.0, rel_tol=1e-9)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(1)
        logits = torch.randn(4, 4, dtype=torch.float64, requires_grad=True)
        target = (torch.rand(4, 4) < 0.5).to(torch.float64)
        dice_loss(logits, target).backward()
        h = 1e-6
        fd = torch.zeros_like(logits)
        for i in range(4):
            for j in range(4):
                up = logits.detach().clone()
                up[i, j] += h
                down = logits.detach().clone()
                down[i, j] -= h
                fd[i, j] = (float(dice_loss(up, target)) - float(dice_loss(down, target))) / (2 * h)
        assert (logits.grad - fd).norm() / fd.norm() < 1e-4


class TestTotalLoss:
    def test_reference_combination(self):
        assert math.isclose(total_loss(1.0, 1.0, 1.0, lam=0.2), 1.8, rel_tol=1e-12)

    def test_lambda_zero_drops_contrastive(self, rng):
        x, y, z = rng.standard_normal(3)
        assert math.isclose(total_loss(x, y, z, lam=0.0), x + y, rel_tol=1e-12)

    def test_lambda_one_keeps_only_contrastive(self, rng):
        z = float(rng.standard_normal())
        assert math.isclose(total_loss(0.0, 0.0, z, lam=1.0), z, rel_tol=1e-12)

    def test_linearity_in_components(self, rng):
        lam = 0.3
        b, d, c = rng.standard_normal(3)
        base = total_loss(b, d, c, lam=lam)
        assert math.isclose(
            total_loss(2 * b, d, c, lam=lam) - base, (1 - lam) * b, rel_tol=1e-9
        )
        assert math.isclose(
            total_loss(b, d, 2 * c, lam=lam) - base, lam * c, rel_tol=1e-9
        )

    def test_lambda_range_checked(self):
        with pytest.raises(ConfigurationError):
            total_loss(1.0, 1.0, 1.0, lam=1.5)


def _oracle_counts(pred, target):
    inter = union = 0
    for y in range(pred.shape[0]):
        for x in range(pred.shape[1]):
            p, t = bool(pred[y, x]), bool(target[y, x])
            inter += p and t
            union += p or t
    return inter, union


class TestMetrics:
    def test_identical_masks(self, rng):
        m = rng.random((8, 8)) < 0.5
        assert iou(m, m) == 1.0
        assert fb_iou(m, m) == 1.0

    def test_disjoint_half_covers(self):
        pred = np.zeros((8, 8), dtype=bool)
        pred[:4] = True
        target = ~pred
        # foreground and background IoU are both 0 -> FB-IoU 0
        assert iou(pred, target) == 0.0
        assert fb_iou(pred, target) == 0.0

    def test_miou_mean(self):
        assert miou({1: 0.5, 2: 1.0}) == 0.75
        assert miou([0.5, 1.0]) == 0.75

    def test_both_empty_counts_as_one(self):
        empty = np.zeros((4, 4), dtype=bool)
        assert iou(empty, empty) == 1.0

    def test_matches_counting_oracle_thousand_pairs(self, rng):
        for _ in range(1000):
            pred = rng.random((16, 16)) < rng.uniform(0.0, 1.0)
            target = rng.random((16, 16)) < rng.uniform(0.0, 1.0)
            inter, union = _oracle_counts(pred, target)
            expected = inter / union if union else 1.0
            assert iou(pred, target) == expected
            bg_inter, bg_union = _oracle_counts(~pred, ~target)
            expected_bg = bg_inter / bg_union if bg_union else 1.0
            assert fb_iou(pred, target) == 0.5 * (expected + expected_bg)

    def test_fb_iou_between_fg_and_bg(self, rng):
        for _ in range(100):
            pred = rng.random((12, 12)) < 0.5
            target = rng.random((12, 12)) < 0.5
            fg = iou(pred, target)
            bg = iou(~pred, ~target)
            fb = fb_iou(pred, target)
            assert min(fg, bg) <= fb <= max(fg, bg)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            iou(np.zeros((2, 2), dtype=bool), np.zeros((3, 3), dtype=bool))

    def test_miou_empty_rejected(self):
        with pytest.raises(InputError):
            miou([])


class TestMetricAccumulator:
    def test_order_independent(self, rng):
        episodes = []
        for _ in range(30):
            cid = int(rng.integers(1, 4))
            episodes.append(
                (cid, rng.random((8, 8)) < 0.5, rng.random((8, 8)) < 0.5)
            )
        a = MetricAccumulator()
        for cid, p, t in episodes:
            a.add(cid, p, t)
        b = MetricAccumulator()
        for cid, p, t in reversed(episodes):
            b.add(cid, p, t)
        assert a.per_class_iou() == b.per_class_iou()
        assert a.miou() == b.miou()
        assert a.fb_iou() == b.fb_iou()

    def test_accumulates_intersections_and_unions(self, rng):
        acc = MetricAccumulator()
        inter = union = 0
        for _ in range(10):
            p = rng.random((8, 8)) < 0.5
            t = rng.random((8, 8)) < 0.5
            acc.add(1, p, t)
            i, u = _oracle_counts(p, t)
            inter += i
            union += u
        assert acc.per_class_iou()[1] == inter / union
