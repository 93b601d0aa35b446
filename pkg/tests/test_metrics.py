"""Metric hand cases and invariances."""

import numpy as np
import pytest

from frameprop.metrics import depth_errors, miou, pixel_accuracy


class TestMiou:
    def test_perfect_prediction(self):
        gt = np.array([[0, 1], [2, 0]])
        assert miou(gt, gt, 3) == 1.0

    def test_hand_case_seven_twelfths(self):
        gt = np.array([0, 0, 1, 1])
        pred = np.array([0, 1, 1, 1])
        # IoU(0) = 1/2, IoU(1) = 2/3
        assert abs(miou(pred, gt, 2) - 7 / 12) < 1e-12

    def test_constant_prediction_halves_single_iou(self):
        gt = np.array([0, 0, 0, 1])
        pred = np.zeros(4, dtype=int)
        # class 0: inter 3, union 4; class 1: 0
        expected = (3 / 4) / 2
        assert abs(miou(pred, gt, 2) - expected) < 1e-12
        assert miou(pred, gt, 2) < 1.0

    def test_absent_classes_excluded(self):
        gt = np.array([0, 0])
        pred = np.array([0, 0])
        assert miou(pred, gt, 5) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError, match="empty"):
            miou(np.zeros((0,)), np.zeros((0,)), 2)
        with pytest.raises(ValueError, match="range"):
            miou(np.array([3]), np.array([0]), 2)
        with pytest.raises(ValueError, match="mismatch"):
            miou(np.zeros(3), np.zeros(4), 2)

    def test_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            gt = rng.integers(0, 4, (6, 6))
            pred = rng.integers(0, 4, (6, 6))
            val = miou(pred, gt, 4)
            assert 0.0 <= val <= 1.0


class TestPixelAccuracy:
    def test_perfect(self):
        gt = np.array([[1, 2], [0, 1]])
        assert pixel_accuracy(gt, gt) == 1.0

    def test_fraction(self):
        assert pixel_accuracy(np.array([1, 1, 0, 0]), np.array([1, 0, 0, 0])) == 0.75


class TestDepthErrors:
    def test_perfect(self):
        gt = np.full((3, 3), 2.0)
        mask = np.ones((3, 3), dtype=bool)
        abs_err, rel_err = depth_errors(gt, gt, mask)
        assert abs_err == 0.0 and rel_err == 0.0

    def test_hand_case(self):
        gt = np.full((2, 2), 2.0)
        pred = np.full((2, 2), 3.0)
        abs_err, rel_err = depth_errors(pred, gt, np.ones((2, 2), dtype=bool))
        assert abs_err == 1.0
        assert rel_err == 0.5

    def test_empty_mask_errors(self):
        with pytest.raises(ValueError, match="empty"):
            depth_errors(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), dtype=bool))

    def test_nonpositive_gt_errors(self):
        with pytest.raises(ValueError, match="positive"):
            depth_errors(np.ones((2, 2)), np.zeros((2, 2)), np.ones((2, 2), dtype=bool))


class TestPermutationInvariance:
    def test_all_metrics_invariant(self):
        rng = np.random.default_rng(1)
        gt = rng.integers(0, 3, 36)
        pred = rng.integers(0, 3, 36)
        depth_gt = rng.random(36) + 1.0
        depth_pred = rng.random(36) + 1.0
        mask = np.ones(36, dtype=bool)
        perm = rng.permutation(36)
        assert miou(pred, gt, 3) == miou(pred[perm], gt[perm], 3)
        assert pixel_accuracy(pred, gt) == pixel_accuracy(pred[perm], gt[perm])
        base = depth_errors(depth_pred, depth_gt, mask)
        permuted = depth_errors(depth_pred[perm], depth_gt[perm], mask[perm])
        np.testing.assert_allclose(permuted, base, atol=1e-12)
