"""Confusion matrix and mean IoU."""

import numpy as np
import pytest

from canseg.core.errors import ShapeError
from canseg.services.metrics import ConfusionMatrix, miou


class TestMIoU:
    """Per-class IoU from the accumulated confusion matrix."""

    def test_perfect_prediction(self, rng):
        gt = rng.integers(0, 4, size=(8, 8))
        report = miou(gt, gt, 4)
        assert report.mean == 1.0
        assert all(v in (1.0, None) for v in report.per_class)

    def test_complement(self):
        gt = np.array([[0, 1], [1, 0]])
        assert miou(1 - gt, gt, 2).mean == 0.0

    def test_hand_case(self):
        """Confusion [[6, 2], [1, 7]] gives IoUs 6/9 and 7/10."""
        gt = np.array([0] * 8 + [1] * 8).reshape(4, 4)
        pred = np.array([0] * 6 + [1] * 2 + [0] * 1 + [1] * 7).reshape(4, 4)
        cm = ConfusionMatrix(2)
        cm.add_batch(pred, gt)
        np.testing.assert_array_equal(cm.matrix, [[6, 2], [1, 7]])
        report = cm.report()
        assert report.per_class == pytest.approx([6 / 9, 7 / 10])
        assert report.mean == pytest.approx(0.6833, abs=1e-4)

    def test_absent_class_excluded(self):
        gt = np.zeros((2, 2), np.int64)
        report = miou(gt, gt, 3)
        assert report.per_class == [1.0, None, None]
        assert report.mean == 1.0

    def test_ignored_pixels_skipped(self):
        gt = np.array([[0, 255], [1, 1]])
        pred = np.array([[0, 1], [1, 1]])
        assert miou(pred, gt, 2).mean == 1.0

    def test_nothing_present(self):
        assert miou(np.zeros((2, 2)), np.full((2, 2), 255), 2).mean == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_relabelling_permutes_per_class(self, seed):
        """Renaming classes consistently in both maps permutes the IoUs and keeps the mean."""
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, 5, size=(16, 16))
        gt[rng.random(gt.shape) < 0.1] = 255
        pred = np.where(rng.random(gt.shape) < 0.6, gt, rng.integers(0, 5, size=gt.shape))
        pred[pred == 255] = 0
        perm = rng.permutation(5)
        relabel = lambda m: np.where(m == 255, 255, perm[np.minimum(m, 4)])
        before, after = miou(pred, gt, 5), miou(relabel(pred), relabel(gt), 5)
        assert after.mean == pytest.approx(before.mean, abs=1e-12)
        for k in range(5):
            assert after.per_class[perm[k]] == before.per_class[k]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            miou(np.zeros((2, 2)), np.zeros((2, 3)), 2)

    def test_accumulates_and_resets(self):
        cm = ConfusionMatrix(2)
        gt = np.array([[0, 1]])
        cm.add_batch(gt, gt)
        cm.add_batch(gt, gt)
        assert cm.matrix.sum() == 4
        assert cm.pixel_accuracy() == 1.0
        cm.reset()
        assert cm.matrix.sum() == 0
