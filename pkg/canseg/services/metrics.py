"""Confusion-matrix segmentation metrics."""

import numpy as np

from canseg.core.errors import ShapeError
from canseg.models.schemas import MIoUReport


class ConfusionMatrix:
    """Accumulates a K×K matrix indexed [ground truth, prediction]."""

    def __init__(self, num_classes: int, ignore_index: int = 255):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def generate(self, preds: np.ndarray, labels: np.ndarray) -> np.ndarray:
        preds = np.asarray(preds)
        labels = np.asarray(labels)
        if preds.shape != labels.shape:
            raise ShapeError(f"prediction {preds.shape} and label {labels.shape} extents differ")
        K = self.num_classes
        index = (labels != self.ignore_index) & (labels >= 0) & (labels < K)
        index &= (preds >= 0) & (preds < K)
        codes = K * labels[index].astype(np.int64) + preds[index].astype(np.int64)
        return np.bincount(codes, minlength=K * K).reshape(K, K)

    def add_batch(self, preds: np.ndarray, labels: np.ndarray) -> None:
        self.matrix += self.generate(preds, labels)

    def reset(self) -> None:
        self.matrix[:] = 0

    def pixel_accuracy(self) -> float:
        total = self.matrix.sum()
        return float(np.diag(self.matrix).sum() / total) if total else 0.0

    def report(self) -> MIoUReport:
        tp = np.diag(self.matrix)
        union = self.matrix.sum(axis=0) + self.matrix.sum(axis=1) - tp
        per_class = [float(tp[k] / union[k]) if union[k] else None for k in range(self.num_classes)]
        present = [v for v in per_class if v is not None]
        # nothing present (e.g. all pixels ignored) reports a mean of 0
        mean = float(np.mean(present)) if present else 0.0
        return MIoUReport(per_class=per_class, mean=mean)


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: int = 255) -> MIoUReport:
    cm = ConfusionMatrix(num_classes, ignore_index)
    cm.add_batch(pred, gt)
    return cm.report()
