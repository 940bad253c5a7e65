"""Segmentation/depth evaluation metrics and the multi-task delta."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyMaskError, XtascError

IGNORE_INDEX = 255

# (name, lower_is_better) in reporting order
METRIC_DIRECTIONS = (("miou", False), ("pix_acc", False), ("abs_err", True), ("rel_err", True))


class MetricError(XtascError, ValueError):
    category = "metric"


@dataclass
class MetricsReport:
    miou: float
    pix_acc: float
    abs_err: float
    rel_err: float
    per_class_iou: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def vector(self) -> list[float]:
        return [getattr(self, name) for name, _ in METRIC_DIRECTIONS]


def confusion_matrix(pred_ids, gt_ids, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """counts[g, p] over pixels whose ground truth is not ``ignore_index``."""
    pred = np.asarray(pred_ids).reshape(-1).astype(np.int64)
    gt = np.asarray(gt_ids).reshape(-1).astype(np.int64)
    valid = gt != ignore_index
    idx = num_classes * gt[valid] + pred[valid]
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou_pixacc(conf: np.ndarray) -> tuple[float, float, list]:
    """Mean IoU over classes with nonzero union, pixel accuracy, per-class IoU (None if absent)."""
    conf = np.asarray(conf, dtype=np.float64)
    total = conf.sum()
    if total == 0:
        raise MetricError("confusion matrix is empty")
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    present = union > 0
    iou = np.where(present, tp / np.where(present, union, 1.0), np.nan)
    per_class = [float(v) if p else None for v, p in zip(iou, present)]
    return float(iou[present].mean()), float(tp.sum() / total), per_class


def depth_errors(pred, gt, valid_mask=None) -> tuple[float, float]:
    """Mean absolute error and mean absolute relative error over valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64).reshape(pred.shape)
    mask = gt > 0 if valid_mask is None else np.asarray(valid_mask, dtype=bool).reshape(pred.shape)
    if not mask.any():
        raise EmptyMaskError("depth mask selects no pixels")
    g = gt[mask]
    if np.any(g == 0):
        raise MetricError("ground-truth depth is zero inside the valid mask")
    err = np.abs(pred[mask] - g)
    return float(err.mean()), float((err / g).mean())


def delta_m(model_metrics, base_metrics, lower_is_better) -> float:
    """Average sign-corrected relative gain over the baseline, in percent."""
    m = np.asarray(model_metrics, dtype=np.float64)
    b = np.asarray(base_metrics, dtype=np.float64)
    flags = np.asarray(lower_is_better, dtype=int)
    if not (m.shape == b.shape == flags.shape):
        raise MetricError("metric lists must have equal length")
    if np.any(b == 0):
        raise MetricError("baseline metric is zero")
    signs = (-1.0) ** flags
    return float(100.0 * np.mean(signs * (m - b) / b))


def report_delta_m(model: MetricsReport, base: MetricsReport) -> float:
    return delta_m(model.vector(), base.vector(), [int(lb) for _, lb in METRIC_DIRECTIONS])


def build_report(pred_ids, gt_ids, depth_pred, depth_gt, num_classes: int, ignore_index: int = IGNORE_INDEX) -> MetricsReport:
    miou, acc, per_class = miou_pixacc(confusion_matrix(pred_ids, gt_ids, num_classes, ignore_index))
    abs_err, rel_err = depth_errors(depth_pred, depth_gt)
    return MetricsReport(miou, acc, abs_err, rel_err, per_class)
