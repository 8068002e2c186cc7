"""
Evaluation metrics.
"""
import numpy as np
import numpy.typing as npt

from .common import (
    DataError,
    DimensionError,
    LabelError,
    UndefinedMetricError,
)
from .enums import TaskMode


def _pair(
    preds: npt.ArrayLike, labels: npt.ArrayLike
) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise DimensionError(
            f"{p.size} predictions but {y.size} labels"
        )
    if p.size == 0:
        raise DataError("can't compute a metric over zero samples")
    return p, y


def mae(preds: npt.ArrayLike, labels: npt.ArrayLike) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(np.abs(p - y)))


def mse(preds: npt.ArrayLike, labels: npt.ArrayLike) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean((p - y) ** 2))


def acc2(preds: npt.ArrayLike, labels: npt.ArrayLike) -> float:
    """
    Polarity accuracy over samples with a non-zero label.
    """
    p, y = _pair(preds, labels)
    nonzero = y != 0
    if not nonzero.any():
        raise UndefinedMetricError("Acc-2 is undefined when all labels are 0")
    return float(np.mean(np.sign(p[nonzero]) == np.sign(y[nonzero])))


def _classes(values: np.ndarray, num_classes: int) -> np.ndarray:
    if np.any(values != np.round(values)):
        raise LabelError("class indices must be integers")
    classes = values.astype(np.int64)
    if classes.min() < 0 or classes.max() >= num_classes:
        raise LabelError(
            f"class index out of range [0, {num_classes}): "
            f"{sorted(set(classes.tolist()))}"
        )
    return classes


def accuracy(
    preds: npt.ArrayLike, labels: npt.ArrayLike, num_classes: int = 7
) -> float:
    p, y = _pair(preds, labels)
    return float(
        np.mean(_classes(p, num_classes) == _classes(y, num_classes))
    )


def macro_f1(
    preds: npt.ArrayLike, labels: npt.ArrayLike, num_classes: int = 7
) -> float:
    """
    Unweighted mean of per-class F1.

    The mean runs over the classes occurring in the labels or the
    predictions; a class that is never predicted correctly scores 0.
    """
    p, y = _pair(preds, labels)
    p_cls = _classes(p, num_classes)
    y_cls = _classes(y, num_classes)
    scores = []
    for c in np.union1d(p_cls, y_cls):
        tp = np.sum((p_cls == c) & (y_cls == c))
        fp = np.sum((p_cls == c) & (y_cls != c))
        fn = np.sum((p_cls != c) & (y_cls == c))
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def task_metrics(
    task: TaskMode,
    preds: npt.ArrayLike,
    labels: npt.ArrayLike,
    num_classes: int = 7,
) -> dict[str, float]:
    """
    All metrics reported for a task; Acc-2 is left out when undefined.
    """
    if task is TaskMode.CLASSIFICATION:
        return {
            "macro_f1": macro_f1(preds, labels, num_classes),
            "accuracy": accuracy(preds, labels, num_classes),
        }
    metrics = {"mae": mae(preds, labels), "mse": mse(preds, labels)}
    try:
        metrics["acc2"] = acc2(preds, labels)
    except UndefinedMetricError:
        pass
    return metrics


def is_improvement(task: TaskMode, new: float, best: float | None) -> bool:
    if best is None:
        return True
    return new > best if task.higher_is_better else new < best
