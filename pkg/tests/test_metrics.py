import numpy as np
import pytest

from mm_align.common import (
    DataError,
    DimensionError,
    LabelError,
    UndefinedMetricError,
)
from mm_align.enums import TaskMode
from mm_align.metrics import (
    acc2,
    accuracy,
    is_improvement,
    macro_f1,
    mae,
    mse,
    task_metrics,
)


def test_mae_trivial_cases():
    assert mae([1.5, -2.0], [1.5, -2.0]) == 0.0
    assert mae([0.0], [2.0]) == 2.0
    assert mse([0.0], [2.0]) == 4.0


def test_mae_against_scalar_oracle(rng):
    preds = rng.standard_normal(100)
    labels = rng.standard_normal(100)
    expected = sum(abs(p - y) for p, y in zip(preds, labels)) / 100
    assert abs(mae(preds, labels) - expected) <= 1e-12


def test_mae_is_translation_paired(rng):
    preds = rng.standard_normal(20)
    labels = rng.standard_normal(20)
    assert np.isclose(mae(preds + 3.0, labels + 3.0), mae(preds, labels))


def test_metric_input_errors():
    with pytest.raises(DataError):
        mae([], [])
    with pytest.raises(DimensionError):
        mae([1.0, 2.0], [1.0])


def test_acc2_hand_cases():
    assert acc2([0.5, -1.0, 2.0], [1.0, -3.0, 0.1]) == 1.0
    assert acc2([0.5, -1.0], [-1.0, 3.0]) == 0.0
    assert acc2([1.0, 1.0, -1.0, 1.0], [2.0, 0.5, -0.1, -1.0]) == 0.75


def test_acc2_skips_zero_labels():
    assert acc2([1.0, -5.0], [1.0, 0.0]) == 1.0
    with pytest.raises(UndefinedMetricError):
        acc2([1.0, -1.0], [0.0, 0.0])


def test_macro_f1_trivial_cases():
    assert macro_f1([0, 1, 2, 1], [0, 1, 2, 1], 3) == 1.0
    assert macro_f1([1, 1], [0, 0], 3) == 0.0


def test_macro_f1_hand_confusion():
    labels = [0, 0, 0, 1, 1, 2]
    preds = [0, 0, 1, 1, 2, 2]
    # class 0: tp 2, fp 0, fn 1; class 1: tp 1, fp 1, fn 1;
    # class 2: tp 1, fp 1, fn 0
    expected = (4 / 5 + 2 / 4 + 2 / 3) / 3
    assert np.isclose(macro_f1(preds, labels, 3), expected)
    assert np.isclose(accuracy(preds, labels, 3), 4 / 6)


def test_macro_f1_is_invariant_under_relabeling(rng):
    labels = rng.integers(0, 4, size=30)
    preds = rng.integers(0, 4, size=30)
    relabel = np.array([2, 0, 3, 1])
    assert np.isclose(
        macro_f1(preds, labels, 4),
        macro_f1(relabel[preds], relabel[labels], 4),
    )


@pytest.mark.parametrize("preds", [[0, 3], [0, -1], [0, 0.5]])
def test_classification_label_errors(preds):
    with pytest.raises(LabelError):
        macro_f1(preds, [0, 1], 3)


def test_task_metrics():
    regression = task_metrics(TaskMode.REGRESSION, [1.0, -1.0], [2.0, 0.0])
    assert regression == {"mae": 1.0, "mse": 1.0, "acc2": 1.0}
    without_acc2 = task_metrics(TaskMode.REGRESSION, [1.0], [0.0])
    assert "acc2" not in without_acc2
    classification = task_metrics(TaskMode.CLASSIFICATION, [0, 1], [0, 1], 2)
    assert classification == {"macro_f1": 1.0, "accuracy": 1.0}


def test_is_improvement_follows_the_task_direction():
    assert is_improvement(TaskMode.REGRESSION, 5.0, None)
    assert is_improvement(TaskMode.REGRESSION, 0.4, 0.5)
    assert not is_improvement(TaskMode.REGRESSION, 0.5, 0.5)
    assert is_improvement(TaskMode.CLASSIFICATION, 0.6, 0.5)
    assert not is_improvement(TaskMode.CLASSIFICATION, 0.4, 0.5)
