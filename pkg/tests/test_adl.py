import numpy as np
import pytest

from mm_align.adl import (
    Fitter,
    WindowPredictions,
    fit_predict,
    fitting_loss,
    fitting_loss_and_grad,
    impute,
    reconstruct_plan,
)
from mm_align.common import (
    DegenerateColumnError,
    DimensionError,
    EmptySequenceError,
)
from mm_align.encoder import SharedRepr
from mm_align.enums import FitLossMode
from mm_align.numerics import grad_check
from mm_align.ot_align import AlignmentPlan, band_mask, column_sums
from tests.utils_for_tests import offset_band


def test_fit_predict_rows_are_distributions(rng):
    fitter = Fitter(rng, 4, 2)
    pred = fit_predict(SharedRepr(rng.standard_normal((7, 4))), fitter)
    assert pred.band.shape == (6, 5)
    assert np.allclose(pred.band.sum(axis=-1), 1.0, atol=1e-6)
    assert not pred.band[~pred.mask].any()


def test_zero_projection_gives_uniform_rows(rng):
    fitter = Fitter(rng, 4, 1)
    fitter.projection.weight[...] = 0.0
    pred = fit_predict(SharedRepr(rng.standard_normal((4, 4))), fitter)
    counts = band_mask(3, 1).sum(axis=-1, keepdims=True)
    assert np.allclose(pred.band, band_mask(3, 1) / counts)


def test_fit_predict_empty_sequence(rng):
    with pytest.raises(EmptySequenceError):
        fit_predict(SharedRepr(rng.standard_normal((1, 4))), Fitter(rng, 4, 1))


def test_grad_check_fitter(rng):
    fitter = Fitter(rng, 4, 2)
    x = rng.standard_normal((2, 5, 4))
    assert grad_check(fitter, x, check_input=True) < 1e-4


def test_window_prediction_offsets():
    pred = WindowPredictions(offset_band(5, 2, 1)[:4], 2)
    assert pred.offsets().tolist() == [1, 1, 1, 1]
    with pytest.raises(DimensionError):
        WindowPredictions(np.zeros((3, 4)), 2)


def test_fitting_loss_of_perfect_prediction():
    band = offset_band(4, 1, 0)
    pred = WindowPredictions(band, 1)
    assert fitting_loss(pred, AlignmentPlan(band, 1)) == 0


def test_fitting_loss_hand_calculations():
    pred = WindowPredictions(np.full((1, 3), 1 / 3), 1)
    target = AlignmentPlan(np.array([[1.0, 0.0, 0.0]]), 1)
    every_slot = np.ones((1, 3), dtype=bool)
    assert np.isclose(fitting_loss(pred, target, mask=every_slot), 2 / 9)
    assert np.isclose(
        fitting_loss(pred, target, FitLossMode.SCALED_ROOT, every_slot),
        np.sqrt(2 / 3) / 3,
    )


def test_fitting_loss_ignores_invalid_slots():
    pred = WindowPredictions(np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5]]), 1)
    target = AlignmentPlan(np.array([[9.0, 1.0, 0.0], [0.0, 1.0, 9.0]]), 1)
    # only slots (0, 1), (0, 2), (1, 0), (1, 1) are valid for l=2, W=1
    assert np.isclose(fitting_loss(pred, target), 0.75 / 4)


@pytest.mark.parametrize("mode", list(FitLossMode))
def test_fitting_loss_gradient(rng, mode):
    pred = rng.uniform(size=(2, 5, 3))
    target = rng.uniform(size=(2, 5, 3))
    loss, grad = fitting_loss_and_grad(pred, target, 1, mode)
    h = 1e-6
    numeric = np.zeros_like(pred)
    for index in np.ndindex(pred.shape):
        plus, minus = pred.copy(), pred.copy()
        plus[index] += h
        minus[index] -= h
        numeric[index] = (
            fitting_loss_and_grad(plus, target, 1, mode)[0]
            - fitting_loss_and_grad(minus, target, 1, mode)[0]
        ) / (2 * h)
    assert np.allclose(grad, numeric, atol=1e-7)


def test_fitting_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        fitting_loss(
            WindowPredictions(np.zeros((3, 3)), 1),
            AlignmentPlan(np.zeros((4, 3)), 1),
        )


def test_reconstruct_identity_rows():
    pred = WindowPredictions(offset_band(5, 2, 0), 2)
    assert np.array_equal(reconstruct_plan(pred).to_dense(), np.eye(5))


def test_reconstruct_uniform_rows_interior_columns():
    length, window = 9, 1
    mask = band_mask(length, window)
    pred = WindowPredictions(mask / mask.sum(axis=-1, keepdims=True), window)
    dense = reconstruct_plan(pred).to_dense()
    interior = dense[2:-2, 2:-2]
    tridiagonal = np.abs(np.subtract.outer(range(5), range(5))) <= 1
    assert np.allclose(interior[tridiagonal], 1 / 3)


def test_reconstruct_random_rows_have_unit_columns(rng):
    length, window = 12, 3
    logits = rng.standard_normal((length, 2 * window + 1))
    mask = band_mask(length, window)
    rows = np.where(mask, np.exp(logits), 0.0)
    rows /= rows.sum(axis=-1, keepdims=True)
    plan = reconstruct_plan(WindowPredictions(rows, window))
    assert np.allclose(column_sums(plan.band), 1.0, atol=1e-9)
    unnormalized = reconstruct_plan(WindowPredictions(rows, window), False)
    assert np.allclose(unnormalized.band, rows)


def test_reconstruct_degenerate_column():
    band = np.zeros((3, 3))
    band[:, 2] = 1.0
    band[2, 2] = 0.0
    band[2, 1] = 1.0
    # nothing points at column 0
    with pytest.raises(DegenerateColumnError):
        reconstruct_plan(WindowPredictions(band, 1))


def test_impute_identity_and_constant(rng):
    z1 = SharedRepr(rng.standard_normal((5, 3)))
    head = rng.standard_normal(3)
    identity = AlignmentPlan(offset_band(4, 1, 0), 1)
    imputed = impute(identity, z1, head)
    assert np.array_equal(imputed.head, head)
    assert np.allclose(imputed.content, z1.content)

    v = rng.standard_normal(3)
    constant = SharedRepr(np.vstack([head, np.tile(v, (4, 1))]))
    mask = band_mask(4, 1)
    pred = WindowPredictions(mask / mask.sum(axis=-1, keepdims=True), 1)
    imputed = impute(reconstruct_plan(pred), constant, head)
    assert np.allclose(imputed.content, v)


def test_impute_against_scalar_oracle():
    z1 = SharedRepr(
        np.array([[9.0, 9.0], [1.0, 2.0], [3.0, 5.0], [-1.0, 4.0]])
    )
    # dense plan [[.5 .5 0], [.2 .3 .5], [0 .6 .4]]
    band = np.array([[0.0, 0.5, 0.5], [0.2, 0.3, 0.5], [0.6, 0.4, 0.0]])
    imputed = impute(AlignmentPlan(band, 1), z1, np.zeros(2))
    expected = np.array(
        [
            [0.5 * 1 + 0.2 * 3, 0.5 * 2 + 0.2 * 5],
            [0.5 * 1 + 0.3 * 3 + 0.6 * -1, 0.5 * 2 + 0.3 * 5 + 0.6 * 4],
            [0.5 * 3 + 0.4 * -1, 0.5 * 5 + 0.4 * 4],
        ]
    )
    assert np.allclose(imputed.content, expected, atol=1e-12)


def test_impute_length_mismatch(rng):
    with pytest.raises(DimensionError):
        impute(
            AlignmentPlan(offset_band(3, 1, 0), 1),
            SharedRepr(rng.standard_normal((5, 2))),
            np.zeros(2),
        )
