"""
Alignment dynamics learner.

In learning mode a recurrent fitter is trained to reproduce the banded
Sinkhorn plans from the surviving modality alone; in decoding mode its
predictions are turned back into a plan that imputes the victim modality's
shared representation as a windowed linear combination of the surviving
one.
"""
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from .common import (
    DegenerateColumnError,
    DimensionError,
    EmptySequenceError,
)
from .encoder import SharedRepr
from .enums import FitLossMode
from .layers import Linear
from .numerics import (
    Matrix,
    Module,
    glorot_uniform,
    masked_softmax,
    sigmoid,
    softmax_backward,
    zeros,
)
from .ot_align import (
    AlignmentPlan,
    band_apply,
    band_columns,
    band_mask,
    band_transpose,
    column_sums,
)


class GRU(Module):
    """
    Gated recurrent layer scanning ``(batch, time, in_dim)`` sequences.

    Gate order in the stacked weights is update, reset, candidate; the
    reset gate multiplies the hidden projection of the candidate.
    """

    def __init__(self, rng: np.random.Generator, in_dim: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.input_weight = self.add_param(
            "input_weight",
            np.concatenate(
                [glorot_uniform(rng, in_dim, hidden) for _ in range(3)],
                axis=1,
            ),
        )
        self.hidden_weight = self.add_param(
            "hidden_weight",
            np.concatenate(
                [glorot_uniform(rng, hidden, hidden) for _ in range(3)],
                axis=1,
            ),
        )
        self.bias = self.add_param("bias", zeros(3 * hidden))

    def forward(self, x: Matrix):
        batch, length, _ = x.shape
        size = self.hidden
        x_proj = x @ self.input_weight + self.bias
        h = np.zeros((batch, size))
        outputs = np.empty((batch, length, size))
        steps = []
        for t in range(length):
            h_proj = h @ self.hidden_weight
            update = sigmoid(x_proj[:, t, :size] + h_proj[:, :size])
            reset = sigmoid(
                x_proj[:, t, size : 2 * size] + h_proj[:, size : 2 * size]
            )
            h_cand_proj = h_proj[:, 2 * size :]
            candidate = np.tanh(x_proj[:, t, 2 * size :] + reset * h_cand_proj)
            h_new = (1.0 - update) * candidate + update * h
            steps.append((h, update, reset, candidate, h_cand_proj))
            outputs[:, t] = h_new
            h = h_new
        return outputs, (x, steps)

    def backward(self, d_outputs: Matrix, cache):
        x, steps = cache
        batch, length, in_dim = x.shape
        size = self.hidden
        d_x_proj = np.empty((batch, length, 3 * size))
        d_hidden_weight = np.zeros_like(self.hidden_weight)
        d_h_next = np.zeros((batch, size))
        for t in reversed(range(length)):
            h_prev, update, reset, candidate, h_cand_proj = steps[t]
            d_h = d_outputs[:, t] + d_h_next
            d_candidate = d_h * (1.0 - update)
            d_update = d_h * (h_prev - candidate)
            d_h_prev = d_h * update
            d_cand_pre = d_candidate * (1.0 - candidate**2)
            d_reset = d_cand_pre * h_cand_proj
            d_update_pre = d_update * update * (1.0 - update)
            d_reset_pre = d_reset * reset * (1.0 - reset)
            d_x_proj[:, t] = np.concatenate(
                [d_update_pre, d_reset_pre, d_cand_pre], axis=1
            )
            d_h_proj = np.concatenate(
                [d_update_pre, d_reset_pre, d_cand_pre * reset], axis=1
            )
            d_hidden_weight += h_prev.T @ d_h_proj
            d_h_next = d_h_prev + d_h_proj @ self.hidden_weight.T
        flat = d_x_proj.reshape(-1, 3 * size)
        grads = {
            "input_weight": x.reshape(-1, in_dim).T @ flat,
            "hidden_weight": d_hidden_weight,
            "bias": flat.sum(axis=0),
        }
        return d_x_proj @ self.input_weight.T, grads


class Fitter(Module):
    """
    GRU plus linear projection predicting one softmax window row per
    timestamp.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        window: int,
        hidden: int | None = None,
    ):
        super().__init__()
        hidden = dim if hidden is None else hidden
        self.window = window
        self.gru = self.add_child("gru", GRU(rng, dim, hidden))
        self.projection = self.add_child(
            "projection", Linear(rng, hidden, 2 * window + 1)
        )

    def forward(self, z_content: Matrix):
        if z_content.shape[1] == 0:
            raise EmptySequenceError("fitter input has no content positions")
        hidden, gru_cache = self.gru.forward(z_content)
        logits, projection_cache = self.projection.forward(hidden)
        mask = band_mask(z_content.shape[1], self.window)
        probs = masked_softmax(logits, mask)
        return probs, (gru_cache, projection_cache, probs)

    def backward(self, d_probs: Matrix, cache):
        gru_cache, projection_cache, probs = cache
        d_logits = softmax_backward(probs, d_probs)
        d_hidden, projection_grads = self.projection.backward(
            d_logits, projection_cache
        )
        d_z, gru_grads = self.gru.backward(d_hidden, gru_cache)
        return d_z, {
            **self.prefixed("gru", gru_grads),
            **self.prefixed("projection", projection_grads),
        }


@dataclass
class WindowPredictions:
    """
    Fitter output: one probability row over the ``2W + 1`` window slots per
    timestamp, shape ``(..., l, 2W+1)``; out-of-range slots are 0.
    """

    band: Matrix
    window: int

    def __post_init__(self):
        if self.band.shape[-1] != 2 * self.window + 1:
            raise DimensionError(
                f"prediction width {self.band.shape[-1]} doesn't match "
                f"window {self.window}"
            )

    @property
    def length(self) -> int:
        return self.band.shape[-2]

    @property
    def mask(self) -> npt.NDArray[np.bool_]:
        return band_mask(self.length, self.window)

    def offsets(self) -> npt.NDArray[np.intp]:
        "Per-row argmax expressed as an offset in ``[-W, W]``"
        return np.argmax(self.band, axis=-1) - self.window


def fit_predict(z1: SharedRepr, fitter: Fitter) -> WindowPredictions:
    """
    Predict window rows from the surviving modality's content positions.
    """
    if z1.length == 0:
        raise EmptySequenceError("fitter input has no content positions")
    probs, _ = fitter.forward(z1.content[None])
    return WindowPredictions(probs[0], fitter.window)


def fitting_loss_and_grad(
    pred: Matrix,
    target: Matrix,
    window: int,
    mode: FitLossMode = FitLossMode.MSE,
    mask: npt.NDArray[np.bool_] | None = None,
) -> tuple[float, Matrix]:
    """
    Fitting loss between predicted and target bands and its gradient.

    Leading dimensions are a batch; the scaled-root loss is computed per
    instance and averaged over the batch.
    """
    if pred.shape != target.shape:
        raise DimensionError(
            f"prediction shape {pred.shape} doesn't match target "
            f"{target.shape}"
        )
    length = pred.shape[-2]
    if pred.shape[-1] != 2 * window + 1:
        raise DimensionError(
            f"band width {pred.shape[-1]} doesn't match window {window}"
        )
    if mask is None:
        mask = band_mask(length, window)
    diff = np.where(mask, pred - target, 0.0)
    if mode is FitLossMode.MSE:
        count = np.broadcast_to(mask, diff.shape).sum()
        return float((diff**2).sum() / count), 2.0 * diff / count
    scale = 1.0 / ((2 * window + 1) * length)
    sq = (diff**2).sum(axis=(-2, -1))
    root = np.sqrt(sq)
    instances = max(int(np.prod(pred.shape[:-2])), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        d_pred = np.where(
            root[..., None, None] > 0,
            scale * diff / root[..., None, None],
            0.0,
        )
    return float(scale * root.sum() / instances), d_pred / instances


def fitting_loss(
    pred: WindowPredictions,
    target: AlignmentPlan,
    mode: FitLossMode = FitLossMode.MSE,
    mask: npt.NDArray[np.bool_] | None = None,
) -> float:
    """
    Args:
        pred: Fitter predictions.
        target: Sinkhorn plan of the same length and window.
        mode: Plain MSE over valid slots, or the scaled root of the
            summed squares.
        mask: Slots to compare; defaults to the valid band slots.
    """
    if pred.window != target.window or pred.length != target.length:
        raise DimensionError(
            f"predictions (l={pred.length}, W={pred.window}) don't match "
            f"target (l={target.length}, W={target.window})"
        )
    loss, _ = fitting_loss_and_grad(
        pred.band, target.band, pred.window, mode, mask
    )
    return loss


def reconstruct_band(band: Matrix, renormalize: bool = True) -> Matrix:
    length = band.shape[-2]
    window = (band.shape[-1] - 1) // 2
    mask = band_mask(length, window)
    band = np.where(mask, band, 0.0)
    if not renormalize:
        return band
    sums = column_sums(band)
    if (sums <= 0).any():
        raise DegenerateColumnError(
            "a reconstructed plan column has no mass to renormalize"
        )
    return np.where(mask, band / sums[..., band_columns(length, window)], 0.0)


def reconstruct_plan(
    pred: WindowPredictions, renormalize: bool = True
) -> AlignmentPlan:
    """
    Banded plan whose row ``i`` is the predicted window ``t_i``.

    Args:
        pred: Fitter predictions.
        renormalize: Rescale every column to unit mass so imputed vectors
            are convex combinations.
    """
    return AlignmentPlan(
        reconstruct_band(pred.band, renormalize), pred.window
    )


def impute_content(plan_band: Matrix, z_content: Matrix) -> Matrix:
    "``z_hat_j = sum_i A_ij z_i`` over the window around ``j``"
    return band_apply(band_transpose(plan_band), z_content)


def impute_content_backward(plan_band: Matrix, d_imputed: Matrix) -> Matrix:
    return band_apply(plan_band, d_imputed)


def impute(
    plan: AlignmentPlan, z1: SharedRepr, head_embedding: Matrix
) -> SharedRepr:
    """
    Impute the victim modality's shared representation.

    Args:
        plan: Plan whose rows index the surviving modality.
        z1: Surviving modality's shared representation (head token first).
        head_embedding: Initial head-token embedding of the victim
            modality, placed at position 0.
    """
    if plan.length != z1.length:
        raise DimensionError(
            f"plan length {plan.length} doesn't match sequence length "
            f"{z1.length}"
        )
    head_embedding = np.asarray(head_embedding, dtype=np.float64)
    if head_embedding.shape != z1.head.shape:
        raise DimensionError(
            f"head embedding shape {head_embedding.shape} doesn't match "
            f"{z1.head.shape}"
        )
    content = impute_content(plan.band, z1.content)
    return SharedRepr(np.vstack([head_embedding[None], content]))
