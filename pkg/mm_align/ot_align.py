"""
Windowed entropic optimal transport in a band-sparse layout.

A band of radius ``W`` over sequences of length ``l`` is stored as an array
of shape ``(..., l, 2W+1)`` whose entry ``(i, k)`` corresponds to the dense
entry ``(i, i - W + k)``. Slots mapping outside ``[0, l)`` are invalid and
always hold 0. Nothing outside the band is ever stored, so plans built here
are exactly zero there.

Leading batch dimensions are supported throughout.
"""
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from logging import Logger, getLogger

import numpy as np
import numpy.typing as npt
from scipy.linalg import orthogonal_procrustes
from scipy.special import logsumexp

from .common import (
    ConditioningError,
    ConfigurationError,
    DegenerateVectorError,
    DimensionError,
)
from .numerics import Matrix

default_logger = getLogger(__name__)

default_tol = 1e-6
default_max_iter = 500
checkpoint_every = 10


@lru_cache(maxsize=256)
def _band_layout(
    length: int, window: int
) -> tuple[npt.NDArray[np.bool_], npt.NDArray[np.intp]]:
    offsets = np.arange(length)[:, None] - window + np.arange(2 * window + 1)
    mask = (offsets >= 0) & (offsets < length)
    mask.flags.writeable = False
    columns = np.clip(offsets, 0, length - 1)
    columns.flags.writeable = False
    return mask, columns


def band_mask(length: int, window: int) -> npt.NDArray[np.bool_]:
    """
    Validity flags of a band layout, shape ``(length, 2 * window + 1)``.
    """
    if length < 1 or window < 0:
        raise ConfigurationError(
            f"invalid band layout: length={length}, window={window}"
        )
    return _band_layout(length, window)[0]


def band_columns(length: int, window: int) -> npt.NDArray[np.intp]:
    """
    Dense column index of every band slot (clipped for invalid slots).
    """
    band_mask(length, window)
    return _band_layout(length, window)[1]


def valid_slot_count(length: int, window: int) -> int:
    return int(band_mask(length, window).sum())


def _layout_of(band: Matrix) -> tuple[int, int]:
    length, width = band.shape[-2:]
    if width % 2 != 1:
        raise DimensionError(f"band width must be odd, got {width}")
    return length, (width - 1) // 2


def band_apply(band: Matrix, x: Matrix) -> Matrix:
    """
    Multiply a banded matrix by a vector or a sequence of feature vectors.

    Args:
        band: Band of shape ``(..., l, 2W+1)``.
        x: Either ``(..., l)`` or ``(..., l, d)``.

    Returns:
        ``A @ x`` in the same layout as ``x``.
    """
    length, window = _layout_of(band)
    mask, columns = _band_layout(length, window)
    band = np.where(mask, band, 0.0)
    if x.ndim == band.ndim - 1:
        if x.shape[-1] != length:
            raise DimensionError(
                f"vector length {x.shape[-1]} doesn't match band {length}"
            )
        return (band * x[..., columns]).sum(axis=-1)
    if x.shape[-2] != length:
        raise DimensionError(
            f"sequence length {x.shape[-2]} doesn't match band {length}"
        )
    return np.einsum("...lk,...lkd->...ld", band, x[..., columns, :])


def band_transpose(band: Matrix, fill: float = 0.0) -> Matrix:
    """
    Band layout of the transposed dense matrix.

    Entry ``(j, k)`` of the result is dense entry ``(j - W + k, j)`` of the
    input.
    """
    length, window = _layout_of(band)
    mask, columns = _band_layout(length, window)
    mirrored = band[..., columns, np.arange(2 * window, -1, -1)]
    return np.where(mask, mirrored, fill)


def band_to_dense(band: Matrix) -> Matrix:
    length, window = _layout_of(band)
    mask, columns = _band_layout(length, window)
    rows, slots = np.nonzero(mask)
    dense = np.zeros(band.shape[:-1] + (length,), dtype=band.dtype)
    dense[..., rows, columns[rows, slots]] = band[..., rows, slots]
    return dense


def dense_to_band(dense: Matrix, window: int) -> Matrix:
    length = dense.shape[-1]
    mask, columns = _band_layout(length, window)
    rows = np.arange(length)[:, None]
    return np.where(mask, dense[..., rows, columns], 0.0)


def column_sums(band: Matrix) -> Matrix:
    return band_transpose(band).sum(axis=-1)


@dataclass
class BandedCost:
    """
    Windowed barrier cost: ``1 - cos`` inside the band, infinite outside.

    The infinite part is never materialized; it is implied by the layout.
    """

    band: Matrix
    window: int

    def __post_init__(self):
        if _layout_of(self.band)[1] != self.window:
            raise DimensionError(
                f"band shape {self.band.shape} doesn't match window "
                f"{self.window}"
            )

    @property
    def length(self) -> int:
        return self.band.shape[-2]

    @property
    def mask(self) -> npt.NDArray[np.bool_]:
        return band_mask(self.length, self.window)


@dataclass
class AlignmentPlan:
    """
    Banded transport plan (nonnegative, unit row and column marginals).

    Plans solved with a relaxed column marginal only keep the unit rows.
    """

    band: Matrix
    window: int
    iterations: int = 0
    violation: float = 0.0
    converged: bool = True

    def __post_init__(self):
        if _layout_of(self.band)[1] != self.window:
            raise DimensionError(
                f"band shape {self.band.shape} doesn't match window "
                f"{self.window}"
            )

    @property
    def length(self) -> int:
        return self.band.shape[-2]

    @property
    def mask(self) -> npt.NDArray[np.bool_]:
        return band_mask(self.length, self.window)

    def to_dense(self) -> Matrix:
        return band_to_dense(self.band)

    def marginal_violation(self) -> float:
        rows = np.abs(self.band.sum(axis=-1) - 1.0)
        columns = np.abs(column_sums(self.band) - 1.0)
        return float(max(rows.max(), columns.max()))


@dataclass
class SinkhornState:
    """
    Scalings and kernel of a Sinkhorn run.

    For runs that fell back to the log domain, ``u``, ``v`` and ``kernel``
    hold the logarithms of the respective quantities.
    """

    u: Matrix
    v: Matrix
    kernel: Matrix
    iterations: int
    violation: float
    history: list[float] = field(default_factory=list)
    "L-infinity marginal violation every ``checkpoint_every`` iterations"
    converged: bool = False
    log_domain: bool = False

    def plan_band(self) -> Matrix:
        length, window = _layout_of(self.kernel)
        mask, columns = _band_layout(length, window)
        if self.log_domain:
            log_plan = (
                self.u[..., :, None] + self.kernel + self.v[..., columns]
            )
            return np.where(mask, np.exp(log_plan), 0.0)
        plan = self.u[..., :, None] * self.kernel * self.v[..., columns]
        return np.where(mask, plan, 0.0)


def build_cost(z1: Matrix, z2: Matrix, window: int) -> BandedCost:
    """
    Barrier cost between two equal-length sequences of shared
    representations.

    Args:
        z1: Source sequence ``(..., l, d)`` (content positions only).
        z2: Target sequence of the same shape.
        window: Band radius ``W``.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise DimensionError(
            f"cost operands differ in shape: {z1.shape} vs {z2.shape}"
        )
    if z1.ndim < 2 or z1.shape[-2] < 1:
        raise DimensionError(f"expected (..., l, d) sequences, got {z1.shape}")
    if window < 0:
        raise ConfigurationError(f"window must be >= 0, got {window}")
    norms1 = np.linalg.norm(z1, axis=-1, keepdims=True)
    norms2 = np.linalg.norm(z2, axis=-1, keepdims=True)
    if (norms1 == 0).any() or (norms2 == 0).any():
        raise DegenerateVectorError(
            "zero-norm vector in cost operands (cosine undefined)"
        )
    length = z1.shape[-2]
    mask, columns = _band_layout(length, window)
    unit1 = z1 / norms1
    unit2 = z2 / norms2
    cos = np.einsum("...ld,...lkd->...lk", unit1, unit2[..., columns, :])
    band = np.where(mask, np.clip(1.0 - cos, 0.0, 2.0), 0.0)
    return BandedCost(band, window)


def stream_rotation(x1: Matrix, x2: Matrix) -> Matrix:
    """
    Orthogonal ``R`` minimizing ``||x2 @ R - x1||`` over all positions.

    Fitted on position-paired complete sequences it maps the victim stream
    into the surviving stream's coordinates, so their raw features can be
    compared by :func:`build_cost`. Position pairing only needs the two
    streams to be positively correlated at their relative lag.

    Args:
        x1: Surviving stream ``(..., l, d)``.
        x2: Victim stream of the same shape.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ConfigurationError(
            "input-space alignment targets need streams of equal shape, "
            f"got {x1.shape} and {x2.shape}"
        )
    dim = x1.shape[-1]
    rotation, _ = orthogonal_procrustes(
        x2.reshape(-1, dim), x1.reshape(-1, dim)
    )
    return rotation


def _check_solver_args(
    mu: float, tol: float, max_iter: int, column_relaxation: float | None
) -> None:
    if column_relaxation is not None and column_relaxation < 0:
        raise ConfigurationError(
            f"column relaxation must be >= 0, got {column_relaxation}"
        )
    if mu <= 0:
        raise ConfigurationError(f"entropic weight mu must be > 0, got {mu}")
    if tol <= 0:
        raise ConfigurationError(f"tolerance must be > 0, got {tol}")
    if max_iter < 1:
        raise ConfigurationError(f"max_iter must be >= 1, got {max_iter}")


def _column_exponent(mu: float, column_relaxation: float | None) -> float:
    if column_relaxation is None:
        return 1.0
    return column_relaxation / (column_relaxation + mu)


def _sinkhorn_scaling(
    cost: BandedCost,
    mu: float,
    tol: float,
    max_iter: int,
    column_relaxation: float | None = None,
) -> SinkhornState:
    mask = cost.mask
    kernel = np.where(mask, np.exp(-cost.band / mu), 0.0)
    kernel_t = band_transpose(kernel)
    if (kernel.sum(axis=-1) == 0).any() or (kernel_t.sum(axis=-1) == 0).any():
        raise ConditioningError(
            f"Sinkhorn kernel underflows for mu={mu}: a full row or column "
            "is zero; use a larger mu or enable the log-domain retry"
        )
    exponent = _column_exponent(mu, column_relaxation)
    v = np.ones(kernel.shape[:-1])
    kv = band_apply(kernel, v)
    u = 1.0 / kv
    history: list[float] = []
    violation = np.inf
    iteration = 0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for iteration in range(1, max_iter + 1):
            u = 1.0 / kv
            v = (1.0 / band_apply(kernel_t, u)) ** exponent
            kv = band_apply(kernel, v)
            violation = float(np.max(np.abs(u * kv - 1.0)))
            if not (np.isfinite(u).all() and np.isfinite(v).all()):
                raise ConditioningError(
                    f"Sinkhorn scalings overflowed for mu={mu}; use a larger "
                    "mu or enable the log-domain retry"
                )
            if iteration % checkpoint_every == 0:
                history.append(violation)
            if violation <= tol:
                break
    return SinkhornState(
        u,
        v,
        kernel,
        iteration,
        violation,
        history,
        converged=violation <= tol,
    )


def _sinkhorn_log(
    cost: BandedCost,
    mu: float,
    tol: float,
    max_iter: int,
    column_relaxation: float | None = None,
) -> SinkhornState:
    mask, columns = _band_layout(cost.length, cost.window)
    log_kernel = np.where(mask, -cost.band / mu, -np.inf)
    log_kernel_t = band_transpose(log_kernel, fill=-np.inf)
    exponent = _column_exponent(mu, column_relaxation)
    log_v = np.zeros(log_kernel.shape[:-1])
    log_kv = logsumexp(log_kernel + log_v[..., columns], axis=-1)
    log_u = -log_kv
    history: list[float] = []
    violation = np.inf
    iteration = 0
    for iteration in range(1, max_iter + 1):
        log_u = -log_kv
        log_v = -exponent * logsumexp(
            log_kernel_t + log_u[..., columns], axis=-1
        )
        log_kv = logsumexp(log_kernel + log_v[..., columns], axis=-1)
        violation = float(np.max(np.abs(np.expm1(log_u + log_kv))))
        if iteration % checkpoint_every == 0:
            history.append(violation)
        if violation <= tol:
            break
    return SinkhornState(
        log_u,
        log_v,
        log_kernel,
        iteration,
        violation,
        history,
        converged=violation <= tol,
        log_domain=True,
    )


def sinkhorn_iterate(
    cost: BandedCost,
    mu: float,
    tol: float = default_tol,
    max_iter: int = default_max_iter,
    log_domain_retry: bool = False,
    logger: Logger = default_logger,
    column_relaxation: float | None = None,
) -> SinkhornState:
    """
    Run Sinkhorn's alternating scaling on ``K = exp(-M / mu)``.

    Both marginals are all-ones vectors. Iteration stops once the
    L-infinity violation of the row marginals drops to ``tol`` (the column
    marginals are exact after every column update) or after ``max_iter``
    iterations.

    With ``column_relaxation`` set to ``rho`` the column marginal is only
    enforced through a KL penalty of weight ``rho``, which raises each
    column update to the power ``rho / (rho + mu)``. ``rho = 0`` drops the
    column constraint, so every row becomes a softmax of ``-M / mu`` over
    its valid slots.

    Args:
        cost: Banded cost.
        mu: Entropic weight.
        tol: Feasibility tolerance.
        max_iter: Iteration limit.
        log_domain_retry: Whether to redo the solve in the log domain when
            the scaled kernel under- or overflows instead of raising.
        logger: Logger to log messages to.
        column_relaxation: KL weight of a relaxed column marginal, or
            ``None`` for the balanced problem.
    """
    _check_solver_args(mu, tol, max_iter, column_relaxation)
    try:
        state = _sinkhorn_scaling(
            cost, mu, tol, max_iter, column_relaxation
        )
    except ConditioningError as e:
        if not log_domain_retry:
            raise
        logger.info("%s; retrying in the log domain", e)
        state = _sinkhorn_log(cost, mu, tol, max_iter, column_relaxation)
    if not state.converged:
        logger.warning(
            "Sinkhorn stopped after %d iterations with violation %.3g "
            "(tolerance %.3g)",
            state.iterations,
            state.violation,
            tol,
        )
    else:
        logger.debug(
            "Sinkhorn converged after %d iterations (violation %.3g)",
            state.iterations,
            state.violation,
        )
    return state


def sinkhorn(
    cost: BandedCost,
    mu: float,
    tol: float = default_tol,
    max_iter: int = default_max_iter,
    log_domain_retry: bool = False,
    logger: Logger = default_logger,
    column_relaxation: float | None = None,
) -> AlignmentPlan:
    """
    Solve the windowed entropic OT problem for the alignment plan.

    See :func:`sinkhorn_iterate` for the arguments.
    """
    state = sinkhorn_iterate(
        cost,
        mu,
        tol,
        max_iter,
        log_domain_retry,
        logger=logger,
        column_relaxation=column_relaxation,
    )
    return AlignmentPlan(
        state.plan_band(),
        cost.window,
        iterations=state.iterations,
        violation=state.violation,
        converged=state.converged,
    )


def transport_cost(plan: AlignmentPlan, cost: BandedCost) -> float | Matrix:
    """
    Sum of plan entries times costs over the band.

    Returns a float for a single instance, an array over leading batch
    dimensions otherwise.
    """
    if plan.band.shape != cost.band.shape or plan.window != cost.window:
        raise DimensionError(
            f"plan {plan.band.shape} (W={plan.window}) doesn't match cost "
            f"{cost.band.shape} (W={cost.window})"
        )
    total = np.where(cost.mask, plan.band * cost.band, 0.0).sum(
        axis=(-2, -1)
    )
    if np.ndim(total) == 0:
        return float(total)
    return total


def band_slot_means(
    bands: Sequence[Matrix], window: int, min_length: int = 1
) -> Matrix:
    """
    Mean absolute entry per band slot over a collection of plans.

    Only plans of length at least ``min_length`` contribute and each slot
    is averaged over the rows where it is valid.
    """
    totals = np.zeros(2 * window + 1)
    counts = np.zeros(2 * window + 1)
    for band in bands:
        length, band_window = _layout_of(band)
        if band_window != window:
            raise DimensionError(
                f"plan window {band_window} doesn't match {window}"
            )
        if length < min_length:
            continue
        mask = band_mask(length, window)
        totals += np.where(mask, np.abs(band), 0.0).sum(axis=-2)
        counts += mask.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, totals / np.maximum(counts, 1), 0.0)
