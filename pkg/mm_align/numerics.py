"""
Dense f64 arithmetic, activations, initialization and gradient checking.

Every parameterized layer in this package follows the same manual-gradient
contract (see :class:`Module`): ``forward`` returns the output together with
a cache, ``backward`` consumes the upstream gradient and that cache and
returns the gradient w.r.t. the inputs plus a mapping of parameter
gradients keyed like :attr:`Module.params`.
"""
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from typing import Any, Protocol, TypeAlias

import numpy as np
import numpy.typing as npt

from .common import DimensionError, EmptySupportError, NumericalError

Matrix: TypeAlias = npt.NDArray[np.float64]
Grads: TypeAlias = dict[str, Matrix]

dtype = np.float64


@dataclass
class GradPair:
    """
    A parameter value and its accumulated gradient.
    """

    value: Matrix
    grad: Matrix

    def __post_init__(self):
        if self.value.shape != self.grad.shape:
            raise DimensionError(
                f"gradient shape {self.grad.shape} doesn't match "
                f"value shape {self.value.shape}"
            )

    @classmethod
    def zeros_like(cls, value: Matrix) -> "GradPair":
        return cls(value, np.zeros_like(value))

    def accumulate(self, grad: Matrix) -> None:
        if grad.shape != self.value.shape:
            raise DimensionError(
                f"gradient shape {grad.shape} doesn't match "
                f"value shape {self.value.shape}"
            )
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def as_matrix(values: Any) -> Matrix:
    return np.asarray(values, dtype=dtype)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError("matmul operands must be at least 1-D")
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != inner_b:
        raise DimensionError(
            f"can't multiply shapes {a.shape} and {b.shape}"
        )
    return np.matmul(a, b)


# activations


def sigmoid(x: Matrix) -> Matrix:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    return out


_gelu_c = np.sqrt(2.0 / np.pi)


def gelu(x: Matrix) -> Matrix:
    return 0.5 * x * (1.0 + np.tanh(_gelu_c * (x + 0.044715 * x**3)))


def gelu_grad(x: Matrix) -> Matrix:
    inner = _gelu_c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    d_inner = _gelu_c * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner


def masked_softmax(
    x: Matrix, mask: npt.NDArray[np.bool_] | None = None
) -> Matrix:
    """
    Max-shifted softmax over the last axis.

    Args:
        x: Logits, any shape.
        mask: Validity flags broadcastable to ``x``; invalid entries get
            exactly zero probability. ``None`` means everything is valid.

    Returns:
        Probabilities of the same shape as ``x``.
    """
    if mask is None:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    mask = np.broadcast_to(mask, x.shape)
    if not mask.any(axis=-1).all():
        raise EmptySupportError("softmax over a fully masked row")
    masked = np.where(mask, x, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_row(
    v: Matrix, mask: npt.NDArray[np.bool_] | None = None
) -> Matrix:
    v = as_matrix(v)
    if v.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {v.shape}")
    return masked_softmax(v, mask)


def softmax_backward(probs: Matrix, d_probs: Matrix) -> Matrix:
    """
    Gradient w.r.t. the logits of a (masked) softmax over the last axis.

    Masked entries have zero probability and therefore receive zero
    gradient.
    """
    return probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))


def log_softmax(x: Matrix) -> Matrix:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# layer normalization


def layer_norm(
    v: Matrix, gain: Matrix, bias: Matrix, eps: float = 1e-5
) -> Matrix:
    v, gain, bias = as_matrix(v), as_matrix(gain), as_matrix(bias)
    if not (v.shape[-1] == gain.shape[-1] == bias.shape[-1]):
        raise DimensionError(
            f"layer norm dims don't match: {v.shape}, {gain.shape}, "
            f"{bias.shape}"
        )
    out, _ = layer_norm_forward(v, gain, bias, eps)
    return out


def layer_norm_forward(
    x: Matrix, gain: Matrix, bias: Matrix, eps: float
) -> tuple[Matrix, tuple[Matrix, Matrix]]:
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    return x_hat * gain + bias, (x_hat, inv_std)


def layer_norm_backward(
    d_out: Matrix, gain: Matrix, cache: tuple[Matrix, Matrix]
) -> tuple[Matrix, Matrix, Matrix]:
    """
    Returns:
        Gradients w.r.t. the input, the gain and the bias.
    """
    x_hat, inv_std = cache
    reduce_axes = tuple(range(d_out.ndim - 1))
    d_gain = (d_out * x_hat).sum(axis=reduce_axes)
    d_bias = d_out.sum(axis=reduce_axes)
    d_x_hat = d_out * gain
    n = d_out.shape[-1]
    d_x = (
        inv_std
        / n
        * (
            n * d_x_hat
            - d_x_hat.sum(axis=-1, keepdims=True)
            - x_hat * (d_x_hat * x_hat).sum(axis=-1, keepdims=True)
        )
    )
    return d_x, d_gain, d_bias


# initialization


def glorot_uniform(
    rng: np.random.Generator, fan_in: int, fan_out: int
) -> Matrix:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def zeros(*shape: int) -> Matrix:
    return np.zeros(shape, dtype=dtype)


# parameter containers


class Module:
    """
    Container for named parameter arrays and child modules.

    Parameter arrays are shared by reference: optimizers and checkpoint
    loading update them in place so every holder sees the new values.
    """

    def __init__(self) -> None:
        self._own_params: dict[str, Matrix] = {}
        self._children: dict[str, "Module"] = {}

    def add_param(self, name: str, value: Matrix) -> Matrix:
        value = np.ascontiguousarray(value, dtype=dtype)
        self._own_params[name] = value
        return value

    def add_child(self, name: str, child: "Module") -> Any:
        self._children[name] = child
        return child

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Matrix]]:
        for name, value in self._own_params.items():
            yield prefix + name, value
        for child_name, child in self._children.items():
            yield from child.named_params(f"{prefix}{child_name}.")

    @property
    def params(self) -> dict[str, Matrix]:
        return dict(self.named_params())

    @staticmethod
    def prefixed(prefix: str, grads: Mapping[str, Matrix]) -> Grads:
        return {f"{prefix}.{name}": grad for name, grad in grads.items()}


class Layer(Protocol):
    @property
    def params(self) -> dict[str, Matrix]:
        ...

    def forward(self, inputs: Any) -> tuple[Any, Any]:
        ...

    def backward(self, d_out: Any, cache: Any) -> tuple[Any, Grads]:
        ...


def add_grads(into: Grads, other: Mapping[str, Matrix]) -> Grads:
    for name, grad in other.items():
        if name in into:
            into[name] = into[name] + grad
        else:
            into[name] = grad
    return into


# gradient checking


def _projected_loss(out: Any, weights: Any) -> float:
    if isinstance(out, tuple):
        return sum(_projected_loss(o, w) for o, w in zip(out, weights))
    return float(np.sum(np.asarray(out) * weights))


def _projection_weights(out: Any, rng: np.random.Generator) -> Any:
    if isinstance(out, tuple):
        return tuple(_projection_weights(o, rng) for o in out)
    return rng.standard_normal(np.shape(out))


def _relative_error(analytic: Matrix, numeric: Matrix) -> float:
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8
    )
    return float(np.max(np.abs(analytic - numeric) / scale))


def grad_check(
    layer: Layer,
    inputs: Any,
    epsilon: float = 1e-5,
    seed: int = 0,
    check_input: bool = False,
) -> float:
    """
    Compare a layer's analytic gradients against central differences.

    The layer's output is reduced to a scalar by a fixed random linear
    projection, so every output entry contributes.

    Args:
        layer: Layer exposing ``params``, ``forward`` and ``backward``.
        inputs: Whatever ``layer.forward`` accepts.
        epsilon: Central-difference step, in (0, 1e-3].
        seed: Seed for the random projection weights.
        check_input: Also check the gradient w.r.t. ``inputs`` (only for a
            single array input).

    Returns:
        Max over all parameters (and entries) of
        ``|analytic - fd| / max(|analytic|, |fd|, 1e-8)``.
    """
    if not 0 < epsilon <= 1e-3:
        raise ValueError(f"epsilon must be in (0, 1e-3], got {epsilon}")
    rng = np.random.default_rng(seed)
    out, cache = layer.forward(inputs)
    weights = _projection_weights(out, rng)
    d_inputs, grads = layer.backward(weights, cache)

    def loss() -> float:
        return _projected_loss(layer.forward(inputs)[0], weights)

    targets: list[tuple[str, Matrix, Matrix]] = []
    for name, value in layer.params.items():
        analytic = np.asarray(grads.get(name, np.zeros_like(value)))
        if not np.all(np.isfinite(analytic)):
            raise NumericalError("non-finite analytic gradient", name)
        targets.append((name, value, analytic))
    if check_input:
        if not np.all(np.isfinite(d_inputs)):
            raise NumericalError("non-finite analytic gradient", "input")
        targets.append(("input", inputs, np.asarray(d_inputs)))

    worst = 0.0
    for name, value, _ in targets:
        if not value.flags.c_contiguous:
            raise ValueError(f"{name} must be C-contiguous for checking")
    for name, value, analytic in targets:
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + epsilon
            plus = loss()
            flat[i] = original - epsilon
            minus = loss()
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2 * epsilon)
        if not np.all(np.isfinite(numeric)):
            raise NumericalError("non-finite numeric gradient", name)
        worst = max(worst, _relative_error(analytic, numeric))
    return worst
