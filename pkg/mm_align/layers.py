"""
Basic parameterized layers with explicit backward passes.
"""
import numpy as np

from .common import DimensionError
from .numerics import (
    Grads,
    Matrix,
    Module,
    gelu,
    gelu_grad,
    glorot_uniform,
    layer_norm_backward,
    layer_norm_forward,
    zeros,
)


class Linear(Module):
    """
    ``y = x W + b`` applied over the last axis.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_dim: int,
        out_dim: int,
        bias: bool = True,
    ):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = self.add_param(
            "weight", glorot_uniform(rng, in_dim, out_dim)
        )
        self.bias = self.add_param("bias", zeros(out_dim)) if bias else None

    def forward(self, x: Matrix) -> tuple[Matrix, Matrix]:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"linear layer expects last dim {self.in_dim}, "
                f"got shape {x.shape}"
            )
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y, x

    def backward(self, d_y: Matrix, x: Matrix) -> tuple[Matrix, Grads]:
        flat_x = x.reshape(-1, self.in_dim)
        flat_d_y = d_y.reshape(-1, self.out_dim)
        grads = {"weight": flat_x.T @ flat_d_y}
        if self.bias is not None:
            grads["bias"] = flat_d_y.sum(axis=0)
        return d_y @ self.weight.T, grads


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = self.add_param("gain", np.ones(dim))
        self.bias = self.add_param("bias", zeros(dim))

    def forward(self, x: Matrix):
        return layer_norm_forward(x, self.gain, self.bias, self.eps)

    def backward(self, d_y: Matrix, cache) -> tuple[Matrix, Grads]:
        d_x, d_gain, d_bias = layer_norm_backward(d_y, self.gain, cache)
        return d_x, {"gain": d_gain, "bias": d_bias}


class FeedForward(Module):
    """
    Position-wise two-layer network with a GELU in between.
    """

    def __init__(self, rng: np.random.Generator, dim: int, hidden_dim: int):
        super().__init__()
        self.inner = self.add_child("inner", Linear(rng, dim, hidden_dim))
        self.outer = self.add_child("outer", Linear(rng, hidden_dim, dim))

    def forward(self, x: Matrix):
        pre, inner_cache = self.inner.forward(x)
        out, outer_cache = self.outer.forward(gelu(pre))
        return out, (pre, inner_cache, outer_cache)

    def backward(self, d_y: Matrix, cache) -> tuple[Matrix, Grads]:
        pre, inner_cache, outer_cache = cache
        d_hidden, outer_grads = self.outer.backward(d_y, outer_cache)
        d_x, inner_grads = self.inner.backward(
            d_hidden * gelu_grad(pre), inner_cache
        )
        return d_x, {
            **self.prefixed("inner", inner_grads),
            **self.prefixed("outer", outer_grads),
        }
