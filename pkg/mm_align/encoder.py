"""
Transformer layers for unimodal encoding and cross-modal fusion.

A layer takes a target sequence (queries) and a source sequence (keys and
values); unimodal self-attention is the special case target = source.
Arrays are batched as ``(batch, time, features)``.
"""
from dataclasses import dataclass

import numpy as np

from .common import ConfigurationError, DimensionError
from .enums import Modality, ResidualStyle
from .layers import FeedForward, LayerNorm, Linear
from .numerics import Grads, Matrix, Module, masked_softmax, softmax_backward


@dataclass
class ModalitySequence:
    """
    One modality's feature time series, shape ``(l, d_in)``.
    """

    modality: Modality
    values: Matrix

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DimensionError(
                f"modality sequence must be (l >= 1, d), "
                f"got shape {self.values.shape}"
            )
        if not np.isfinite(self.values).all():
            raise DimensionError("modality sequence has non-finite values")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class SharedRepr:
    """
    Shared-space sequence ``(l + 1, d_model)``; position 0 is the head token.
    """

    values: Matrix

    @property
    def length(self) -> int:
        "Number of content positions (excluding the head token)"
        return self.values.shape[0] - 1

    @property
    def head(self) -> Matrix:
        return self.values[0]

    @property
    def content(self) -> Matrix:
        return self.values[1:]


def _split_heads(x: Matrix, num_heads: int) -> Matrix:
    batch, time, dim = x.shape
    return x.reshape(batch, time, num_heads, dim // num_heads).transpose(
        0, 2, 1, 3
    )


def _merge_heads(x: Matrix) -> Matrix:
    batch, heads, time, head_dim = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, time, heads * head_dim)


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention with queries from the target sequence and
    keys/values from the source sequence.
    """

    def __init__(self, rng: np.random.Generator, dim: int, num_heads: int):
        super().__init__()
        if num_heads < 1 or dim % num_heads != 0:
            raise ConfigurationError(
                f"d_model={dim} not divisible by num_heads={num_heads}"
            )
        self.num_heads = num_heads
        self.scale = 1.0 / np.sqrt(dim // num_heads)
        self.query = self.add_child("query", Linear(rng, dim, dim, False))
        self.key = self.add_child("key", Linear(rng, dim, dim, False))
        self.value = self.add_child("value", Linear(rng, dim, dim, False))
        self.output = self.add_child("output", Linear(rng, dim, dim))

    def forward(self, inputs: tuple[Matrix, Matrix]):
        target, source = inputs
        q = _split_heads(self.query.forward(target)[0], self.num_heads)
        k = _split_heads(self.key.forward(source)[0], self.num_heads)
        v = _split_heads(self.value.forward(source)[0], self.num_heads)
        attn = masked_softmax(q @ k.transpose(0, 1, 3, 2) * self.scale)
        context = _merge_heads(attn @ v)
        out, output_cache = self.output.forward(context)
        return out, (target, source, q, k, v, attn, output_cache)

    def backward(self, d_out: Matrix, cache):
        target, source, q, k, v, attn, output_cache = cache
        d_context, output_grads = self.output.backward(d_out, output_cache)
        d_context = _split_heads(d_context, self.num_heads)
        d_attn = d_context @ v.transpose(0, 1, 3, 2)
        d_v = attn.transpose(0, 1, 3, 2) @ d_context
        d_scores = softmax_backward(attn, d_attn) * self.scale
        d_q = d_scores @ k
        d_k = d_scores.transpose(0, 1, 3, 2) @ q
        d_target, query_grads = self.query.backward(_merge_heads(d_q), target)
        d_source_k, key_grads = self.key.backward(_merge_heads(d_k), source)
        d_source_v, value_grads = self.value.backward(
            _merge_heads(d_v), source
        )
        grads = {
            **self.prefixed("query", query_grads),
            **self.prefixed("key", key_grads),
            **self.prefixed("value", value_grads),
            **self.prefixed("output", output_grads),
        }
        return (d_target, d_source_k + d_source_v), grads


class TransformerLayer(Module):
    """
    Attention block followed by a feed-forward block.

    With the default residual style the layer computes
    ``Z = MATT(Q, K, V) + x`` and returns ``FFN(Z) + LN(Z)``.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        num_heads: int,
        ffn_dim: int,
        style: ResidualStyle = ResidualStyle.INNER_LN,
        eps: float = 1e-5,
    ):
        super().__init__()
        self.style = style
        self.attention = self.add_child(
            "attention", MultiHeadAttention(rng, dim, num_heads)
        )
        self.ffn = self.add_child("ffn", FeedForward(rng, dim, ffn_dim))
        self.norm = self.add_child("norm", LayerNorm(dim, eps))
        if style is ResidualStyle.POST_LN:
            self.norm2 = self.add_child("norm2", LayerNorm(dim, eps))

    def forward(self, inputs: tuple[Matrix, Matrix]):
        target, source = inputs
        if target.shape[-1] != source.shape[-1]:
            raise ConfigurationError(
                f"target dim {target.shape[-1]} != source dim "
                f"{source.shape[-1]}"
            )
        attended, attention_cache = self.attention.forward((target, source))
        z = attended + target
        if self.style is ResidualStyle.INNER_LN:
            f, ffn_cache = self.ffn.forward(z)
            n, norm_cache = self.norm.forward(z)
            out = f + n
        elif self.style is ResidualStyle.PRE_LN:
            n, norm_cache = self.norm.forward(z)
            f, ffn_cache = self.ffn.forward(n)
            out = f + z
        else:
            z, norm_cache = self.norm.forward(z)
            f, ffn_cache = self.ffn.forward(z)
            out, norm2_cache = self.norm2.forward(z + f)
            norm_cache = (norm_cache, norm2_cache)
        return out, (attention_cache, ffn_cache, norm_cache)

    def backward(self, d_out: Matrix, cache):
        attention_cache, ffn_cache, norm_cache = cache
        grads: Grads = {}
        if self.style is ResidualStyle.INNER_LN:
            d_z_ffn, ffn_grads = self.ffn.backward(d_out, ffn_cache)
            d_z_norm, norm_grads = self.norm.backward(d_out, norm_cache)
            d_z = d_z_ffn + d_z_norm
        elif self.style is ResidualStyle.PRE_LN:
            d_n, ffn_grads = self.ffn.backward(d_out, ffn_cache)
            d_z_norm, norm_grads = self.norm.backward(d_n, norm_cache)
            d_z = d_out + d_z_norm
        else:
            norm1_cache, norm2_cache = norm_cache
            d_sum, norm2_grads = self.norm2.backward(d_out, norm2_cache)
            d_z_ffn, ffn_grads = self.ffn.backward(d_sum, ffn_cache)
            d_z, norm_grads = self.norm.backward(
                d_sum + d_z_ffn, norm1_cache
            )
            grads.update(self.prefixed("norm2", norm2_grads))
        (d_target, d_source), attention_grads = self.attention.backward(
            d_z, attention_cache
        )
        grads.update(self.prefixed("attention", attention_grads))
        grads.update(self.prefixed("ffn", ffn_grads))
        grads.update(self.prefixed("norm", norm_grads))
        return (d_target + d_z, d_source), grads


class ModalityEncoder(Module):
    """
    Unimodal self-attention encoder into the shared space.

    Projects the input features to ``d_model``, prepends a learned head
    token, adds learned positional embeddings and applies a stack of
    self-attention layers.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_dim: int,
        dim: int,
        num_heads: int,
        ffn_dim: int,
        num_layers: int,
        max_len: int,
        positional: bool = True,
        style: ResidualStyle = ResidualStyle.INNER_LN,
        eps: float = 1e-5,
    ):
        super().__init__()
        self.in_dim = in_dim
        self.max_len = max_len
        self.positional = positional
        self.input = self.add_child("input", Linear(rng, in_dim, dim))
        self.head_token = self.add_param(
            "head_token", rng.normal(0.0, 1.0 / np.sqrt(dim), size=dim)
        )
        self.position = (
            self.add_param(
                "position", rng.normal(0.0, 0.02, size=(max_len, dim))
            )
            if positional
            else None
        )
        self.layers = [
            self.add_child(
                f"layers.{i}",
                TransformerLayer(rng, dim, num_heads, ffn_dim, style, eps),
            )
            for i in range(num_layers)
        ]

    def forward(self, x: Matrix):
        if x.shape[-1] != self.in_dim:
            raise ConfigurationError(
                f"encoder expects {self.in_dim} input features, "
                f"got {x.shape[-1]}"
            )
        batch, length, _ = x.shape
        if length + 1 > self.max_len:
            raise ConfigurationError(
                f"sequence length {length} exceeds max_len={self.max_len}"
            )
        projected, input_cache = self.input.forward(x)
        head = np.broadcast_to(self.head_token, (batch, 1, projected.shape[2]))
        h = np.concatenate([head, projected], axis=1)
        if self.position is not None:
            h = h + self.position[: length + 1]
        layer_caches = []
        for layer in self.layers:
            h, layer_cache = layer.forward((h, h))
            layer_caches.append(layer_cache)
        return h, (input_cache, layer_caches)

    def backward(self, d_h: Matrix, cache):
        input_cache, layer_caches = cache
        grads: Grads = {}
        for i in reversed(range(len(self.layers))):
            (d_target, d_source), layer_grads = self.layers[i].backward(
                d_h, layer_caches[i]
            )
            d_h = d_target + d_source
            grads.update(self.prefixed(f"layers.{i}", layer_grads))
        if self.position is not None:
            d_position = np.zeros_like(self.position)
            d_position[: d_h.shape[1]] = d_h.sum(axis=0)
            grads["position"] = d_position
        grads["head_token"] = d_h[:, 0].sum(axis=0)
        d_x, input_grads = self.input.backward(d_h[:, 1:], input_cache)
        grads.update(self.prefixed("input", input_grads))
        return d_x, grads


class CrossModalStack(Module):
    """
    Stack of cross-attention layers fusing a source into a target sequence.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        num_heads: int,
        ffn_dim: int,
        num_layers: int,
        style: ResidualStyle = ResidualStyle.INNER_LN,
        eps: float = 1e-5,
    ):
        super().__init__()
        self.layers = [
            self.add_child(
                f"layers.{i}",
                TransformerLayer(rng, dim, num_heads, ffn_dim, style, eps),
            )
            for i in range(num_layers)
        ]

    def forward(self, inputs: tuple[Matrix, Matrix]):
        target, source = inputs
        h = target
        caches = []
        for layer in self.layers:
            h, layer_cache = layer.forward((h, source))
            caches.append(layer_cache)
        return h, caches

    def backward(self, d_h: Matrix, caches):
        d_source_total = None
        grads: Grads = {}
        for i in reversed(range(len(self.layers))):
            (d_h, d_source), layer_grads = self.layers[i].backward(
                d_h, caches[i]
            )
            d_source_total = (
                d_source
                if d_source_total is None
                else d_source_total + d_source
            )
            grads.update(self.prefixed(f"layers.{i}", layer_grads))
        return (d_h, d_source_total), grads


def encode(x: ModalitySequence, encoder: ModalityEncoder) -> SharedRepr:
    """
    Encode one modality sequence into the shared space (head token first).
    """
    h, _ = encoder.forward(x.values[None])
    return SharedRepr(h[0])


def cross_attend(
    target: SharedRepr,
    source: SharedRepr,
    fusion: CrossModalStack | TransformerLayer,
) -> SharedRepr:
    """
    Fuse ``source`` into ``target``; the output has the target's length.
    """
    if target.values.shape[-1] != source.values.shape[-1]:
        raise ConfigurationError(
            f"target dim {target.values.shape[-1]} != source dim "
            f"{source.values.shape[-1]}"
        )
    h, _ = fusion.forward((target.values[None], source.values[None]))
    return SharedRepr(h[0])
