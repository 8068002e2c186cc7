import numpy as np
import pytest

from mm_align.common import ConfigurationError, DimensionError
from mm_align.encoder import (
    CrossModalStack,
    ModalityEncoder,
    ModalitySequence,
    MultiHeadAttention,
    SharedRepr,
    TransformerLayer,
    cross_attend,
    encode,
)
from mm_align.enums import Modality, ResidualStyle
from mm_align.numerics import gelu, grad_check


def test_modality_sequence_validation():
    seq = ModalitySequence(Modality.M1, [[1.0, 2.0], [3.0, 4.0]])
    assert (seq.length, seq.dim) == (2, 2)
    with pytest.raises(DimensionError):
        ModalitySequence(Modality.M1, np.zeros((0, 2)))
    with pytest.raises(DimensionError):
        ModalitySequence(Modality.M1, [[1.0, np.nan]])


def test_shared_repr_splits_head_and_content():
    values = np.arange(12.0).reshape(4, 3)
    z = SharedRepr(values)
    assert z.length == 3
    assert np.array_equal(z.head, values[0])
    assert np.array_equal(z.content, values[1:])


def test_single_token_layer_against_scalar_oracle(rng):
    dim = 4
    layer = TransformerLayer(rng, dim, 2, 6)
    x = rng.standard_normal((1, 1, dim))
    out, _ = layer.forward((x, x))

    attention = layer.attention
    # a single key gets attention weight 1
    matt = (x[0, 0] @ attention.value.weight) @ attention.output.weight
    z = matt + attention.output.bias + x[0, 0]
    ffn = layer.ffn
    f = (
        gelu(z @ ffn.inner.weight + ffn.inner.bias) @ ffn.outer.weight
        + ffn.outer.bias
    )
    centered = z - z.mean()
    n = centered / np.sqrt((centered**2).mean() + 1e-5)
    expected = f + n * layer.norm.gain + layer.norm.bias
    assert np.max(np.abs(out[0, 0] - expected)) <= 1e-12


def test_identical_timesteps_encode_identically(rng):
    encoder = ModalityEncoder(rng, 3, 8, 2, 8, 2, 16, positional=False)
    row = rng.standard_normal(3)
    x = np.stack([rng.standard_normal(3), row, row, rng.standard_normal(3)])
    z = encode(ModalitySequence(Modality.M1, x), encoder)
    assert z.length == 4
    assert np.allclose(z.content[1], z.content[2], atol=1e-12, rtol=0)


def test_positional_embeddings_break_the_tie(rng):
    encoder = ModalityEncoder(rng, 3, 8, 2, 8, 1, 16, positional=True)
    row = rng.standard_normal(3)
    z = encode(ModalitySequence(Modality.M1, np.stack([row, row])), encoder)
    assert not np.allclose(z.content[0], z.content[1])


def test_attention_over_identical_values(rng):
    dim = 4
    attention = MultiHeadAttention(rng, dim, 2)
    attention.value.weight[...] = np.eye(dim)
    attention.output.weight[...] = np.eye(dim)
    v = rng.standard_normal(dim)
    source = np.tile(v, (1, 5, 1))
    target = rng.standard_normal((1, 3, dim))
    out, _ = attention.forward((target, source))
    assert np.allclose(out[0], v, atol=1e-12)


def test_zero_query_key_weights_give_uniform_attention(rng):
    dim = 4
    attention = MultiHeadAttention(rng, dim, 2)
    attention.query.weight[...] = 0.0
    attention.key.weight[...] = 0.0
    source = rng.standard_normal((1, 5, dim))
    target = rng.standard_normal((1, 3, dim))
    out, _ = attention.forward((target, source))
    values = source[0] @ attention.value.weight
    expected = (
        values.mean(axis=0) @ attention.output.weight
        + attention.output.bias
    )
    assert np.allclose(out[0], expected, atol=1e-12)


@pytest.mark.parametrize("style", list(ResidualStyle))
def test_grad_check_transformer_layer(rng, style):
    layer = TransformerLayer(rng, 4, 2, 6, style)
    target = rng.standard_normal((2, 3, 4))
    source = rng.standard_normal((2, 5, 4))
    assert grad_check(layer, (target, source)) < 1e-4


def test_grad_check_encoder(rng):
    encoder = ModalityEncoder(rng, 3, 4, 2, 6, 2, 6)
    assert grad_check(encoder, rng.standard_normal((2, 4, 3))) < 1e-4


def test_grad_check_cross_modal_stack(rng):
    stack = CrossModalStack(rng, 4, 2, 6, 2)
    target = rng.standard_normal((2, 4, 4))
    source = rng.standard_normal((2, 3, 4))
    assert grad_check(stack, (target, source)) < 1e-4


def test_cross_attend_keeps_target_length(rng):
    stack = CrossModalStack(rng, 4, 2, 6, 1)
    target = SharedRepr(rng.standard_normal((5, 4)))
    source = SharedRepr(rng.standard_normal((3, 4)))
    assert cross_attend(target, source, stack).values.shape == (5, 4)
    with pytest.raises(ConfigurationError):
        cross_attend(target, SharedRepr(np.ones((3, 6))), stack)


def test_encoder_configuration_errors(rng):
    encoder = ModalityEncoder(rng, 3, 4, 2, 6, 1, 4)
    with pytest.raises(ConfigurationError):
        encoder.forward(np.ones((1, 2, 5)))
    with pytest.raises(ConfigurationError):
        encoder.forward(np.ones((1, 4, 3)))
    with pytest.raises(ConfigurationError):
        MultiHeadAttention(rng, 6, 4)
