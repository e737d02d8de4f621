import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergelock import oracles
from mergelock.checkpoint import ModelConfig
from mergelock.errors import ShapeError
from mergelock.synth import synthetic_family
from mergelock.transformer import (
    functional_divergence,
    layer_norm,
    max_output_deviation,
    model_forward,
    softmax,
)


@given(
    layers=st.integers(0, 2),
    heads=st.sampled_from([1, 2, 4]),
    d_head=st.integers(1, 3),
    ff_mult=st.integers(1, 2),
    act=st.sampled_from(["relu", "gelu", "tanh"]),
    bias=st.booleans(),
    seq=st.integers(1, 4),
    seed=st.integers(0, 2**32),
)
@settings(max_examples=40, deadline=None)
def test_forward_matches_explicit_loops(layers, heads, d_head, ff_mult, act, bias, seq, seed):
    d = heads * d_head
    cfg = ModelConfig(layers, heads, d, d * ff_mult, act, bias)
    fam = synthetic_family(seed, cfg, tasks=0, batch_size=1, seq_len=seq)
    x = fam.batch[0]
    assert np.abs(model_forward(fam.pretrained, x) - oracles.forward_loop(fam.pretrained, x)).max() <= 1e-12


def test_batched_forward_equals_per_sequence(family):
    stacked = model_forward(family.pretrained, np.stack(family.batch))
    for i, x in enumerate(family.batch):
        assert np.array_equal(stacked[i], model_forward(family.pretrained, x))


def test_zero_layer_model_is_identity():
    fam = synthetic_family(0, ModelConfig(0, 1, 4, 4), tasks=0)
    assert np.array_equal(model_forward(fam.pretrained, fam.batch[0]), fam.batch[0])


def test_softmax_rows_and_shift_invariance():
    z = np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]])
    p = softmax(z)
    assert np.allclose(p.sum(axis=-1), 1.0)
    assert np.allclose(softmax(z + 50.0), p)
    assert np.allclose(p[1], [0.5, 0.5, 0.0])


def test_layer_norm_statistics():
    x = np.random.default_rng(0).normal(size=(5, 8)) * 3 + 2
    y = layer_norm(x, np.ones(8), np.zeros(8))
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_divergence_metrics(family):
    pre, ft = family.pretrained, family.finetunes[0]
    assert functional_divergence(pre, pre, family.batch) == 0.0
    assert max_output_deviation(pre, pre, family.batch) == 0.0
    dev = max_output_deviation(pre, ft, family.batch)
    div = functional_divergence(pre, ft, family.batch)
    assert 0 < div <= dev**2


def test_bad_input_width_raises(family):
    with pytest.raises(ShapeError):
        model_forward(family.pretrained, np.zeros((3, 5)))
