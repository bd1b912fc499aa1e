import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphpretrain import autodiff as ad
from graphpretrain.autodiff import Tensor
from graphpretrain.encoder import (
    EncoderLayerParams,
    cosine_matrix,
    diversity_attention,
    encode,
    encoder_layer,
    target_representation,
)

BETAS = (0.0, 0.2, 0.5, 0.8, 1.0)


def reference_attention(h, wq, wk, wv, valid=None):
    """Plain scaled dot-product attention."""
    q, k, v = h @ wq, h @ wk, h @ wv
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(h.shape[-1])
    if valid is not None:
        scores = np.where(valid[..., None, :], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    return weights @ v


def layer(width, seed=0):
    return EncoderLayerParams.init(width, np.random.default_rng(seed))


@pytest.mark.parametrize("seed", range(5))
def test_beta_zero_is_standard_attention(seed):
    rng = np.random.default_rng(seed)
    lp = layer(6, seed)
    h = rng.normal(size=(5, 6))
    out = diversity_attention(Tensor(h), lp, 0.0).data
    ref = reference_attention(h, lp.query.data, lp.key.data, lp.value.data)
    assert np.array_equal(out, ref)


def test_beta_zero_matches_reference_with_padding():
    rng = np.random.default_rng(9)
    lp = layer(4, 1)
    h = rng.normal(size=(3, 5, 4))
    valid = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1], [1, 0, 0, 0, 0]], dtype=bool)
    out = diversity_attention(Tensor(h), lp, 0.0, valid).data
    ref = reference_attention(h, lp.query.data, lp.key.data, lp.value.data, valid)
    assert np.array_equal(out, ref)


@pytest.mark.parametrize("beta", BETAS)
def test_mixed_rows_sum_to_one(beta):
    rng = np.random.default_rng(4)
    lp = layer(8, 4)
    h = Tensor(rng.normal(size=(2, 6, 8)))
    valid = np.array([[1, 1, 1, 1, 1, 1], [1, 1, 1, 0, 0, 0]], dtype=bool)
    _, u1, u2 = diversity_attention(h, lp, beta, valid, return_weights=True)
    mixed = beta * u1.data + (1.0 - beta) * u2.data
    assert np.max(np.abs(mixed.sum(-1) - 1.0)) <= 1e-12
    assert np.all(mixed[~np.broadcast_to(valid[:, None, :], mixed.shape)] == 0.0)


def test_identical_rows_two_by_two():
    lp = layer(3)
    lp.similarity.data[...] = np.eye(3)
    h = Tensor(np.tile([[0.3, -1.2, 2.0]], (2, 1)))
    _, u1, _ = diversity_attention(h, lp, 0.5, return_weights=True)
    e = math.e
    assert np.allclose(u1.data, [[e / (e + 1), 1 / (e + 1)], [1 / (e + 1), e / (e + 1)]], atol=1e-12)
    assert np.allclose(u1.data[0], [0.7311, 0.2689], atol=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 7))
def test_cosine_matrix_properties(seed, n):
    s = np.random.default_rng(seed).normal(size=(n, 4))
    c = cosine_matrix(Tensor(s)).data
    assert np.allclose(c, c.T, atol=1e-14)
    assert np.allclose(np.diag(c), 1.0, atol=1e-12)
    assert np.all(np.abs(c) <= 1.0 + 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_diversity_weights_prefer_dissimilar(seed):
    rng = np.random.default_rng(seed)
    lp = layer(4, 0)
    h = rng.normal(size=(5, 4))
    _, u1, _ = diversity_attention(Tensor(h), lp, 1.0, return_weights=True)
    c = cosine_matrix(Tensor(h @ lp.similarity.data)).data
    for i in range(5):
        others = [j for j in range(5) if j != i]
        order = sorted(others, key=lambda j: c[i, j])
        w = u1.data[i, order]
        assert np.all(np.diff(w) <= 1e-15)


def test_zero_norm_row_is_guarded():
    lp = layer(3)
    h = Tensor(np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]))
    out = diversity_attention(h, lp, 0.5).data
    assert np.all(np.isfinite(out))


def test_single_node_attends_to_itself():
    lp = layer(4)
    h = np.random.default_rng(2).normal(size=(1, 4))
    for beta in BETAS:
        out, u1, u2 = diversity_attention(Tensor(h), lp, beta, return_weights=True)
        assert u1.data.tolist() == [[1.0]] and u2.data.tolist() == [[1.0]]
        assert np.allclose(out.data, h @ lp.value.data, rtol=0, atol=1e-15)


def test_zero_weights_preserve_shape():
    lp = layer(5)
    for p in lp.parameters():
        if "norm" not in p.name:
            p.data[...] = 0.0
    h0 = Tensor(np.random.default_rng(0).normal(size=(4, 5)))
    assert encode(h0, [lp, lp, lp], 0.5).shape == (4, 5)


def test_encoder_is_permutation_equivariant():
    rng = np.random.default_rng(8)
    layers = [layer(6, 1), layer(6, 2)]
    h = rng.normal(size=(5, 6))
    perm = np.array([0, 3, 1, 4, 2])
    out = encode(Tensor(h), layers, 0.5).data
    out_perm = encode(Tensor(h[perm]), layers, 0.5).data
    assert np.allclose(out[perm], out_perm, rtol=0, atol=1e-12)


def test_pad_rows_do_not_change_real_rows():
    rng = np.random.default_rng(3)
    layers = [layer(4, 5)]
    h = rng.normal(size=(3, 4))
    padded = np.concatenate([h, rng.normal(size=(2, 4))])
    valid = np.array([True, True, True, False, False])
    short = encode(Tensor(h), layers, 0.3).data
    long = encode(Tensor(padded), layers, 0.3, valid).data
    assert np.allclose(long[:3], short, rtol=0, atol=1e-13)


def test_layer_is_post_norm():
    rng = np.random.default_rng(6)
    lp = layer(4, 6)
    x = Tensor(rng.normal(size=(3, 4)))
    out = encoder_layer(x, lp, 0.5).data
    mid = ad.layer_norm(x + diversity_attention(x, lp, 0.5), lp.norm1_gain, lp.norm1_bias).data
    ffn = np.maximum(mid @ lp.ffn_in.data + lp.ffn_in_bias.data, 0.0) @ lp.ffn_out.data + lp.ffn_out_bias.data
    pre = mid + ffn
    ref = (pre - pre.mean(-1, keepdims=True)) / np.sqrt(pre.var(-1, keepdims=True) + 1e-5)
    assert np.allclose(out, ref, rtol=0, atol=1e-12)
    assert lp.ffn_in.shape == (4, 16)


def test_target_representation_is_row_zero():
    hl = Tensor(np.arange(12.0).reshape(2, 3, 2))
    assert target_representation(hl).data.tolist() == [[0.0, 1.0], [6.0, 7.0]]
