import numpy as np
import pytest

from l2gfuse.attention import DeformAttnParams, deform_attn, deform_attn_batch, encoder_param_spec, self_attn_layer
from l2gfuse.gradcheck import random_deform_params
from l2gfuse.kernels import FeatureMap, init_params, layer_norm
from oracles import bilinear_closed_form, deform_attn_loops


@pytest.fixture
def fm(rng):
    return FeatureMap(rng.normal(size=(6, 8, 5)), stride=4.0)


def test_single_head_single_point_zero_offset(fm, rng):
    p = random_deform_params(rng, 6, 5, 1, 1)
    p = DeformAttnParams(p.w_out, p.w_value, np.zeros_like(p.w_offset), np.zeros_like(p.b_offset), p.w_attn, p.b_attn)
    q, ref = rng.normal(size=6), np.array([13.0, 9.0])
    sample = bilinear_closed_form(fm.data, fm.stride, *ref)
    expect = p.w_out[0] @ (p.w_value[0] @ sample)
    np.testing.assert_allclose(deform_attn(q, fm, ref, p), expect, atol=1e-12)


def test_zero_feature_map_gives_zero(rng):
    p = random_deform_params(rng, 6, 5, 2, 3)
    zero = FeatureMap(np.zeros((6, 8, 5)), stride=4.0)
    np.testing.assert_array_equal(deform_attn(rng.normal(size=6), zero, (10.0, 10.0), p), np.zeros(6))


def test_matches_loop_oracle(fm, rng):
    for _ in range(10):
        M, K = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        p = random_deform_params(rng, 6, 5, M, K)
        q, ref = rng.normal(size=6), rng.uniform(0, 32, 2)
        np.testing.assert_allclose(deform_attn(q, fm, ref, p), deform_attn_loops(q, fm.data, fm.stride, ref, p),
                                   rtol=0, atol=1e-10)


def test_batch_equals_individual_calls(fm, rng):
    p = random_deform_params(rng, 6, 5, 2, 2)
    qs, refs = rng.normal(size=(7, 6)), rng.uniform(0, 30, size=(7, 2))
    batch = deform_attn_batch(qs, fm, refs, p)
    for i in range(7):
        np.testing.assert_allclose(batch[i], deform_attn(qs[i], fm, refs[i], p), atol=1e-14)


def test_attention_weights_normalized_per_head(fm, rng):
    p = random_deform_params(rng, 6, 5, 3, 4)
    _, cache = deform_attn_batch(rng.normal(size=(5, 6)), fm, rng.uniform(0, 30, (5, 2)), p, return_cache=True)
    np.testing.assert_allclose(cache["weights"].sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(cache["weights"] > 0)


def test_continuous_in_reference_point(fm, rng):
    p = random_deform_params(rng, 6, 5, 2, 2)
    q = rng.normal(size=6)
    ref = np.array([11.3, 7.7])
    base = deform_attn(q, fm, ref, p)
    for eps in (1e-3, 1e-5, 1e-7):
        shifted = deform_attn(q, fm, ref + eps, p)
        assert np.max(np.abs(shifted - base)) < 100 * eps


def test_shape_errors(fm, rng):
    p = random_deform_params(rng, 6, 5, 2, 2)
    with pytest.raises(ValueError):
        deform_attn(np.zeros(5), fm, (0.0, 0.0), p)
    with pytest.raises(ValueError):
        deform_attn(np.zeros(6), FeatureMap(np.zeros((2, 2, 3))), (0.0, 0.0), p)
    with pytest.raises(ValueError):
        DeformAttnParams(p.w_out, p.w_value, p.w_offset[:-2], p.b_offset, p.w_attn, p.b_attn)


# -- encoder layer ---------------------------------------------------------------


@pytest.fixture
def enc():
    return init_params(encoder_param_spec("e", 8), 11)


def _ffn(x, P, pre):
    return P[f"{pre}.w2"] @ np.maximum(P[f"{pre}.w1"] @ x + P[f"{pre}.b1"], 0) + P[f"{pre}.b2"]


def test_single_token_closed_form(enc, rng):
    x = rng.normal(size=8)
    # one token attends only to itself with weight 1
    attended = enc["e.wo"] @ (enc["e.wv"] @ x + enc["e.bv"]) + enc["e.bo"]
    h = layer_norm(x + attended)
    expect = layer_norm(h + _ffn(h, enc, "e.ffn"))
    np.testing.assert_allclose(self_attn_layer(x[None], np.array([True]), enc, "e")[0], expect, atol=1e-12)


def test_identical_tokens_stay_identical(enc, rng):
    x = np.tile(rng.normal(size=8), (5, 1))
    out = self_attn_layer(x, np.ones(5, bool), enc, "e")
    np.testing.assert_allclose(out, np.tile(out[0], (5, 1)), atol=1e-14)


def test_masked_tokens_pass_through_and_do_not_leak(enc, rng):
    x = rng.normal(size=(6, 8))
    mask = np.array([1, 0, 1, 1, 0, 1], bool)
    out = self_attn_layer(x, mask, enc, "e")
    np.testing.assert_array_equal(out[~mask], x[~mask])
    y = x.copy()
    y[~mask] = rng.normal(size=(2, 8)) * 100
    np.testing.assert_array_equal(self_attn_layer(y, mask, enc, "e")[mask], out[mask])
    np.testing.assert_allclose(out[mask], self_attn_layer(x[mask], np.ones(4, bool), enc, "e"), atol=1e-14)


def test_permutation_equivariant(enc, rng):
    x = rng.normal(size=(7, 8))
    perm = rng.permutation(7)
    a = self_attn_layer(x, np.ones(7, bool), enc, "e")
    b = self_attn_layer(x[perm], np.ones(7, bool), enc, "e")
    np.testing.assert_allclose(b, a[perm], atol=1e-13)


def test_all_masked_rejected(enc):
    with pytest.raises(ValueError, match="no valid tokens"):
        self_attn_layer(np.zeros((3, 8)), np.zeros(3, bool), enc, "e")
