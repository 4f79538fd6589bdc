import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsanet import attention as A
from dsanet import tensor as T
from dsanet.rng import stream
from dsanet.tensor import ConvWeights, Graph, ShapeError

from oracles import attention_mp, channel_pool, conv_direct, self_attention_composition, sigmoid_mp

seeds = st.integers(0, 2**32 - 1)


def sa_params(rng, c, strided=False, k=1, gamma=0.0, scale=0.7):
    s, p = (2, 1 if k == 3 else 0) if strided else (1, 0)
    proj = [ConvWeights(rng.standard_normal((c, c, k, k)) * scale, rng.standard_normal(c) * 0.1, s, p) for _ in range(3)]
    return A.SelfAttentionParams(*proj, gamma=np.array(gamma))


def branch(f, p, capture=False):
    att, rec = A.branch_attention(Graph().input(f), p, capture)
    return att.value, rec


# -- CBAM -------------------------------------------------------------------------

def cbam(w7, b7):
    return A.CbamParams(ConvWeights(w7, np.array([b7]), 1, 3))


def test_cbam_zero_weights_half_mask():
    f = np.random.default_rng(0).standard_normal((3, 4, 5))
    mask, out = A.cbam_spatial_attention(Graph().input(f), cbam(np.zeros((1, 2, 7, 7)), 0.0))
    assert np.all(mask.value == 0.5)
    assert np.array_equal(out.value, 0.5 * f)


def test_cbam_single_position_closed_form():
    w = np.zeros((1, 2, 7, 7))
    w[0, 0, 3, 3], w[0, 1, 3, 3] = 0.5, 0.8  # centre taps sum to s = 1.3
    mask, _ = A.cbam_spatial_attention(Graph().input(np.array([[[0.7]]])), cbam(w, 0.0))
    # mpmath: 1 / (1 + exp(-0.91))
    assert mask.value[0, 0, 0] == pytest.approx(0.71300016275228166368, rel=1e-15)


def test_cbam_matches_composition():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((3, 5, 5))
    w, b = rng.standard_normal((1, 2, 7, 7)) * 0.3, 0.2
    mask, out = A.cbam_spatial_attention(Graph().input(f), cbam(w, b))
    logits = conv_direct(channel_pool(f), w, [b], 1, 3)
    ref_mask = np.vectorize(sigmoid_mp)(logits)
    np.testing.assert_allclose(mask.value, ref_mask, rtol=1e-13)
    np.testing.assert_allclose(out.value, f * ref_mask, rtol=1e-13)
    assert np.all((mask.value > 0) & (mask.value < 1))


def test_cbam_params_shape_checked():
    with pytest.raises(ShapeError):
        A.CbamParams(ConvWeights(np.zeros((2, 2, 7, 7)), np.zeros(2), 1, 3))


# -- scaled dot attention ----------------------------------------------------------------

def sdpa(q, k, v):
    g = Graph()
    out, w = A.scaled_dot_attention(*(g.input(np.asarray(a, dtype=float)) for a in (q, k, v)))
    return out.value, w.value


def test_sdpa_single_position_returns_v():
    out, w = sdpa([[5.0, -2.0]], [[3.0, 1.0]], [[0.25, 4.0]])
    assert np.array_equal(out, [[0.25, 4.0]]) and w.tolist() == [[1.0]]


def test_sdpa_zero_query_averages_v():
    out, _ = sdpa(np.zeros((2, 1)), [[1.0], [-4.0]], [[1.0], [3.0]])
    assert np.array_equal(out, [[2.0], [2.0]])


def test_sdpa_matches_extended_precision():
    rng = np.random.default_rng(2)
    q, k, v = rng.standard_normal((3, 3, 2))
    out, w = sdpa(q, k, v)
    ref_out, ref_w = attention_mp(q, k, v)
    np.testing.assert_allclose(out, ref_out, rtol=1e-13)
    np.testing.assert_allclose(w, ref_w, rtol=1e-13)


def test_sdpa_rejects_empty_and_mismatch():
    with pytest.raises(ShapeError):
        sdpa(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ShapeError):
        sdpa(np.zeros((2, 0)), np.zeros((2, 0)), np.zeros((2, 0)))
    with pytest.raises(ShapeError):
        sdpa(np.zeros((2, 2)), np.zeros((3, 2)), np.zeros((3, 2)))


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 9), st.integers(1, 4))
def test_sdpa_convex_combination(seed, n, d):
    rng = np.random.default_rng(seed)
    q, k = rng.standard_normal((2, n, d)) * 3
    v = rng.uniform(-2, 5, size=(n, d))
    out, w = sdpa(q, k, v)
    assert np.all(np.abs(w.sum(axis=1) - 1) <= 1e-12)
    lo, hi = v.min(axis=0), v.max(axis=0)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


# -- self attention branch ---------------------------------------------------------------

def test_zero_query_gives_spatial_mean_of_v():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((2, 3, 4))
    p = sa_params(rng, 2)
    p.wq.weight[...] = 0
    p.wq.bias[...] = 0
    att, _ = branch(f, p)
    v = conv_direct(f, p.wv.weight, p.wv.bias, 1, 0)
    np.testing.assert_allclose(att, np.broadcast_to(v.mean(axis=(1, 2))[:, None, None], att.shape), rtol=1e-13)


def test_single_position_returns_v_projection():
    rng = np.random.default_rng(4)
    f = rng.standard_normal((3, 1, 1))
    p = sa_params(rng, 3)
    att, rec = branch(f, p, capture=True)
    np.testing.assert_allclose(att, conv_direct(f, p.wv.weight, p.wv.bias, 1, 0), rtol=1e-14)
    assert rec.weights.shape == (1, 1)


def test_branch_matches_composition():
    rng = np.random.default_rng(5)
    f = rng.standard_normal((2, 3, 3))
    p = sa_params(rng, 2)
    att, rec = branch(f, p, capture=True)
    ref = self_attention_composition(f, p.wq.weight, p.wq.bias, p.wk.weight, p.wk.bias, p.wv.weight, p.wv.bias)
    np.testing.assert_allclose(att, ref, rtol=1e-12, atol=1e-14)
    assert rec.weights.shape == (9, 9) and rec.grid == (3, 3)


def test_branch_channel_mismatch():
    rng = np.random.default_rng(6)
    with pytest.raises(ShapeError, match="channels"):
        branch(rng.standard_normal((3, 2, 2)), sa_params(rng, 2))


def test_projection_shapes_must_agree():
    a = ConvWeights(np.zeros((2, 2, 1, 1)), np.zeros(2))
    b = ConvWeights(np.zeros((2, 2, 1, 1)), np.zeros(2), 2, 0)
    with pytest.raises(ShapeError):
        A.SelfAttentionParams(a, a, b)


# -- residual ------------------------------------------------------------------------------

def test_residual_cases():
    rng = np.random.default_rng(7)
    f, att = rng.standard_normal((2, 2, 3, 3))
    g = Graph()
    fn, an = g.input(f), g.input(att)
    assert np.array_equal(A.residual_combine(fn, an, 0.0).value, f)
    assert np.array_equal(A.residual_combine(fn, g.input(np.zeros_like(f)), 3.7).value, f)
    assert np.array_equal(A.residual_combine(fn, fn, 1.0).value, 2 * f)
    with pytest.raises(ShapeError):
        A.residual_combine(fn, g.input(np.zeros((2, 3, 2))), 1.0)


def test_gamma_gradient_is_sum_of_attention():
    rng = np.random.default_rng(8)
    f = rng.standard_normal((2, 3, 3))
    p = sa_params(rng, 2, gamma=0.3)
    g = Graph()
    out, _ = A.apply_branch(g.input(f), p)
    g.backward(T.total(out))
    att, _ = branch(f, p)
    dgamma = g.param(p.gamma).grad
    assert float(dgamma) == pytest.approx(att.sum(), rel=1e-12)
    h = 1e-5
    loss = lambda gm: (f + gm * att).sum()  # noqa: E731
    fd = (loss(0.3 + h) - loss(0.3 - h)) / (2 * h)
    assert abs(float(dgamma) - fd) <= 1e-6 * max(abs(fd), 1e-8)


# -- strided variant ----------------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 3])
def test_strided_matches_composition(k):
    rng = np.random.default_rng(9 + k)
    f = rng.standard_normal((2, 4, 4))
    p = sa_params(rng, 2, strided=True, k=k)
    att, rec = branch(f, p, capture=True)
    ref = self_attention_composition(f, p.wq.weight, p.wq.bias, p.wk.weight, p.wk.bias, p.wv.weight, p.wv.bias,
                                     2, p.wq.padding)
    np.testing.assert_allclose(att, ref, rtol=1e-12, atol=1e-14)
    assert rec.weights.shape == (4, 4)


@pytest.mark.parametrize("k", [1, 3])
def test_strided_shape_contract(k):
    rng = np.random.default_rng(11)
    p = sa_params(rng, 2, strided=True, k=k)
    for h in range(2, 10):
        for w in range(2, 10):
            att, rec = branch(rng.standard_normal((2, h, w)), p, capture=True)
            assert att.shape == (2, h, w)
            assert rec.weights.size == (math.ceil(h / 2) * math.ceil(w / 2)) ** 2


def test_strided_rejects_thin_maps():
    rng = np.random.default_rng(12)
    p = sa_params(rng, 2, strided=True)
    with pytest.raises(ShapeError, match="height/width"):
        branch(rng.standard_normal((2, 1, 4)), p)


def test_plain_branch_rejects_strided_params():
    rng = np.random.default_rng(13)
    p = sa_params(rng, 2, strided=True)
    with pytest.raises(ValueError):
        A.self_attention_branch(Graph().input(rng.standard_normal((2, 4, 4))), p)


# -- DSA module ----------------------------------------------------------------------------

VARIANTS = [
    dict(variant="self-attention"),
    dict(variant="self-attention", strided=True, stride_kernel=1),
    dict(variant="self-attention", strided=True, stride_kernel=3),
    dict(variant="cbam"),
]


@pytest.mark.parametrize("kw", VARIANTS)
@pytest.mark.parametrize("shared", [False, True])
def test_fresh_module_is_identity(kw, shared):
    rng = stream(0, "dsa-test")
    p = A.make_dsa_params(3, rng, shared=shared, **kw)
    f = rng.standard_normal((3, 4, 6))
    cls, loc = A.dsa_numpy(f, p)
    assert np.array_equal(cls, f) and np.array_equal(loc, f)


def test_shared_outputs_bitwise_equal():
    rng = np.random.default_rng(14)
    p = A.make_dsa_params(3, rng, shared=True, gamma=0.8)
    cls, loc = A.dsa_numpy(rng.standard_normal((3, 3, 3)), p)
    assert np.array_equal(cls, loc)
    assert p.cls_branch is p.loc_branch


@pytest.mark.parametrize("variant", ["self-attention", "cbam"])
def test_decoupled_doubles_params_and_isolates(variant):
    rng = np.random.default_rng(15)
    shared = A.make_dsa_params(4, rng, variant, shared=True)
    dec = A.make_dsa_params(4, rng, variant, gamma=0.5)
    assert dec.n_params == 2 * shared.n_params
    cls_ids = {id(a) for a in dec.cls_branch.arrays().values()}
    assert cls_ids.isdisjoint(id(a) for a in dec.loc_branch.arrays().values())
    f = rng.standard_normal((4, 3, 3))
    cls0, loc0 = A.dsa_numpy(f, dec)
    for arr in dec.loc_branch.arrays().values():
        arr += 0.25
    cls1, loc1 = A.dsa_numpy(f, dec)
    assert np.array_equal(cls0, cls1) and not np.array_equal(loc0, loc1)


def test_module_invariants_enforced():
    rng = np.random.default_rng(16)
    a = A.make_self_attention_params(2, rng)
    b = A.make_self_attention_params(2, rng)
    with pytest.raises(ValueError):
        A.DsaModuleParams(a, b, shared=True)
    with pytest.raises(ValueError):
        A.DsaModuleParams(a, a, shared=False)
    with pytest.raises(ValueError):
        A.DsaModuleParams(a, b, variant="conv")


def test_records_captured_only_on_request():
    rng = np.random.default_rng(17)
    p = A.make_dsa_params(2, rng)
    f = Graph().input(rng.standard_normal((2, 3, 3)))
    assert A.dsa_forward(f, p)[2] == []
    recs = A.dsa_forward(f, p, capture=True)[2]
    assert [r.weights.shape for r in recs] == [(9, 9), (9, 9)]


def test_init_scale():
    w = A.init_uniform(np.random.default_rng(18), 8, 8, 3)
    assert np.abs(w).max() <= 1 / math.sqrt(72)


# -- equivariance ---------------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(seeds)
def test_self_attention_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    c, h, w = 3, 3, 4
    f = rng.standard_normal((c, h, w))
    p = sa_params(rng, c)
    perm = rng.permutation(h * w)
    att, _ = branch(f, p)
    att_p, _ = branch(f.reshape(c, -1)[:, perm].reshape(c, h, w), p)
    expected = att.reshape(c, -1)[:, perm]
    assert np.abs(att_p.reshape(c, -1) - expected).max() <= 1e-10 * np.abs(expected).max()
