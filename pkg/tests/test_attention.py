import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgsa import autograd as ag
from dgsa.attention import (AttentionParams, HeadLayout, diff_attn_forward, diff_lambda_value,
                            fuse_gated_maps, headwise_groupnorm, lambda_init_schedule,
                            lateral_inhibition_reference, mdgsa_forward, merge_heads,
                            scaled_softmax_scores, split_streams, token_head_gate,
                            vanilla_mha_forward)
from dgsa.autograd import Tensor
from dgsa.errors import ConfigError, DimensionError

from factories import leaf, random_attention, random_tiny
from oracles import mdgsa_oracle, vanilla_oracle

seeds = st.integers(0, 2**32 - 1)


# -- lambda schedule ---------------------------------------------------------

def test_lambda_schedule_values():
    assert lambda_init_schedule(1) == 0.2
    assert abs(lambda_init_schedule(2) - (0.8 - 0.6 * math.exp(-0.3))) < 1e-15
    assert abs(lambda_init_schedule(2) - 0.355509) < 1e-6
    assert abs(lambda_init_schedule(100) - 0.8) < 1e-12


@given(st.integers(1, 200))
def test_lambda_schedule_monotone_bounded(l):
    a, b = lambda_init_schedule(l), lambda_init_schedule(l + 1)
    assert 0.2 <= a <= 0.8
    if l <= 100:
        assert a < 0.8 and b > a
    assert b >= a


def test_lambda_schedule_rejects_zero():
    with pytest.raises(ConfigError):
        lambda_init_schedule(0)


# -- split / merge -----------------------------------------------------------

def test_split_identity_projection_single_head():
    X = Tensor(np.arange(8.0).reshape(2, 4))
    eye = Tensor(np.eye(4))
    params = AttentionParams(eye, eye, eye, eye)
    q_p, q_m, k_p, k_m, V, Q = split_streams(X, params, HeadLayout(4, 1))
    assert np.array_equal(q_p.data[0], X.data[:, :2])
    assert np.array_equal(q_m.data[0], X.data[:, 2:])
    assert np.array_equal(V.data[0], X.data)


@settings(deadline=None)
@given(seeds)
def test_split_merge_round_trip(seed):
    rng = np.random.default_rng(seed)
    N, h, d = random_tiny(rng)
    params, layout = random_attention(rng, d, h)
    X = Tensor(rng.normal(size=(N, d)))
    V = split_streams(X, params, layout)[4]
    assert np.array_equal(merge_heads(V).data, (X @ params.W_V).data)


def test_split_matches_slicing_oracle():
    rng = np.random.default_rng(11)
    params, layout = random_attention(rng, 4, 1)
    X = Tensor(rng.normal(size=(2, 4)))
    q_p, q_m, k_p, k_m, V, _ = split_streams(X, params, layout)
    XW = X.data @ params.W_Q.data
    XK = X.data @ params.W_K.data
    for t in range(2):
        for j in range(2):
            assert q_p.data[0, t, j] == XW[t, j]
            assert q_m.data[0, t, j] == XW[t, 2 + j]
            assert k_p.data[0, t, j] == XK[t, j]
            assert k_m.data[0, t, j] == XK[t, 2 + j]


def test_head_column_ownership():
    # head i reads columns [2i*dh, (2i+2)*dh): excitatory first, inhibitory second
    X = Tensor(np.eye(8)[:3])
    eye = Tensor(np.eye(8))
    q_p, q_m, *_ = split_streams(X, AttentionParams(eye, eye, eye, eye), HeadLayout(8, 2))
    assert np.array_equal(q_p.data[1], X.data[:, 4:6])
    assert np.array_equal(q_m.data[1], X.data[:, 6:8])


# -- scores and gate ---------------------------------------------------------

def test_scores_orthogonal_uniform():
    Q = Tensor([[1.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    K = Tensor([[0.0, 1.0], [0.0, -3.0], [0.0, 2.0]])
    assert np.allclose(scaled_softmax_scores(Q, K).data, 1 / 3)


def test_scores_single_key():
    assert scaled_softmax_scores(Tensor([[0.3]]), Tensor([[-2.0]])).data.tolist() == [[1.0]]


def test_scores_closed_form():
    out = scaled_softmax_scores(Tensor([[1.0], [0.0]]), Tensor([[1.0], [0.0]])).data
    e = math.e
    assert np.allclose(out, [[e / (e + 1), 1 / (e + 1)], [0.5, 0.5]], atol=1e-15)
    assert np.allclose(out, [[0.731059, 0.268941], [0.5, 0.5]], atol=1e-6)


def test_scores_width_mismatch():
    with pytest.raises(DimensionError):
        scaled_softmax_scores(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3))))


def test_gate_examples():
    X = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert np.array_equal(token_head_gate(X, Tensor(np.zeros((4, 2))), Tensor(np.zeros(2))).data,
                          np.full((3, 2), 0.5))
    g = token_head_gate(X, Tensor(np.zeros((4, 2))), Tensor([50.0, 50.0])).data
    assert np.allclose(g, 1.0, atol=1e-15)
    g = token_head_gate(Tensor([[1.0, -1.0]]), Tensor([[0.5], [0.5]]), Tensor([0.0])).data
    assert g.tolist() == [[0.5]]


# -- fusion ------------------------------------------------------------------

def _maps(rng, h, N):
    raw = rng.normal(size=(2, h, N, N))
    return (ag.softmax_rows(Tensor(raw[0])), ag.softmax_rows(Tensor(raw[1])))


def test_fuse_examples():
    rng = np.random.default_rng(1)
    ap, am = _maps(rng, 2, 3)
    assert np.array_equal(fuse_gated_maps(ap, am, Tensor(np.ones((3, 2)))).data, ap.data)
    assert np.array_equal(fuse_gated_maps(ap, ap, Tensor(np.full((3, 2), 0.5))).data, np.zeros((2, 3, 3)))
    assert np.allclose(fuse_gated_maps(ap, am, Tensor(np.full((3, 2), 0.5))).data.sum(-1), 0.0, atol=1e-15)
    assert np.allclose(fuse_gated_maps(ap, am, Tensor(np.full((3, 2), 0.75))).data.sum(-1), 0.5, atol=1e-15)


def test_fuse_gate_shape_checked():
    ap, am = _maps(np.random.default_rng(2), 2, 3)
    with pytest.raises(DimensionError):
        fuse_gated_maps(ap, am, Tensor(np.ones((2, 3))))


@settings(deadline=None)
@given(seeds)
def test_gate_range_and_row_sum_law(seed):
    rng = np.random.default_rng(seed)
    N, h, d = random_tiny(rng)
    params, layout = random_attention(rng, d, h, scale=2.0)
    _, maps = mdgsa_forward(Tensor(rng.normal(size=(N, d))), params, layout)
    assert np.all((maps.gate > 0) & (maps.gate < 1))
    assert np.all(np.abs(maps.fused) <= 1.0)
    expected = 2.0 * maps.gate.T - 1.0          # (h, N)
    assert np.allclose(maps.fused.sum(-1), expected, atol=1e-6)


# -- differential lambda -----------------------------------------------------

def _lam_params(q1, k1, q2, k2, lambda_init=0.3):
    eye = Tensor(np.eye(2))
    return AttentionParams(eye, eye, eye, eye, lambda_q1=Tensor(q1), lambda_k1=Tensor(k1),
                           lambda_q2=Tensor(q2), lambda_k2=Tensor(k2), lambda_init=lambda_init)


def test_diff_lambda_examples():
    z = [0.0]
    assert diff_lambda_value(_lam_params(z, z, z, z)).item() == 0.3
    val = diff_lambda_value(_lam_params([math.log(2)], [1.0], z, z)).item()
    assert abs(val - 1.3) < 1e-15


@given(st.lists(st.floats(-1, 1), min_size=8, max_size=8))
def test_diff_lambda_antisymmetric(v):
    a, b, c, d = (v[0:2], v[2:4], v[4:6], v[6:8])
    lam = diff_lambda_value(_lam_params(a, b, c, d)).item()
    swapped = diff_lambda_value(_lam_params(c, d, a, b)).item()
    assert abs(swapped - (2 * 0.3 - lam)) < 1e-12


# -- head-wise group norm ----------------------------------------------------

def test_groupnorm_examples():
    gain = Tensor(np.ones(4))
    assert np.array_equal(headwise_groupnorm(Tensor(np.zeros((2, 3, 4))), gain, 0.2).data,
                          np.zeros((2, 3, 4)))
    for c in (2.5, -0.7):
        out = headwise_groupnorm(Tensor(np.full((1, 2, 4), c)), gain, 0.2).data
        assert np.allclose(out, 0.8 * np.sign(c), atol=1e-6)


@given(seeds, st.floats(0.05, 0.95), st.floats(0.2, 3.0))
def test_groupnorm_rms_oracle(seed, lam, gain):
    hv = np.random.default_rng(seed).normal(size=(3, 5, 4))
    out = headwise_groupnorm(Tensor(hv), Tensor(np.full(4, gain)), lam).data
    rms = np.sqrt((out ** 2).mean(-1))
    ref = np.sqrt((hv ** 2).mean(-1))
    expected = (1 - lam) * gain * ref / np.sqrt(ref ** 2 + 1e-6)
    assert np.allclose(rms, expected, atol=1e-12)
    assert np.allclose(rms, (1 - lam) * gain, atol=1e-6 * (1 + 1 / ref.min() ** 2))


# -- full M-DGSA -------------------------------------------------------------

def test_mdgsa_single_token():
    rng = np.random.default_rng(3)
    params, layout = random_attention(rng, 4, 2)
    X = leaf(rng.normal(size=(1, 4)))
    Y, maps = mdgsa_forward(X, params, layout)
    assert np.array_equal(maps.a_plus, np.ones((2, 1, 1)))
    assert np.allclose(maps.fused[:, 0, 0], 2 * maps.gate[0] - 1, atol=1e-15)
    assert np.all(np.isfinite(Y.data))
    rep = ag.gradcheck(lambda: ag.tsum(mdgsa_forward(X, params, layout)[0]), [X] + [t for _, t in params.named()])
    assert rep.passed, rep.max_rel_error


def _excitatory_only(X, params, layout, l=1):
    q_p, _, k_p, _, V, _ = split_streams(X, params, layout)
    a_plus = scaled_softmax_scores(q_p, k_p)
    gate = token_head_gate(X, params.W_g, params.b_g)
    fused = fuse_gated_maps(a_plus, Tensor(np.zeros(a_plus.shape)), gate)
    H = headwise_groupnorm(fused @ V, params.norm_gain, lambda_init_schedule(l))
    return merge_heads(H) @ params.W_O


@settings(deadline=None, max_examples=30)
@given(seeds)
def test_excitatory_reduction(seed):
    rng = np.random.default_rng(seed)
    N, h, d = random_tiny(rng)
    params, layout = random_attention(rng, d, h, gate_bias=50.0)
    X = Tensor(rng.normal(size=(N, d)))
    Y, _ = mdgsa_forward(X, params, layout, l=2)
    assert np.allclose(Y.data, _excitatory_only(X, params, layout, l=2).data, atol=1e-5, rtol=0)


@settings(deadline=None, max_examples=30)
@given(seeds, st.booleans())
def test_mdgsa_matches_loop_oracle(seed, residual):
    rng = np.random.default_rng(seed)
    N, h, d = random_tiny(rng, max_n=5, max_h=2)
    params, layout = random_attention(rng, d, h)
    X = rng.normal(size=(N, d))
    l = int(rng.integers(1, 6))
    Y, maps = mdgsa_forward(Tensor(X), params, layout, l=l, residual=residual)
    P = {k: t.data for k, t in params.named()}
    Y_ref, fused_ref = mdgsa_oracle(X, P, h, lambda_init_schedule(l), residual=residual)
    assert np.allclose(Y.data, Y_ref, atol=1e-10, rtol=0)
    assert np.allclose(maps.fused, fused_ref, atol=1e-12, rtol=0)


def test_mdgsa_oracle_reference_instance():
    rng = np.random.default_rng(2024)
    params, layout = random_attention(rng, 4, 1)
    X = rng.normal(size=(3, 4))
    Y, _ = mdgsa_forward(Tensor(X), params, layout)
    Y_ref, _ = mdgsa_oracle(X, {k: t.data for k, t in params.named()}, 1, 0.2)
    assert np.max(np.abs(Y.data - np.array(Y_ref))) < 1e-10


def test_mdgsa_residual_sources():
    rng = np.random.default_rng(4)
    params, layout = random_attention(rng, 4, 1)
    X = Tensor(rng.normal(size=(3, 4)))
    base = mdgsa_forward(X, params, layout)[0].data
    with_q = mdgsa_forward(X, params, layout, residual=True)[0].data
    with_x = mdgsa_forward(X, params, layout, residual=True, residual_source="x")[0].data
    assert np.allclose(with_q - base, X.data @ params.W_Q.data, atol=1e-14)
    assert np.allclose(with_x - base, X.data, atol=1e-14)


@settings(deadline=None, max_examples=30)
@given(seeds)
def test_mdgsa_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    N, h, d = random_tiny(rng)
    params, layout = random_attention(rng, d, h)
    X = rng.normal(size=(N, d))
    perm = rng.permutation(N)
    Y = mdgsa_forward(Tensor(X), params, layout)[0].data
    Yp = mdgsa_forward(Tensor(X[perm]), params, layout)[0].data
    assert np.allclose(Yp, Y[perm], atol=1e-10, rtol=0)


def test_mdgsa_block_gradcheck():
    rng = np.random.default_rng(5)
    params, layout = random_attention(rng, 8, 2)
    X = leaf(rng.normal(size=(5, 8)), "X")
    leaves = [X] + [t for _, t in params.named()]
    names = ["X"] + [k for k, _ in params.named()]
    rep = ag.gradcheck(lambda: ag.tsum(ag.sigmoid(mdgsa_forward(X, params, layout, l=3, residual=True)[0])),
                       leaves, h=1e-5, tol=1e-4, names=names)
    assert rep.passed, rep.max_rel_error
    assert {"W_g", "b_g", "norm_gain"} <= set(rep.max_rel_error)


def test_mdgsa_batched_matches_per_sequence():
    rng = np.random.default_rng(6)
    params, layout = random_attention(rng, 8, 2)
    X = rng.normal(size=(3, 4, 8))
    batched = mdgsa_forward(Tensor(X), params, layout)[0].data
    for b in range(3):
        single = mdgsa_forward(Tensor(X[b]), params, layout)[0].data
        assert np.allclose(batched[b], single, atol=1e-13)


def test_key_mask_ignores_padding():
    rng = np.random.default_rng(7)
    params, layout = random_attention(rng, 4, 1)
    X = rng.normal(size=(1, 4, 4))
    mask = np.array([[True, True, True, False]])
    Y, maps = mdgsa_forward(Tensor(X), params, layout, key_mask=mask)
    short = mdgsa_forward(Tensor(X[:, :3]), params, layout)[0].data
    assert np.allclose(Y.data[:, :3], short, atol=1e-12)
    assert np.all(maps.a_plus[..., 3] < 1e-300)


# -- differential attention --------------------------------------------------

def test_diff_attn_rows_sum_with_zero_lambda_vectors():
    rng = np.random.default_rng(8)
    params, layout = random_attention(rng, 8, 2, variant="diff", lambda_init=0.35)
    for k in ("lambda_q1", "lambda_k1", "lambda_q2", "lambda_k2"):
        getattr(params, k).data[:] = 0.0
    _, maps = diff_attn_forward(Tensor(rng.normal(size=(4, 8))), params, layout)
    assert np.allclose(maps.fused.sum(-1), 1 - 0.35, atol=1e-12)


def test_diff_attn_equal_maps_unit_lambda_zero():
    rng = np.random.default_rng(9)
    params, layout = random_attention(rng, 4, 1, variant="diff", lambda_init=0.5)
    # identical streams: copy excitatory columns into inhibitory ones
    for W in (params.W_Q, params.W_K):
        W.data[:, 2:] = W.data[:, :2]
    params.lambda_q1.data[:] = [math.log(1.5), 0.0]
    params.lambda_k1.data[:] = [1.0, 0.0]
    params.lambda_q2.data[:] = 0.0
    params.lambda_k2.data[:] = 0.0
    assert abs(diff_lambda_value(params).item() - 1.0) < 1e-15
    _, maps = diff_attn_forward(Tensor(rng.normal(size=(3, 4))), params, layout)
    assert np.allclose(maps.fused, 0.0, atol=1e-15)


def _gate_for(g, h, d):
    return Tensor(np.zeros((d, h))), Tensor(np.full(h, math.log(g / (1 - g))))


@settings(deadline=None, max_examples=30)
@given(seeds)
def test_constant_gate_matches_diff_attn(seed):
    rng = np.random.default_rng(seed)
    N, h, d = random_tiny(rng)
    diff, layout = random_attention(rng, d, h, variant="diff", lambda_init=0.4)
    lam = diff_lambda_value(diff).item()
    W_g, b_g = _gate_for(1 / (1 + lam), h, d)
    gated = AttentionParams(diff.W_Q, diff.W_K, diff.W_V, diff.W_O, W_g=W_g, b_g=b_g,
                            norm_gain=diff.norm_gain)
    X = Tensor(rng.normal(size=(N, d)))
    _, m_diff = diff_attn_forward(X, diff, layout)
    _, m_gate = mdgsa_forward(X, gated, layout)
    assert np.allclose(m_gate.fused, m_diff.fused / (1 + lam), atol=1e-10, rtol=0)


def test_diff_attn_gradcheck_covers_lambda_vectors():
    rng = np.random.default_rng(10)
    params, layout = random_attention(rng, 8, 2, variant="diff", lambda_init=0.3)
    X = Tensor(rng.normal(size=(4, 8)))
    names, leaves = zip(*params.named())
    rep = ag.gradcheck(lambda: ag.tsum(ag.sigmoid(diff_attn_forward(X, params, layout)[0])), leaves,
                       names=names)
    assert rep.passed, rep.max_rel_error
    assert "lambda_q2" in rep.max_rel_error


# -- vanilla -----------------------------------------------------------------

def _vanilla_weights(rng, d):
    return [Tensor(rng.normal(0, 0.7, (d, d))) for _ in range(4)]


def test_vanilla_single_token():
    rng = np.random.default_rng(12)
    W = _vanilla_weights(rng, 4)
    x = rng.normal(size=(1, 4))
    Y, _ = vanilla_mha_forward(Tensor(x), *W, h=2)
    assert np.allclose(Y.data, x @ W[2].data @ W[3].data, atol=1e-14)


def test_vanilla_identical_tokens_uniform():
    rng = np.random.default_rng(13)
    W = _vanilla_weights(rng, 4)
    X = np.tile(rng.normal(size=(1, 4)), (5, 1))
    _, maps = vanilla_mha_forward(Tensor(X), *W, h=2)
    assert np.allclose(maps.fused, 0.2, atol=1e-15)


@settings(deadline=None, max_examples=20)
@given(seeds, st.sampled_from([1, 2]))
def test_vanilla_matches_loop_oracle(seed, h):
    rng = np.random.default_rng(seed)
    W = _vanilla_weights(rng, 4)
    X = rng.normal(size=(int(rng.integers(1, 5)), 4))
    Y, maps = vanilla_mha_forward(Tensor(X), *W, h=h)
    Y_ref, maps_ref = vanilla_oracle(X, *(w.data for w in W), h)
    assert np.allclose(Y.data, Y_ref, atol=1e-10, rtol=0)
    assert np.allclose(maps.fused, maps_ref, atol=1e-12)


# -- lateral inhibition reference ---------------------------------------------

def test_lateral_inhibition_examples():
    e = np.array([0.3, -1.2, 2.0])
    assert np.array_equal(lateral_inhibition_reference(e, 0.0, [[1], [0, 2], [1]]), e)
    relu = lambda v: np.maximum(v, 0.0)
    out = lateral_inhibition_reference([1.0, 0.5], 0.5, [[1], [0]], relu)
    assert np.allclose(out, [0.75, 0.0])


@given(st.floats(0.01, 3.0), st.floats(0, 0.5), st.integers(2, 6))
def test_lateral_inhibition_uniform(c, alpha, k):
    e = np.full(k + 1, c)
    neighborhood = [[j for j in range(k + 1) if j != i] for i in range(k + 1)]
    out = lateral_inhibition_reference(e, alpha, neighborhood, np.tanh)
    assert np.allclose(out, np.tanh(c * (1 - alpha * k)))


def test_lateral_inhibition_rejects_negative_alpha():
    with pytest.raises(ConfigError):
        lateral_inhibition_reference([1.0], -0.1, [[]])
