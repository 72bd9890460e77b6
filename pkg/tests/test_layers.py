import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lyrichan import autodiff as ad
from lyrichan.autodiff import DimensionError, Tensor
from lyrichan.layers import (AttentionParams, GruParams, attention, bidirectional_gru, dropout,
                             gru_step, layer, mean_pool)

import oracles
from helpers import as_params, random_gru_params
from oracles import relative_error


def zero_gru(D, H):
    return as_params(GruParams, {k: np.zeros_like(v)
                                 for k, v in random_gru_params(np.random.default_rng(0), D, H).items()})


def random_att(rng, M, A, scale=1.0):
    return {"W_a": rng.uniform(-scale, scale, (A, M)), "b_a": rng.uniform(-scale, scale, A),
            "u_a": rng.uniform(-scale, scale, A)}


def f64(x):
    return Tensor(x, dtype=np.float64)


# -- gru_step -------------------------------------------------------------------------

def test_gru_step_zero_params_half_state():
    h = gru_step(zero_gru(1, 1), f64([0.7]), f64([1.0]))
    np.testing.assert_array_equal(h.data, [0.5])


def test_gru_step_zero_fixed_point():
    h = gru_step(zero_gru(2, 3), f64([0.3, -1.0]), f64(np.zeros(3)))
    np.testing.assert_array_equal(h.data, np.zeros(3))


def test_gru_step_scalar_oracle():
    rng = np.random.default_rng(21)
    for _ in range(20):
        P = random_gru_params(rng, 1, 1, scale=2.0)
        x, h0 = rng.uniform(-2, 2, 1), rng.uniform(-1, 1, 1)
        got = gru_step(as_params(GruParams, P), f64(x), f64(h0)).data
        assert relative_error(got, oracles.gru_step(P, x, h0), floor=1e-300).max() < 1e-12


def test_gru_step_shape_mismatch():
    with pytest.raises(DimensionError):
        gru_step(zero_gru(2, 3), f64([1.0, 2.0, 3.0]), f64(np.zeros(3)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gates_open_interval_and_convex_combination(seed):
    rng = np.random.default_rng(seed)
    D, H = 3, 4
    P = random_gru_params(rng, D, H, scale=1.5)
    x, h0 = rng.uniform(-2, 2, D), rng.uniform(-1, 1, H)
    z = 1 / (1 + np.exp(-(P["W_z"] @ x + P["U_z"] @ h0 + P["b_z"])))
    r = 1 / (1 + np.exp(-(P["W_r"] @ x + P["U_r"] @ h0 + P["b_r"])))
    cand = np.tanh(P["W_h"] @ x + r * (P["U_h"] @ h0) + P["b_h"])
    assert np.all((z > 0) & (z < 1)) and np.all((r > 0) & (r < 1))
    h = gru_step(as_params(GruParams, P), f64(x), f64(h0)).data
    lo, hi = np.minimum(h0, cand), np.maximum(h0, cand)
    assert np.all(h >= lo - 1e-15) and np.all(h <= hi + 1e-15)


# -- bidirectional GRU ----------------------------------------------------------------

def test_bigru_length_one():
    rng = np.random.default_rng(2)
    pf, pb = (as_params(GruParams, random_gru_params(rng, 2, 3)) for _ in range(2))
    x = rng.normal(size=(1, 2))
    out = bidirectional_gru(pf, pb, f64(x)).data
    assert out.shape == (1, 6)
    zero = f64(np.zeros(3))
    np.testing.assert_array_equal(out[0, :3], gru_step(pf, f64(x[0]), zero).data)
    np.testing.assert_array_equal(out[0, 3:], gru_step(pb, f64(x[0]), zero).data)


def test_bigru_palindrome_symmetry():
    rng = np.random.default_rng(3)
    p = as_params(GruParams, random_gru_params(rng, 2, 3))
    a, b = rng.normal(size=2), rng.normal(size=2)
    xs = np.stack([a, b, rng.normal(size=2), b, a])
    out = bidirectional_gru(p, p, f64(xs)).data
    np.testing.assert_allclose(out[:, :3], out[::-1, 3:], rtol=0, atol=1e-15)


def test_bigru_unrolled_oracle():
    rng = np.random.default_rng(4)
    Pf, Pb = random_gru_params(rng, 3, 2), random_gru_params(rng, 3, 2)
    xs = rng.uniform(-2, 2, (3, 3))
    got = bidirectional_gru(as_params(GruParams, Pf), as_params(GruParams, Pb), f64(xs)).data
    want = oracles.bigru(Pf, Pb, xs.tolist())
    assert relative_error(got, want, floor=1e-300).max() < 1e-12


def test_bigru_batched_equals_per_sequence():
    rng = np.random.default_rng(5)
    pf, pb = (as_params(GruParams, random_gru_params(rng, 2, 3)) for _ in range(2))
    xs = rng.normal(size=(4, 5, 2))
    batched = bidirectional_gru(pf, pb, f64(xs)).data
    for n in range(4):
        np.testing.assert_allclose(batched[n], bidirectional_gru(pf, pb, f64(xs[n])).data,
                                   rtol=0, atol=1e-15)


def test_bigru_empty_sequence():
    p = zero_gru(2, 3)
    with pytest.raises(DimensionError):
        bidirectional_gru(p, p, f64(np.zeros((0, 2))))


# -- attention ------------------------------------------------------------------------

def test_attention_single_position():
    rng = np.random.default_rng(6)
    p = as_params(AttentionParams, random_att(rng, 4, 3))
    h = rng.normal(size=(1, 4))
    s, w, _ = attention(p, f64(h))
    np.testing.assert_array_equal(w.data, [1.0])
    np.testing.assert_array_equal(s.data, h[0])


def test_attention_zero_projection_is_mean():
    rng = np.random.default_rng(7)
    att = random_att(rng, 4, 3)
    att["W_a"][:] = 0.0
    att["b_a"][:] = 0.0
    hs = rng.normal(size=(5, 4))
    s, w, _ = attention(as_params(AttentionParams, att), f64(hs))
    np.testing.assert_allclose(w.data, np.full(5, 0.2), rtol=1e-15)
    np.testing.assert_allclose(s.data, hs.mean(axis=0), rtol=1e-14)


def test_attention_two_positions_scalar_oracle():
    rng = np.random.default_rng(8)
    for _ in range(20):
        att = random_att(rng, 3, 1, scale=2.0)
        hs = rng.uniform(-2, 2, (2, 3))
        s, w, _ = attention(as_params(AttentionParams, att), f64(hs))
        s_o, w_o = oracles.attention(att, hs.tolist())
        assert relative_error(w.data, w_o, floor=1e-300).max() < 1e-12
        assert relative_error(s.data, s_o, floor=1e-300).max() < 1e-12


def test_attention_fully_masked_is_zero_and_flagged():
    rng = np.random.default_rng(9)
    p = as_params(AttentionParams, random_att(rng, 2, 3))
    hs = rng.normal(size=(2, 4, 2))
    mask = np.array([[True, False, True, False], [False] * 4])
    s, w, degenerate = attention(p, f64(hs), mask)
    np.testing.assert_array_equal(degenerate, [False, True])
    np.testing.assert_array_equal(s.data[1], 0.0)
    np.testing.assert_array_equal(w.data[1], 0.0)


def test_attention_gradient_flows_through_masked_batch():
    with ad.precision("float64"):
        rng = np.random.default_rng(10)
        p = as_params(AttentionParams, random_att(rng, 2, 3))
        hs = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True, dtype=np.float64)
        mask = np.array([[True, True, False], [False, False, False]])

        def f():
            return (attention(p, hs, mask)[0] * Tensor(np.arange(4.0).reshape(2, 2))).sum()

        f().backward()
        tensors = [hs, *p.tensors().values()]
        numeric = ad.numerical_gradient(lambda: f().item(), tensors)
    for t, n in zip(tensors, numeric):
        assert relative_error(t.grad, n).max() < 1e-6
    np.testing.assert_array_equal(hs.grad[0, 2], 0.0)  # masked position gets nothing


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_attention_invariants(seed, T):
    rng = np.random.default_rng(seed)
    M, A = 4, 3
    p = as_params(AttentionParams, random_att(rng, M, A, scale=2.0))
    hs = rng.uniform(-3, 3, (T, M))
    mask = rng.random(T) < 0.7
    mask[rng.integers(T)] = True
    s, w, _ = attention(p, f64(hs), mask)
    w = w.data

    assert np.all(w[mask] >= 0)
    assert abs(w[mask].sum() - 1.0) < 1e-6
    assert np.all(w[~mask] < 1e-12)

    # Masked content does not reach s.
    scribbled = hs.copy()
    scribbled[~mask] = rng.uniform(-100, 100, ((~mask).sum(), M))
    s2 = attention(p, f64(scribbled), mask)[0].data
    assert np.max(np.abs(s2 - s.data)) < 1e-9

    # Permuting (h_i, mask_i) pairs leaves s unchanged.
    perm = rng.permutation(T)
    s3 = attention(p, f64(hs[perm]), mask[perm])[0].data
    np.testing.assert_allclose(s3, s.data, rtol=0, atol=1e-12)


# -- layer ----------------------------------------------------------------------------

def test_layer_single_element_is_concatenated_state():
    rng = np.random.default_rng(11)
    pf, pb = (as_params(GruParams, random_gru_params(rng, 2, 3)) for _ in range(2))
    att = as_params(AttentionParams, random_att(rng, 6, 4))
    x = f64(rng.normal(size=(1, 2)))
    s, w = layer(pf, pb, att, x)
    np.testing.assert_array_equal(s.data, bidirectional_gru(pf, pb, x).data[0])
    np.testing.assert_array_equal(w.data, [1.0])


def test_layer_zero_attention_equals_mean_layer():
    rng = np.random.default_rng(12)
    pf, pb = (as_params(GruParams, random_gru_params(rng, 2, 3)) for _ in range(2))
    att = random_att(rng, 6, 4)
    att["W_a"][:] = 0
    att["b_a"][:] = 0
    xs = f64(rng.normal(size=(5, 2)))
    s_att, _ = layer(pf, pb, as_params(AttentionParams, att), xs)
    s_mean, w = layer(pf, pb, None, xs)
    assert w is None
    np.testing.assert_allclose(s_att.data, s_mean.data, rtol=1e-14)


def test_layer_composed_oracle():
    rng = np.random.default_rng(13)
    Pf, Pb = random_gru_params(rng, 4, 2), random_gru_params(rng, 4, 2)
    att = random_att(rng, 4, 3)
    xs = rng.uniform(-2, 2, (3, 4))
    s, w = layer(as_params(GruParams, Pf), as_params(GruParams, Pb),
                 as_params(AttentionParams, att), f64(xs))
    s_o, w_o = oracles.attention(att, oracles.bigru(Pf, Pb, xs.tolist()))
    assert relative_error(s.data, s_o, floor=1e-300).max() < 1e-12
    assert relative_error(w.data, w_o, floor=1e-300).max() < 1e-12


def test_mean_pool_masked():
    hs = np.arange(12.0).reshape(3, 4)
    out = mean_pool(f64(hs), np.array([True, False, True])).data
    np.testing.assert_array_equal(out, (hs[0] + hs[2]) / 2)


def test_layer_gradients_finite_differences():
    with ad.precision("float64"):
        rng = np.random.default_rng(14)
        pf, pb = (as_params(GruParams, random_gru_params(rng, 2, 3)) for _ in range(2))
        att = as_params(AttentionParams, random_att(rng, 6, 4))
        xs = Tensor(rng.uniform(-2, 2, (2, 4, 2)), requires_grad=True, dtype=np.float64)
        mask = np.array([[True, True, True, False], [True, False, False, False]])
        weights = Tensor(rng.normal(size=(2, 6)))

        def f():
            return (layer(pf, pb, att, xs, mask)[0] * weights).sum()

        f().backward()
        tensors = [xs, *pf.tensors().values(), *pb.tensors().values(), *att.tensors().values()]
        numeric = ad.numerical_gradient(lambda: f().item(), tensors)
    worst = max(relative_error(t.grad, n).max() for t, n in zip(tensors, numeric))
    assert worst < 1e-4


# -- dropout --------------------------------------------------------------------------

def test_dropout_eval_and_zero_p_are_identity():
    x = f64(np.arange(6.0))
    rng = np.random.default_rng(0)
    assert dropout(x, 0.5, False, rng) is x
    assert dropout(x, 0.0, True, rng) is x


def test_dropout_statistics():
    rng = np.random.default_rng(15)
    x = f64(np.ones(1_000_000))
    out = dropout(x, 0.5, True, rng).data
    survivors = out != 0
    assert abs(survivors.mean() - 0.5) < 0.002
    np.testing.assert_array_equal(out[survivors], 2.0)


def test_dropout_rejects_bad_p():
    with pytest.raises(ValueError):
        dropout(f64([1.0]), 1.0, True, np.random.default_rng(0))
