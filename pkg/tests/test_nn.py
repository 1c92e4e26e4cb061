import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitcomer import oracles
from vitcomer.autodiff import ShapeError, Tensor, tensor
from vitcomer.gradcheck import check_function
from vitcomer.nn import (FFN, Attention, Conv2d, LayerNorm, Linear, bilinear_resize,
                         bilinear_sample, conv2d, cross_entropy, ffn_hidden, layer_norm, linear,
                         mhsa, resize_matrix, softmax)


def test_linear_count():
    d = 7
    assert Linear.count(d, d) == d * d + d
    assert Linear(d, d, np.random.default_rng(0)).num_parameters() == d * d + d


def test_linear_matches_affine(rng):
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), rng.standard_normal(2)
    np.testing.assert_allclose(linear(tensor(x), tensor(w), tensor(b)).data, x @ w.T + b)
    assert check_function(linear, [x, w, b]) < 1e-6


# conv2d

def test_conv_1x1_identity(rng):
    x = rng.standard_normal((1, 5, 6))
    out = conv2d(tensor(x), tensor(np.ones((1, 1, 1, 1))), tensor(np.zeros(1)), 1, 0)
    assert np.array_equal(out.data, x)


def test_depthwise_delta_kernel_identity(rng):
    x = rng.standard_normal((3, 5, 5))
    k = np.zeros((3, 1, 3, 3))
    k[:, 0, 1, 1] = 1.0
    out = conv2d(tensor(x), tensor(k), tensor(np.zeros(3)), 1, 1, groups=3)
    assert np.array_equal(out.data, x)


def test_conv_random_3x3_vs_loop_oracle(rng):
    x, k, b = rng.standard_normal((1, 5, 5)), rng.standard_normal((1, 1, 3, 3)), rng.standard_normal(1)
    got = conv2d(tensor(x), tensor(k), tensor(b), 1, 1).data
    np.testing.assert_allclose(got, oracles.conv2d(x, k, b, 1, 1), rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.integers(1, 4), k=st.sampled_from([1, 3, 5]),
       depthwise=st.booleans(), stride=st.sampled_from([1, 2]), h=st.integers(1, 7),
       w=st.integers(1, 7))
def test_conv_vs_loop_oracle(seed, c, k, depthwise, stride, h, w):
    rng = np.random.default_rng(seed)
    groups = c if depthwise else 1
    o = c if depthwise else 3
    x, wt, b = rng.standard_normal((c, h, w)), rng.standard_normal((o, c // groups, k, k)), rng.standard_normal(o)
    got = conv2d(tensor(x), tensor(wt), tensor(b), stride, k // 2, groups).data
    np.testing.assert_allclose(got, oracles.conv2d(x, wt, b, stride, k // 2, groups), rtol=0, atol=1e-12)


def test_depthwise_translation_equivariance(rng):
    x = rng.standard_normal((2, 9, 9))
    k = rng.standard_normal((2, 1, 3, 3))
    shifted = np.zeros_like(x)
    shifted[:, 1:, :] = x[:, :-1, :]
    a = conv2d(tensor(x), tensor(k), None, 1, 1, 2).data
    b = conv2d(tensor(shifted), tensor(k), None, 1, 1, 2).data
    # kernel support stays inside the original domain for rows 2..7 of the shifted output
    np.testing.assert_allclose(b[:, 2:8, 1:-1], a[:, 1:7, 1:-1], rtol=0, atol=1e-12)


def test_conv_gradcheck(rng):
    x, k, b = rng.standard_normal((2, 5, 4)), rng.standard_normal((2, 1, 3, 3)), rng.standard_normal(2)
    assert check_function(lambda a, w, c: conv2d(a, w, c, 2, 1, 2), [x, k, b]) < 1e-5


def test_conv_group_mismatch():
    with pytest.raises(ShapeError):
        Conv2d(3, 4, 3, groups=2)


# layer norm, softmax

def test_layer_norm_constant_row_is_zero():
    out = layer_norm(tensor(np.full((2, 4), 3.0)), tensor(np.ones(4)), tensor(np.zeros(4)))
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_layer_norm_standardizes(rng):
    out = LayerNorm(16)(tensor(rng.standard_normal((5, 16)) * 3 + 1)).data
    assert np.abs(out.mean(axis=1)).max() < 1e-10
    assert np.abs(out.var(axis=1) - 1).max() < 1e-6


def test_layer_norm_gradcheck(rng):
    args = [rng.standard_normal((3, 4)), rng.standard_normal(4), rng.standard_normal(4)]
    assert check_function(layer_norm, args) < 1e-5


def test_softmax_properties(rng):
    np.testing.assert_allclose(softmax(tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    x = rng.standard_normal((4, 6))
    np.testing.assert_allclose(softmax(tensor(x + 5.0)).data, softmax(tensor(x)).data, rtol=0, atol=1e-15)
    assert np.abs(softmax(tensor(x), axis=1).data.sum(axis=1) - 1).max() < 1e-12
    assert check_function(lambda t: softmax(t, axis=1), [rng.standard_normal((2, 5))]) < 1e-5


# attention

def _attention(rng, d, heads):
    att = Attention(d, heads, rng)
    for lin in (att.qkv, att.proj):
        lin.weight.data = rng.normal(0, 0.5, lin.weight.shape)
        lin.bias.data = rng.normal(0, 0.1, lin.bias.shape)
    return att


def test_single_token_attention_is_value_chain(rng):
    att = _attention(rng, 4, 2)
    x = rng.standard_normal((1, 4))
    out, maps = att(tensor(x), return_attn=True)
    assert all(np.array_equal(m.data, [[1.0]]) for m in maps)
    v = (x @ att.qkv.weight.data.T + att.qkv.bias.data)[:, 8:]
    np.testing.assert_allclose(out.data, v @ att.proj.weight.data.T + att.proj.bias.data, atol=1e-15)


def test_attention_rows_are_stochastic(rng):
    att = _attention(rng, 8, 2)
    _, maps = att(tensor(rng.standard_normal((5, 8))), return_attn=True)
    for m in maps:
        assert np.all(m.data >= 0) and np.abs(m.data.sum(axis=1) - 1).max() < 1e-12


def test_mhsa_three_tokens_vs_dense_oracle(rng):
    att = _attention(rng, 4, 1)
    x = rng.standard_normal((3, 4))
    want = oracles.mhsa(x, att.qkv.weight.data, att.qkv.bias.data, att.proj.weight.data,
                        att.proj.bias.data, 1)
    np.testing.assert_allclose(att(tensor(x)).data, want, rtol=0, atol=1e-12)


def test_mhsa_gradcheck(rng):
    att = _attention(rng, 4, 2)
    x = rng.standard_normal((3, 4))
    assert check_function(lambda t: mhsa(t, att.qkv, att.proj, 2), [x]) < 1e-5


# resize and sampling

def test_resize_same_size_is_identity(rng):
    x = tensor(rng.standard_normal((2, 5, 3)))
    assert np.array_equal(bilinear_resize(x, 5, 3).data, x.data)


@pytest.mark.parametrize("size", [(1, 1), (3, 7), (8, 8), (13, 2)])
def test_resize_constant(size):
    out = bilinear_resize(tensor(np.full((2, 4, 4), 1.25)), *size).data
    np.testing.assert_allclose(out, 1.25, rtol=0, atol=1e-15)


def test_resize_reproduces_ramp_at_interior():
    ramp = np.broadcast_to(np.arange(4.0), (1, 4, 4)).copy()
    out = bilinear_resize(tensor(ramp), 8, 8).data[0]
    # destination x maps to source (x + 0.5) / 2 - 0.5; interior is source in [0, 3]
    xs = (np.arange(8) + 0.5) / 2 - 0.5
    inside = (xs >= 0) & (xs <= 3)
    np.testing.assert_allclose(out[:, inside], np.broadcast_to(xs[inside], (8, inside.sum())),
                               rtol=0, atol=1e-12)


def test_resize_matrix_rows_sum_to_one():
    for n_in, n_out in ((4, 8), (8, 4), (3, 5), (6, 2)):
        np.testing.assert_allclose(resize_matrix(n_in, n_out).sum(axis=1), 1.0, atol=1e-15)


def test_resize_gradcheck(rng):
    assert check_function(lambda t: bilinear_resize(t, 5, 3), [rng.standard_normal((2, 4, 4))]) < 1e-6


def test_sample_exact_at_nodes(rng):
    x = rng.standard_normal((3, 4, 5))
    pts = np.array([[0.0, 0.0], [4.0, 3.0], [2.0, 1.0]])
    out = bilinear_sample(tensor(x), tensor(pts)).data
    np.testing.assert_array_equal(out, x[:, [0, 3, 1], [0, 4, 2]].T)


def test_sample_outside_is_zero(rng):
    x = rng.standard_normal((2, 4, 4))
    out = bilinear_sample(tensor(x), tensor([[-1.5, 0.0], [4.2, 1.0], [1.0, 9.0]])).data
    assert np.array_equal(out, np.zeros((3, 2)))


def test_sample_matches_scalar_formula(rng):
    x = rng.standard_normal((2, 4, 5))
    pts = rng.uniform(-1, 5, (10, 2))
    got = bilinear_sample(tensor(x), tensor(pts)).data
    want = np.array([[oracles.bilinear_point(x[c].tolist(), px, py) for c in range(2)] for px, py in pts])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-14)


def test_sample_point_gradient(rng):
    x = rng.standard_normal((2, 4, 5))
    pts = np.floor(rng.uniform(0, 3, (6, 2))) + rng.uniform(0.2, 0.8, (6, 2))
    assert check_function(lambda m, p: bilinear_sample(m, p), [x, pts]) < 1e-5


# FFN, cross-entropy

def test_ffn_zero_weights_zero_output(rng):
    f = FFN(4, 0.25)
    assert np.array_equal(f(tensor(rng.standard_normal((3, 4)))).data, np.zeros((3, 4)))


@pytest.mark.parametrize("ratio", [0.25, 0.5, 1.0, 4.0, 0.3])
def test_ffn_keeps_dims(rng, ratio):
    f = FFN(6, ratio, rng)
    assert f(tensor(rng.standard_normal((2, 6)))).shape == (2, 6)
    assert f.fc1.d_out == ffn_hidden(6, ratio)


def test_ffn_gradcheck(rng):
    f = FFN(4, 0.25, rng)
    f.fc1.weight.data = rng.standard_normal(f.fc1.weight.shape)
    f.fc2.weight.data = rng.standard_normal(f.fc2.weight.shape)
    assert check_function(f, [rng.standard_normal((2, 4))]) < 1e-5


def test_uniform_logits_give_ln4(rng):
    labels = rng.integers(0, 4, (6, 5))
    assert abs(cross_entropy(tensor(np.zeros((4, 6, 5))), labels).item() - math.log(4)) < 1e-15


def test_cross_entropy_gradcheck(rng):
    labels = rng.integers(0, 3, (2, 3))
    assert check_function(lambda z: cross_entropy(z, labels), [rng.standard_normal((3, 2, 3))]) < 1e-6
