import numpy as np
import pytest

import oracles
from psmstereo import tensor_core as tc
from psmstereo.tensor_core import Graph, Parameter, Tensor, adam_step, backward, no_grad


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------- tensor basics

def test_grad_shape_matches_data_and_size_invariant():
    x = T(np.ones((2, 3, 4)), grad=True)
    assert x.size == 24
    backward(tc.sum(tc.mul(x, x)))
    assert x.grad.shape == x.shape


def test_backward_sum_gives_ones():
    x = T(np.arange(6.0).reshape(2, 3), grad=True)
    backward(tc.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_sum_of_squares_gives_2x():
    x = T(np.array([1.5, -2.0, 3.0]), grad=True)
    backward(tc.sum(x * x))
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar():
    x = T(np.ones(3), grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)


def test_repeated_backward_accumulates():
    x = T(np.ones(2), grad=True)
    backward(tc.sum(x))
    backward(tc.sum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_unused_branch_gets_zero_grad():
    a, b = T([1.0, 2.0], grad=True), T([3.0, 4.0], grad=True)
    backward(tc.sum(a + b * 0.0))
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])


def test_graph_topological_and_shared_node_visited_once():
    x = T([2.0], grad=True)
    y = x * x
    z = y + y  # y feeds z twice
    loss = tc.sum(z)
    order = Graph.from_output(loss).nodes
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]
    assert len(order) == len({id(n) for n in order})
    backward(loss)
    assert x.grad[0] == pytest.approx(8.0)  # d(2x^2)/dx


def test_no_grad_records_nothing():
    x = T([1.0], grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


def test_forward_replay_is_bit_identical():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3))
    a = tc.relu(tc.conv2d(T(x), T(w), padding=1)).data
    b = tc.relu(tc.conv2d(T(x), T(w), padding=1)).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- conv

def test_conv2d_identity_kernel():
    out = tc.conv2d(T(np.full((1, 1, 1, 1), 5.0)), T(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, [[[[5.0]]]])


def test_conv2d_sum_kernel():
    out = tc.conv2d(T([[[[1, 2], [3, 4]]]]), T(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, [[[[10.0]]]])


def test_conv2d_matches_naive_oracle_strided_dilated():
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    got = tc.conv2d(T(x), T(w), T(b), stride=2, padding=1, dilation=2).data
    np.testing.assert_allclose(got, oracles.conv2d(x, w, b, 2, 1, 2), rtol=0, atol=1e-12)


def test_conv2d_output_size_formula():
    x = T(np.zeros((1, 1, 11, 9)))
    out = tc.conv2d(x, T(np.zeros((2, 1, 3, 3))), stride=2, padding=2, dilation=3)
    assert out.shape == (1, 2, (11 + 4 - 6 - 1) // 2 + 1, (9 + 4 - 6 - 1) // 2 + 1)


def test_conv2d_channel_mismatch_names_both_shapes():
    with pytest.raises(ValueError) as info:
        tc.conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 3, 3, 3))))
    assert "(1, 2, 4, 4)" in str(info.value) and "(1, 3, 3, 3)" in str(info.value)


def test_conv3d_trivial_cases():
    np.testing.assert_array_equal(tc.conv3d(T(np.full((1,) * 5, 7.0)), T(np.ones((1,) * 5))).data.ravel(), [7.0])
    out = tc.conv3d(T(np.ones((1, 1, 2, 2, 2))), T(np.ones((1, 1, 2, 2, 2))))
    np.testing.assert_array_equal(out.data.ravel(), [8.0])


def test_conv3d_matches_naive_oracle():
    rng = np.random.default_rng(4)
    x, w, b = rng.standard_normal((1, 2, 4, 4, 4)), rng.standard_normal((2, 2, 3, 3, 3)), rng.standard_normal(2)
    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        got = tc.conv3d(T(x), T(w), T(b), stride=stride, padding=pad).data
        np.testing.assert_allclose(got, oracles.conv3d(x, w, b, stride, pad), rtol=0, atol=1e-12)


def test_conv_transpose3d_impulse_stamps_kernel():
    w = np.random.default_rng(5).standard_normal((1, 1, 3, 3, 3))
    x = np.zeros((1, 1, 3, 3, 3))
    x[0, 0, 1, 1, 1] = 1.0
    out = tc.conv_transpose3d(T(x), T(w)).data
    assert out.shape == (1, 1, 6, 6, 6)
    # input index 1 lands at output 2*1 - 1 = 1; the kernel covers 1..3
    expected = np.zeros((6, 6, 6))
    expected[1:4, 1:4, 1:4] = w[0, 0]
    np.testing.assert_array_equal(out[0, 0], expected)


def test_conv_transpose3d_zeros_and_doubling():
    out = tc.conv_transpose3d(T(np.zeros((2, 3, 2, 3, 4))), T(np.ones((3, 5, 3, 3, 3))))
    assert out.shape == (2, 5, 4, 6, 8)
    assert not out.data.any()


def test_conv_transpose3d_is_adjoint_of_conv3d():
    rng = np.random.default_rng(6)
    w = rng.standard_normal((3, 2, 3, 3, 3))  # conv3d: 2 -> 3 channels; transpose: 3 -> 2
    x = rng.standard_normal((1, 3, 2, 3, 2))
    z = T(np.zeros((1, 2, 4, 6, 4)), grad=True)
    y = tc.conv3d(z, T(w), stride=2, padding=1)
    assert y.shape == x.shape
    backward(tc.sum(tc.mul(y, x)))
    got = tc.conv_transpose3d(T(x), T(w)).data
    assert np.abs(got - z.grad).max() <= 1e-12


def test_conv_transpose3d_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        tc.conv_transpose3d(T(np.zeros((1, 2, 2, 2, 2))), T(np.zeros((3, 1, 3, 3, 3))))


# ---------------------------------------------------------------- batch norm

def _bn(x, gamma, beta, training=True, rm=None, rv=None):
    C = x.shape[1]
    rm = np.zeros(C) if rm is None else rm
    rv = np.ones(C) if rv is None else rv
    return tc.batch_norm(T(x), T(gamma), T(beta), rm, rv, training=training), rm, rv


def test_batch_norm_standardized_input_passes_through():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 2, 5, 5))
    axes = (0, 2, 3)
    x = (x - x.mean(axis=axes, keepdims=True)) / x.std(axis=axes, keepdims=True)
    out, _, _ = _bn(x, np.ones(2), np.zeros(2))
    # the only deviation is the 1/sqrt(1 + eps) factor
    np.testing.assert_allclose(out.data, x, rtol=1e-5, atol=0)
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_batch_norm_zero_gamma_gives_beta():
    x = np.random.default_rng(8).standard_normal((2, 3, 2, 2))
    out, _, _ = _bn(x, np.zeros(3), np.array([1.0, -2.0, 0.5]))
    np.testing.assert_array_equal(out.data, np.broadcast_to(np.array([1.0, -2.0, 0.5]).reshape(1, 3, 1, 1), x.shape))


def test_batch_norm_matches_direct_statistics():
    rng = np.random.default_rng(9)
    x, g, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal(3), rng.standard_normal(3)
    out, rm, rv = _bn(x, g, b)
    expected = np.empty_like(x)
    for c in range(3):
        vals = x[:, c].ravel()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        expected[:, c] = (x[:, c] - mu) / np.sqrt(var + 1e-5) * g[c] + b[c]
        assert rm[c] == pytest.approx(0.1 * mu, abs=1e-12)
        assert rv[c] == pytest.approx(0.9 + 0.1 * var, abs=1e-12)
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-10)


def test_batch_norm_eval_uses_running_stats():
    x = np.random.default_rng(10).standard_normal((1, 2, 3, 3))
    rm, rv = np.array([0.5, -1.0]), np.array([4.0, 0.25])
    out, rm2, rv2 = _bn(x, np.ones(2), np.zeros(2), training=False, rm=rm.copy(), rv=rv.copy())
    expected = (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
    np.testing.assert_array_equal(rm2, rm)


def test_batch_norm_single_value_statistics_are_finite():
    out, _, _ = _bn(np.full((1, 1, 1, 1), 3.0), np.ones(1), np.zeros(1))
    np.testing.assert_array_equal(out.data, [[[[0.0]]]])


# ---------------------------------------------------------------- elementwise, concat

def test_relu_values():
    np.testing.assert_array_equal(tc.relu(T([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_relu_keeps_nan_visible():
    assert np.isnan(tc.relu(T([np.nan])).data[0])


def test_concat_shape_and_axis_mismatch():
    assert tc.concat([T(np.zeros((1, 2))), T(np.zeros((1, 3)))], axis=1).shape == (1, 5)
    with pytest.raises(ValueError):
        tc.concat([T(np.zeros((1, 2))), T(np.zeros((2, 3)))], axis=1)


def test_add_gradient_by_finite_differences():
    rng = np.random.default_rng(11)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    ta = T(a, grad=True)
    backward(tc.sum(ta + T(b)))
    num = oracles.numeric_grad(lambda v: float((v + b).sum()), a.copy())
    np.testing.assert_allclose(ta.grad, num, atol=1e-8)
    np.testing.assert_allclose(ta.grad, 1.0)


def test_broadcast_add_unbroadcasts_grad():
    a, b = T(np.ones((2, 3)), grad=True), T(np.ones((1, 3)), grad=True)
    backward(tc.sum(a + b))
    np.testing.assert_array_equal(b.grad, [[2.0, 2.0, 2.0]])


def test_negate_and_sub():
    a = T([1.0, -2.0], grad=True)
    out = T([5.0, 5.0]) - a
    np.testing.assert_array_equal(out.data, [4.0, 7.0])
    backward(tc.sum(out))
    np.testing.assert_array_equal(a.grad, [-1.0, -1.0])


# ---------------------------------------------------------------- pooling, upsampling

def test_avg_pool_constant_and_small_case():
    np.testing.assert_array_equal(tc.avg_pool2d(T(np.full((1, 1, 4, 6), 2.5)), 2).data, np.full((1, 1, 2, 3), 2.5))
    np.testing.assert_array_equal(tc.avg_pool2d(T([[[[1, 2], [3, 4]]]]), 2).data, [[[[2.5]]]])


def test_avg_pool_matches_naive_oracle():
    x = np.random.default_rng(12).standard_normal((1, 1, 8, 8))
    np.testing.assert_allclose(tc.avg_pool2d(T(x), 4, 4).data, oracles.avg_pool2d(x, 4, 4), rtol=0, atol=1e-12)


def test_avg_pool_truncates_partial_windows():
    x = np.random.default_rng(13).standard_normal((1, 2, 7, 5))
    out = tc.avg_pool2d(T(x), 2).data
    assert out.shape == (1, 2, 3, 2)
    np.testing.assert_allclose(out, oracles.avg_pool2d(x, 2, 2), atol=1e-12)


def test_avg_pool_rejects_oversized_kernel():
    with pytest.raises(ValueError):
        tc.avg_pool2d(T(np.zeros((1, 1, 3, 3))), 4)


def test_upsample_constant_and_corners():
    out = tc.upsample_bilinear2d(T(np.full((1, 1, 2, 3), 1.25)), 5, 7).data
    np.testing.assert_allclose(out, np.full((1, 1, 5, 7), 1.25), rtol=1e-15)
    x = np.random.default_rng(14).standard_normal((1, 1, 3, 4))
    out = tc.upsample_bilinear2d(T(x), 7, 9).data
    for i, j in ((0, 0), (0, -1), (-1, 0), (-1, -1)):
        assert out[0, 0, i, j] == x[0, 0, i, j]


def test_upsample_midpoint_rule():
    a, b = 1.0, 4.0
    out = tc.upsample_bilinear2d(T([[[[a, b]]]]), 1, 3).data
    np.testing.assert_allclose(out.ravel(), [a, (a + b) / 2, b], atol=1e-15)


def test_upsample_to_same_size_is_identity():
    x = np.random.default_rng(15).standard_normal((1, 2, 3, 4, 5))
    assert tc.upsample_trilinear3d(T(x), 3, 4, 5).data.tobytes() == x.tobytes()
    y = x[:, :, 0]
    assert tc.upsample_bilinear2d(T(y), 4, 5).data.tobytes() == y.tobytes()


# ---------------------------------------------------------------- softmax

def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(tc.softmax(T(np.zeros((1, 4))), axis=1).data, np.full((1, 4), 0.25))
    out = tc.softmax(T([0.0, 1000.0]), axis=0).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-300)


def test_softmax_jacobian_finite_differences():
    rng = np.random.default_rng(16)
    x = rng.standard_normal(5)
    for k in range(5):
        t = T(x, grad=True)
        backward(tc.sum(tc.mul(tc.softmax(t, axis=0), np.eye(5)[k])))

        def f(v):
            e = np.exp(v - v.max())
            return float(e[k] / e.sum())
        num = oracles.numeric_grad(f, x.copy())
        np.testing.assert_allclose(t.grad, num, rtol=1e-6, atol=1e-10)


# ---------------------------------------------------------------- adam

def test_adam_zero_grad_leaves_param():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    adam_step([p], 1e-3)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert p.step == 1


def test_adam_first_step_closed_form():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([0.1])
    adam_step([p], 1e-3)
    # m_hat = g, v_hat = g^2 after bias correction
    assert p.data[0] == pytest.approx(1.0 - 1e-3 * 0.1 / (0.1 + 1e-8), abs=1e-15)
    assert p.data[0] == pytest.approx(0.999, abs=1e-9)


def test_adam_moves_against_gradient_and_counts_steps():
    p = Parameter(np.array([0.0]))
    values = []
    for _ in range(2):
        p.grad = np.array([-0.3])
        adam_step([p], 0.01)
        values.append(p.data[0])
    assert 0 < values[0] < values[1]
    assert p.step == 2 and p.m.shape == p.v.shape == p.data.shape


def test_adam_rejects_missing_grad():
    p = Parameter(np.array([1.0]), name="w")
    with pytest.raises(ValueError, match="w"):
        adam_step([p], 1e-3)
