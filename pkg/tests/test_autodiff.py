import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from thermnet import autodiff as ad
from thermnet.errors import InvalidRate, LabelOutOfRange, NonFiniteValue, ShapeMismatch
from thermnet.gradsuite import CASES, run_case

T = ad.Tensor


def naive_conv(x, w, b):
    B, C, H, W = x.shape
    K, _, kh, kw = w.shape
    out = np.zeros((B, K, H - kh + 1, W - kw + 1))
    for n in range(B):
        for k in range(K):
            for i in range(H - kh + 1):
                for j in range(W - kw + 1):
                    out[n, k, i, j] = (x[n, :, i : i + kh, j : j + kw] * w[k]).sum() + b[k]
    return out


# --- engine -----------------------------------------------------------------


def test_backward_accumulates_over_shared_nodes():
    x = T(np.array([[1.0, -2.0]]), requires_grad=True)
    y = ad.relu(x)
    w = T(np.ones((2, 1)))
    z = ad.dense(y, w, T(np.zeros(1)))
    z2 = ad.dense(y, w, T(np.zeros(1)))
    out = ad.dense(ad.relu(z), T(np.ones((1, 1))), T(np.zeros(1)))
    out.backward()
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0]])
    z2.backward()
    np.testing.assert_array_equal(x.grad, [[2.0, 0.0]])


def test_non_finite_values_rejected():
    with pytest.raises(NonFiniteValue):
        ad.relu(T(np.array([np.inf])))


def test_deep_graph_does_not_recurse():
    x = T(np.ones((1, 3)), requires_grad=True)
    y = x
    for _ in range(5000):
        y = ad.relu(y)
    y.backward(np.ones((1, 3)))
    np.testing.assert_array_equal(x.grad, np.ones((1, 3)))


# --- conv / pooling / relu / dense ------------------------------------------


def test_conv_pointwise_scaling(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    out = ad.conv2d(T(x), T(np.full((1, 1, 1, 1), 2.0)), T(np.zeros(1)))
    np.testing.assert_array_equal(out.data, 2 * x)


def test_conv_window_sums():
    out = ad.conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 2, 2))), T(np.zeros(1)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv_matches_loop_oracle(rng):
    x, w, b = rng.standard_normal((1, 1, 6, 6)), rng.standard_normal((2, 1, 3, 3)), rng.standard_normal(2)
    np.testing.assert_allclose(ad.conv2d(T(x), T(w), T(b)).data, naive_conv(x, w, b), atol=1e-6)
    x, w, b = rng.standard_normal((2, 3, 7, 5)), rng.standard_normal((4, 3, 2, 3)), rng.standard_normal(4)
    np.testing.assert_allclose(ad.conv2d(T(x), T(w), T(b)).data, naive_conv(x, w, b), atol=1e-9)


def test_conv_shape_errors():
    with pytest.raises(ShapeMismatch):
        ad.conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 1, 2, 2))), T(np.zeros(1)))
    with pytest.raises(ShapeMismatch):
        ad.conv2d(T(np.zeros((1, 1, 2, 2))), T(np.zeros((1, 1, 3, 3))), T(np.zeros(1)))


def test_avgpool_examples():
    x = T(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
    out = ad.avgpool2d(x)
    np.testing.assert_array_equal(out.data, [[[[2.5]]]])
    out.backward(np.array([[[[8.0]]]]))
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 2.0))
    np.testing.assert_array_equal(ad.avgpool2d(T(np.full((1, 1, 4, 4), 3.0))).data, np.full((1, 1, 2, 2), 3.0))


def test_maxpool_examples():
    out = ad.maxpool2d(T(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])
    x = T(np.full((1, 1, 2, 2), 5.0), requires_grad=True)
    ad.maxpool2d(x).backward(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


def test_pool_needs_even_sides():
    with pytest.raises(ShapeMismatch):
        ad.maxpool2d(T(np.zeros((1, 1, 3, 4))))


def test_relu_examples(rng):
    np.testing.assert_array_equal(ad.relu(T(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])
    assert not ad.relu(T(-np.abs(rng.standard_normal(10)) - 0.1)).data.any()
    x = T(rng.standard_normal((4, 5)), requires_grad=True)
    ad.relu(x).backward(np.ones((4, 5)))
    np.testing.assert_array_equal(x.grad, (x.data > 0).astype(float))


def test_dense_examples(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(ad.dense(T(x), T(np.eye(4)), T(np.zeros(4))).data, x)
    out = ad.dense(T(x), T(np.zeros((4, 2))), T(np.array([1.5, -2.0])))
    np.testing.assert_array_equal(out.data, np.tile([1.5, -2.0], (3, 1)))


def test_dense_flattens_feature_maps(rng):
    x = rng.standard_normal((2, 3, 2, 2))
    w = rng.standard_normal((12, 5))
    np.testing.assert_allclose(ad.dense(T(x), T(w), T(np.zeros(5))).data, x.reshape(2, 12) @ w)


# --- dropout ----------------------------------------------------------------


def test_dropout_identity_cases(rng):
    x = T(rng.standard_normal((3, 3)))
    assert ad.dropout(x, 0.0, True, rng) is x
    assert ad.dropout(x, 0.3, False) is x


def test_dropout_rate_validation():
    with pytest.raises(InvalidRate):
        ad.dropout(T(np.ones(2)), 1.0, True, np.random.default_rng(0))


def test_dropout_expectation_monte_carlo():
    rng = np.random.default_rng(7)
    x = np.linspace(0.5, 2.0, 10)
    out = ad.dropout(T(np.tile(x, (100_000, 1))), 0.3, True, rng).data
    np.testing.assert_allclose(out.mean(axis=0), x, rtol=0.01)


# --- softmax cross-entropy --------------------------------------------------


def test_softmax_xent_uniform():
    loss, probs = ad.softmax_xent(T(np.zeros((4, 17))), [0, 3, 5, 16])
    np.testing.assert_allclose(probs, 1 / 17)
    assert float(loss.data) == pytest.approx(math.log(17))


def test_softmax_xent_saturated():
    logits = np.zeros((1, 5))
    logits[0, 2] = 50
    loss, probs = ad.softmax_xent(T(logits), [2])
    assert probs[0, 2] > 1 - 1e-12
    assert float(loss.data) < 1e-12


def test_softmax_xent_label_range():
    with pytest.raises(LabelOutOfRange):
        ad.softmax_xent(T(np.zeros((1, 3))), [3])


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 9)), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(logits):
    p = ad.softmax(logits)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-12)
    assert (p >= 0).all()


# --- spatial transformer ----------------------------------------------------


def test_affine_grid_identity_is_lattice():
    grid = ad.affine_grid(T(np.array([[[1.0, 0, 0], [0, 1, 0]]])), 3, 4).data
    np.testing.assert_array_equal(grid[0, 0, :, 0], ad.normalized_lattice(4))
    np.testing.assert_array_equal(grid[0, :, 0, 1], ad.normalized_lattice(3))


def test_affine_grid_translation():
    ident = ad.affine_grid(T(np.array([[1.0, 0, 0, 0, 1, 0]])), 5, 5).data
    moved = ad.affine_grid(T(np.array([[1.0, 0, 0.5, 0, 1, 0]])), 5, 5).data
    np.testing.assert_allclose(moved[..., 0], ident[..., 0] + 0.5, atol=1e-15)
    np.testing.assert_array_equal(moved[..., 1], ident[..., 1])


def test_affine_grid_composition(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    ab = a[:, :2] @ b
    ab[:, 2] += a[:, 2]
    grid_b = ad.affine_grid(T(b[None]), 4, 6).data[0]
    applied = grid_b @ a[:, :2].T + a[:, 2]
    np.testing.assert_allclose(ad.affine_grid(T(ab[None]), 4, 6).data[0], applied, atol=1e-12)


def test_grid_sample_identity_exact(rng):
    x = rng.standard_normal((2, 3, 5, 7)).astype(np.float32)
    grid = ad.affine_grid(T(np.tile([1.0, 0, 0, 0, 1, 0], (2, 1))), 5, 7)
    np.testing.assert_array_equal(ad.grid_sample(T(x), grid).data, x)


def test_grid_sample_outside_reads_zero(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    grid = np.full((1, 3, 3, 2), 3.0)
    assert not ad.grid_sample(T(x), T(grid)).data.any()


def test_grid_sample_midpoint_interpolates():
    x = np.array([[[[0.0, 10.0]]]])
    out = ad.grid_sample(T(x), T(np.array([[[[0.0, 0.0]]]]))).data
    assert out[0, 0, 0, 0] == pytest.approx(5.0)


# --- gradient checks --------------------------------------------------------


def test_grad_check_linear_op_near_machine_epsilon(rng):
    report = ad.grad_check(ad.avgpool2d, [rng.standard_normal((1, 2, 4, 4))])
    assert report.max_error < 1e-8


def test_grad_check_relu_kink_excluded():
    x = np.array([[0.0, 1.0, -1.0]])
    report = ad.grad_check(ad.relu, [x], exclude=[x == 0], kink_ratio=None)
    assert report.passed


def test_grad_check_detects_wrong_gradient(rng):
    def bad(x):
        out = ad.relu(x)
        out._backward = lambda g: (2 * g,)
        return out

    report = ad.grad_check(bad, [np.abs(rng.standard_normal((2, 3))) + 0.5])
    assert not report.passed


@pytest.mark.parametrize("name", sorted(CASES))
def test_operator_gradients(name):
    result = run_case(name, instances=2, seed=11)
    assert result.passed, result.line()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_conv_gradient_random_instances(seed):
    rng = np.random.default_rng(seed)
    op, inputs, exclude = CASES["conv2d"](rng)
    assert ad.grad_check(op, inputs, exclude=exclude, tolerance=1e-4).passed


@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 6)), elements=st.floats(-5, 5)),
       st.floats(-3, 3))
def test_dense_is_linear(x, k):
    w = np.arange(x.shape[1] * 2, dtype=np.float64).reshape(-1, 2) / 7
    zero = T(np.zeros(2))
    np.testing.assert_allclose(ad.dense(T(k * x), T(w), zero).data, k * ad.dense(T(x), T(w), zero).data,
                               atol=1e-9)
