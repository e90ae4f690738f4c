import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fmselect.tensor_core import (
    NumericError,
    ShapeError,
    grad_check,
    leaky_relu,
    leaky_relu_grad,
    make_rng,
    matmul,
    rowwise_matmul,
    sequential_row_sum,
    softmax_stable,
    tanh_act,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        a = make_rng(3).standard_normal((3, 3))
        np.testing.assert_array_equal(matmul(np.eye(3), a), a)

    def test_hand_sum(self):
        np.testing.assert_array_equal(matmul(np.array([[1, 2], [3, 4]]), np.array([[1], [1]])),
                                      [[3], [7]])

    def test_against_triple_loop(self):
        rng = make_rng(0)
        a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
        np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), rtol=0, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**32 - 1))
    def test_random_shapes(self, m, k, n, seed):
        rng = make_rng(seed)
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), rtol=0, atol=1e-12)

    def test_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_rowwise_is_chunk_independent(self):
        rng = make_rng(1)
        a = rng.random((257, 40)).astype(np.float32)
        b = rng.standard_normal((40, 16)).astype(np.float32)
        full = rowwise_matmul(a, b)
        for c in (1, 7, 100):
            parts = np.vstack([rowwise_matmul(a[i:i + c], b) for i in range(0, 257, c)])
            np.testing.assert_array_equal(parts, full)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_stable(np.zeros(4)), [0.25] * 4, atol=1e-15)

    @pytest.mark.parametrize("c", [-20.0, 0.0, 3.5, 700.0])
    def test_closed_form(self, c):
        np.testing.assert_allclose(softmax_stable(np.array([c, c + math.log(3)])), [0.25, 0.75],
                                   atol=1e-12)

    def test_no_overflow(self):
        out = softmax_stable(np.array([1000.0, 1001.0]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, softmax_stable(np.array([0.0, 1.0])), atol=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            softmax_stable(np.array([]))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 30), elements=finite), finite)
    def test_sum_and_shift(self, v, c):
        s = softmax_stable(v)
        assert np.all(s >= 0) and np.all(s <= 1)
        assert abs(s.sum() - 1) < 1e-9
        np.testing.assert_allclose(softmax_stable(v + c), s, atol=1e-9)


class TestActivations:
    def test_leaky(self):
        np.testing.assert_allclose(leaky_relu(np.array([-1.0, 0.0, 2.0]), 0.2), [-0.2, 0.0, 2.0])

    def test_leaky_zero_slope_is_relu(self):
        v = make_rng(0).standard_normal(50)
        np.testing.assert_array_equal(leaky_relu(v, 0.0), np.maximum(v, 0))

    def test_leaky_derivative(self):
        np.testing.assert_array_equal(leaky_relu_grad(np.array([-3.0, 3.0]), 0.2), [0.2, 1.0])

    def test_leaky_slope_range(self):
        with pytest.raises(ValueError):
            leaky_relu(np.zeros(2), 1.0)

    def test_tanh(self):
        assert tanh_act(np.array([0.0]))[0] == 0.0
        x = make_rng(2).standard_normal(20)
        np.testing.assert_array_equal(tanh_act(-x), -tanh_act(x))
        assert abs(tanh_act(np.array([20.0]))[0] - 1) < 1e-9


class TestRng:
    def test_equal_seeds_equal_streams(self):
        a, b = make_rng(123), make_rng(123)
        assert a.bytes(4096) == b.bytes(4096)

    def test_known_first_draw(self):
        # pins the generator algorithm (PCG64) and its seeding
        assert make_rng(0).integers(0, 2**32) == np.random.Generator(np.random.PCG64(0)).integers(0, 2**32)


def test_sequential_row_sum_chunking():
    rows = make_rng(5).standard_normal((101, 7))
    full = sequential_row_sum(rows)
    acc = None
    for s in range(0, 101, 13):
        acc = sequential_row_sum(rows[s:s + 13], acc)
    np.testing.assert_array_equal(acc, full)


class TestGradCheck:
    def test_quadratic(self):
        p = make_rng(0).standard_normal(10)
        assert grad_check(lambda q: 0.5 * np.dot(q, q), p, p.copy(), 1e-6) < 1e-8

    def test_detects_corruption(self):
        p = make_rng(0).standard_normal(10) + 2.0
        g = p.copy()
        g[3] *= 2
        assert grad_check(lambda q: 0.5 * np.dot(q, q), p, g, 1e-6) > 0.1

    def test_eps_range(self):
        with pytest.raises(ValueError):
            grad_check(lambda q: 0.0, np.zeros(2), np.zeros(2), 1e-2)

    def test_non_finite(self):
        with pytest.raises(NumericError):
            grad_check(lambda q: np.inf, np.zeros(2), np.zeros(2), 1e-6)

    def test_restores_parameters(self):
        p = make_rng(1).standard_normal(5)
        before = p.copy()
        grad_check(lambda q: float(np.sum(q ** 3)), p, 3 * p ** 2, 1e-6)
        np.testing.assert_array_equal(p, before)


def test_grad_check_coordinate_subset():
    p = make_rng(2).standard_normal(10)
    g = p.copy()
    g[3] += 1.0
    assert grad_check(lambda q: 0.5 * np.dot(q, q), p, g, 1e-6, coords=np.array([0, 1, 2])) < 1e-8
    assert grad_check(lambda q: 0.5 * np.dot(q, q), p, g, 1e-6, coords=np.array([3])) > 0.1
