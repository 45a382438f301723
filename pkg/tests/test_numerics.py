import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmtl.numerics import (
    SGD,
    Adam,
    Dense,
    DenseNet,
    ShapeError,
    activation_forward,
    adam_step,
    affine_forward,
    bce,
    bce_grad_prob,
    clamp_prob,
    grad_check,
    net_backward,
    relative_error,
    sigmoid,
    softmax,
)


def matmul_oracle(W, x, b):
    out = []
    for i in range(len(W)):
        acc = 0.0
        for j in range(len(x)):
            acc += W[i][j] * x[j]
        out.append(acc + b[i])
    return out


class TestAffine:
    def test_identity(self):
        np.testing.assert_array_equal(affine_forward([1.0, 2.0], np.eye(2), np.zeros(2)), [1.0, 2.0])

    def test_scalar(self):
        assert affine_forward([1.0], [[2.0]], [3.0]).tolist() == [5.0]

    def test_random_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        W, x, b = rng.normal(size=(4, 3)), rng.normal(size=3), rng.normal(size=4)
        np.testing.assert_allclose(affine_forward(x, W, b), matmul_oracle(W.tolist(), x.tolist(), b.tolist()),
                                   rtol=1e-14, atol=1e-14)

    def test_batch_rows(self):
        rng = np.random.default_rng(4)
        W, X, b = rng.normal(size=(4, 3)), rng.normal(size=(5, 3)), rng.normal(size=4)
        out = affine_forward(X, W, b)
        for r in range(5):
            np.testing.assert_allclose(out[r], matmul_oracle(W.tolist(), X[r].tolist(), b.tolist()), atol=1e-14)

    @pytest.mark.parametrize("x,W,b", [
        (np.ones(3), np.ones((2, 4)), np.zeros(2)),
        (np.ones(4), np.ones((2, 4)), np.zeros(3)),
    ])
    def test_mismatch_rejected(self, x, W, b):
        with pytest.raises(ShapeError, match=r"\("):
            affine_forward(x, W, b)


class TestActivations:
    def test_sigmoid_zero(self):
        assert sigmoid(0.0) == 0.5

    def test_softmax_uniform(self):
        np.testing.assert_allclose(softmax(np.full(4, 3.7)), np.full(4, 0.25), rtol=0, atol=1e-15)

    def test_sigmoid_two_high_precision(self):
        mpmath.mp.dps = 50
        ref = float(1 / (1 + mpmath.e ** -2))
        assert sigmoid(2.0) == pytest.approx(ref, rel=1e-15)

    def test_sigmoid_extremes_are_finite(self):
        s = sigmoid(np.array([-1000.0, 1000.0]))
        assert np.all(np.isfinite(s))
        assert s[0] >= 0 and s[1] <= 1

    def test_relu(self):
        np.testing.assert_array_equal(activation_forward(np.array([-1.0, 0.0, 2.0]), "relu"), [0.0, 0.0, 2.0])

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
    def test_softmax_simplex(self, x):
        p = softmax(x)
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-700, 700))
    def test_sigmoid_open_interval_where_representable(self, x):
        s = sigmoid(x)
        assert 0.0 <= s <= 1.0
        if abs(x) < 36:
            assert 0.0 < s < 1.0


class TestBCE:
    def test_half(self):
        np.testing.assert_allclose(bce([0, 1], [0.5, 0.5]), [math.log(2)] * 2)

    def test_clamped_log_is_finite(self):
        assert np.isfinite(bce([1, 0], [0.0, 1.0])).all()
        assert bce([1], [0.0])[0] == pytest.approx(-math.log(1e-7))

    def test_grad_zero_in_clamped_region(self):
        assert bce_grad_prob([1], [0.0])[0] == 0.0

    def test_clamp_range(self):
        assert clamp_prob(0.0) == 1e-7 and clamp_prob(1.0) == 1 - 1e-7


def _fd_net_grads(net, x, weight, eps=1e-6):
    def loss():
        return float(np.sum(net.predict(x) * weight))
    out = []
    for _, p, _ in net.named_params("n"):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            up = loss()
            p[idx] = orig - eps
            down = loss()
            p[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return out


class TestNetBackward:
    def test_single_linear_layer(self):
        rng = np.random.default_rng(0)
        net = DenseNet([3, 1], rng)
        x = np.array([0.5, -1.0, 2.0])
        net.forward(x)
        net_backward(net, np.array([1.0]))
        np.testing.assert_array_equal(net.layers[0].gW, x[None, :])
        np.testing.assert_array_equal(net.layers[0].gb, [1.0])

    def test_zero_upstream(self):
        net = DenseNet([4, 5, 2], np.random.default_rng(1))
        net.forward(np.ones(4))
        gin = net.backward(np.zeros(2))
        assert not np.any(gin)
        assert all(not np.any(g) for _, _, g in net.named_params("n"))

    def test_backward_without_forward(self):
        net = DenseNet([2, 2], np.random.default_rng(0))
        with pytest.raises(RuntimeError):
            net.backward(np.ones(2))
        with pytest.raises(RuntimeError):
            Dense(np.eye(2), np.zeros(2)).backward(np.ones((1, 2)))

    @pytest.mark.parametrize("seed", range(5))
    def test_two_layer_relu_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = DenseNet([5, 7, 3], rng)
        x = rng.normal(size=(4, 5))
        weight = rng.normal(size=(4, 3))
        net.forward(x)
        gin = net.backward(weight)
        fd = _fd_net_grads(net, x, weight)
        for (_, _, g), ref in zip(net.named_params("n"), fd):
            assert np.max(relative_error(g, ref)) < 1e-4
        # input gradient against differences in x
        eps = 1e-6
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += eps
            xm[idx] -= eps
            ref = (np.sum(net.predict(xp) * weight) - np.sum(net.predict(xm) * weight)) / (2 * eps)
            assert relative_error(gin[idx], ref) < 1e-4

    def test_accumulation_is_additive(self):
        rng = np.random.default_rng(2)
        net = DenseNet([3, 4, 2], rng)
        x, up = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
        net.forward(x)
        net.backward(up)
        once = [g.copy() for _, _, g in net.named_params("n")]
        net.backward(up)
        for a, (_, _, g) in zip(once, net.named_params("n")):
            np.testing.assert_array_equal(g, 2 * a)

    def test_zero_grad(self):
        rng = np.random.default_rng(2)
        net = DenseNet([3, 2], rng)
        net.forward(np.ones(3))
        net.backward(np.ones(2))
        net.zero_grad()
        assert all(not np.any(g) for _, _, g in net.named_params("n"))

    def test_deterministic(self):
        a = DenseNet([4, 3, 2], np.random.default_rng(9))
        b = DenseNet([4, 3, 2], np.random.default_rng(9))
        x = np.arange(4.0)
        np.testing.assert_array_equal(a.forward(x), b.forward(x))

    def test_glorot_limits(self):
        net = DenseNet([30, 20], np.random.default_rng(0))
        lim = math.sqrt(6 / 50)
        assert np.abs(net.layers[0].W).max() <= lim
        assert not np.any(net.layers[0].b)


class TestGradCheck:
    def test_quadratic_exact(self):
        p = np.array([3.0])
        err = grad_check(lambda: float(p[0] ** 2), [p], [np.array([6.0])], eps=1e-5)
        assert err < 1e-8

    @pytest.mark.parametrize("per_entry", [False, True])
    def test_planted_bug(self, per_entry):
        p = np.array([3.0, -1.0])
        err = grad_check(lambda: float(np.sum(p ** 2)), [p], [4.0 * p], eps=1e-5, per_entry=per_entry)
        assert err == pytest.approx(1.0, abs=1e-6)

    def test_group_error_is_norm_ratio(self):
        p = np.array([1.0, 2.0])
        err = grad_check(lambda: float(np.sum(p ** 2)), [p], [np.array([2.0, 4.3])])
        assert err == pytest.approx(0.3 / math.sqrt(20), rel=1e-6)

    def test_non_finite_rejected(self):
        p = np.array([1.0])
        with pytest.raises(FloatingPointError):
            grad_check(lambda: float("nan"), [p], [np.zeros(1)])

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            grad_check(lambda: 0.0, [], [], eps=0.0)

    def test_restores_parameters(self):
        p = np.array([1.5, -2.0])
        grad_check(lambda: float(np.sum(p ** 3)), [p], [3 * p ** 2])
        np.testing.assert_array_equal(p, [1.5, -2.0])


def hand_adam_trace(p0, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    p, m, v, out = p0, 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = 2.0 * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(p)
    return out


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = np.array([1.0, -2.0])
        opt = Adam([p])
        adam_step([p], [np.zeros(2)], opt)
        np.testing.assert_array_equal(p, [1.0, -2.0])

    def test_first_step_is_lr_sign(self):
        p = np.array([1.0, -2.0, 0.5])
        g = np.array([0.3, -7.0, 1e-3])
        opt = Adam([p], lr=1e-3)
        opt.step([g])
        np.testing.assert_allclose(p - np.array([1.0, -2.0, 0.5]), -1e-3 * np.sign(g), rtol=1e-4)

    def test_trace_matches_hand_rolled(self):
        p = np.array([1.3])
        opt = Adam([p])
        trace = []
        for _ in range(10):
            opt.step([2.0 * p])
            trace.append(float(p[0]))
        np.testing.assert_allclose(trace, hand_adam_trace(1.3, 10), rtol=0, atol=1e-15)

    def test_step_counter_increases(self):
        p = np.zeros(1)
        opt = Adam([p])
        for t in range(1, 4):
            opt.step([np.ones(1)])
            assert opt.t == t

    def test_shape_mismatch(self):
        p = np.zeros(2)
        with pytest.raises(ShapeError):
            Adam([p]).step([np.zeros(3)])
        with pytest.raises(ShapeError):
            adam_step([np.zeros(2)], [np.zeros(2)], Adam([p]))

    def test_sgd(self):
        p = np.array([1.0])
        SGD([p], lr=0.1).step([np.array([2.0])])
        assert p[0] == pytest.approx(0.8)
