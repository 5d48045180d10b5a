import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rts.diffcore import DomainError, Graph, NonFiniteError, ShapeError, finite_diff_check


def _grad_of(build, point):
    g = Graph()
    leaf = g.param(point)
    loss = build(g, leaf)
    return g.value(loss), g.backward(loss)[leaf]


class TestForward:
    def test_add(self):
        g = Graph()
        out = g.add(g.const([1.0, 2.0]), g.const([3.0, 4.0]))
        np.testing.assert_array_equal(g.value(out), [4.0, 6.0])

    def test_l2_normalize(self):
        g = Graph()
        np.testing.assert_allclose(g.value(g.l2_normalize(g.const([3.0, 4.0]))), [0.6, 0.8], rtol=1e-15)

    def test_logsumexp_large(self):
        g = Graph()
        v = g.value(g.logsumexp(g.const([1000.0, 1000.0])))
        assert v == pytest.approx(1000.0 + math.log(2.0), abs=1e-12)

    def test_shape_mismatch(self):
        g = Graph()
        with pytest.raises(ShapeError):
            g.matmul(g.const(np.ones((2, 3))), g.const(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            g.add(g.const(np.ones(3)), g.const(np.ones(4)))

    def test_acos_domain(self):
        g = Graph()
        with pytest.raises(DomainError):
            g.acos(g.const([1.5]))
        # tiny overshoot from roundoff is clamped instead of rejected
        assert np.isfinite(g.value(g.acos(g.const([1.0 + 1e-9]))))

    def test_non_finite_rejected(self):
        g = Graph()
        with pytest.raises((NonFiniteError, DomainError, FloatingPointError, ValueError)):
            g.log(g.const([0.0]))
        with pytest.raises((NonFiniteError, FloatingPointError)):
            g.exp(g.const([1000.0]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Graph().forward("sqrt", (0,))

    def test_replay_bit_identical(self, np_rng):
        x = np_rng.normal(size=(4, 3))
        w = np_rng.normal(size=(3, 2))

        def run():
            g = Graph()
            y = g.logsumexp(g.tanh(g.matmul(g.const(x), g.param(w))))
            return g.value(g.sum(y))

        assert run().tobytes() == run().tobytes()


class TestBackward:
    def test_square(self):
        _, grad = _grad_of(lambda g, x: g.sum(g.mul(x, x)), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(grad, [2.0, 4.0])

    def test_logsumexp_uniform(self):
        _, grad = _grad_of(lambda g, s: g.logsumexp(s), np.array([0.0, 0.0]))
        np.testing.assert_allclose(grad, [0.5, 0.5], rtol=1e-15)

    def test_non_scalar_loss(self):
        g = Graph()
        x = g.param([1.0, 2.0])
        with pytest.raises(ShapeError):
            g.backward(x)

    def test_unreachable_is_zero(self):
        g = Graph()
        a, b = g.param([1.0, 2.0]), g.param(np.ones((2, 2)))
        grads = g.backward(g.sum(a))
        np.testing.assert_array_equal(grads[b], np.zeros((2, 2)))

    def test_broadcast_bias(self):
        g = Graph()
        x, b = g.const(np.ones((5, 3))), g.param(np.zeros(3))
        grads = g.backward(g.sum(g.add(x, b)))
        np.testing.assert_array_equal(grads[b], [5.0, 5.0, 5.0])

    def test_linearity(self, np_rng):
        w = np_rng.normal(size=(3, 2))
        x = np_rng.normal(size=(4, 3))

        def grads(which):
            g = Graph()
            p = g.param(w)
            h = g.matmul(g.const(x), p)
            l1 = g.sum(g.mul(h, h))
            l2 = g.mean(g.exp(g.scale(h, 0.3)))
            loss = {"1": l1, "2": l2, "both": g.add(l1, l2)}[which]
            return g.backward(loss)[p]

        np.testing.assert_allclose(grads("both"), grads("1") + grads("2"), rtol=1e-14, atol=1e-14)

    def test_clip_gradients(self):
        g = Graph()
        x = g.param([-2.0, 0.5, 3.0])
        grads = g.backward(g.sum(g.clip(x, -1.0, 1.0)))
        np.testing.assert_array_equal(grads[x], [0.0, 1.0, 0.0])
        g = Graph()
        x = g.param([-2.0, 0.5, 3.0])
        grads = g.backward(g.sum(g.clip(x, -1.0, 1.0, straight_through=True)))
        np.testing.assert_array_equal(grads[x], [1.0, 1.0, 1.0])

    def test_select_index_rows(self):
        g = Graph()
        s = g.param(np.arange(6.0).reshape(2, 3))
        picked = g.select_index(s, np.array([2, 0]))
        np.testing.assert_array_equal(g.value(picked), [2.0, 3.0])
        grads = g.backward(g.sum(picked))
        np.testing.assert_array_equal(grads[s], [[0, 0, 1], [1, 0, 0]])


class TestFiniteDiff:
    def test_quadratic(self):
        err = finite_diff_check(lambda g, x: g.sum(g.mul(x, x)), np.array([3.0]))
        assert err < 1e-8

    def test_exp(self):
        assert finite_diff_check(lambda g, x: g.sum(g.exp(x)), np.array([1.0])) < 1e-9

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda g, x: g.sum(x), np.ones(2), step=0.0)

    def test_non_finite_nearby(self):
        # log(x) at x = 1e-6 is finite but the -h probe leaves the domain
        with pytest.raises((NonFiniteError, DomainError, ValueError, FloatingPointError)):
            finite_diff_check(lambda g, x: g.sum(g.log(x)), np.array([1e-6]))

    def test_random_composite(self, np_rng):
        point = {"a": np_rng.normal(size=3), "b": np_rng.normal(size=2)}

        def build(g, p):
            m = g.add(g.mul(p["a"], p["a"]), g.const(1.0))
            return g.add(g.sum(g.log(m)), g.sum(g.cos(g.mul(p["b"], p["b"]))))

        assert finite_diff_check(build, point) < 1e-6


UNARY = {
    "exp": lambda g, x: g.exp(g.scale(x, 0.5)),
    "log": lambda g, x: g.log(g.add(g.mul(x, x), g.const(0.5))),
    "acos": lambda g, x: g.acos(g.scale(g.tanh(x), 0.9)),
    "cos": lambda g, x: g.cos(x),
    "tanh": lambda g, x: g.tanh(x),
    "scale": lambda g, x: g.scale(x, -2.5),
    "l2_normalize": lambda g, x: g.l2_normalize(g.add(x, g.const(np.full((2, 3), 0.5)))),
    "logsumexp": lambda g, x: g.logsumexp(x),
    "transpose": lambda g, x: g.transpose(x),
    "reshape": lambda g, x: g.reshape(x, (3, 2)),
    "sum_axis": lambda g, x: g.sum(x, axis=1),
    "mean_axis": lambda g, x: g.mean(x, axis=0),
    "select_index": lambda g, x: g.select_index(x, np.array([2, 0])),
}


class TestOpGradients:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary_ops(self, name, np_rng):
        # weighted sum makes the loss sensitive to every output coordinate
        worst = 0.0
        for _ in range(100):
            point = np_rng.normal(size=(2, 3))

            def build(g, x, op=UNARY[name]):
                out = op(g, x)
                w = np.linspace(0.3, 1.7, g.value(out).size).reshape(g.value(out).shape)
                return g.sum(g.mul(out, g.const(w)))

            worst = max(worst, finite_diff_check(build, point))
        assert worst < 1e-6

    @pytest.mark.parametrize("kind", ["add", "sub", "mul", "div", "matmul"])
    def test_binary_ops(self, kind, np_rng):
        worst = 0.0
        for _ in range(100):
            a = np_rng.normal(size=(2, 3))
            b = np_rng.normal(size=(3, 2)) if kind == "matmul" else np_rng.uniform(0.5, 2.0, size=3)

            def build(g, p):
                out = getattr(g, kind)(p["a"], p["b"])
                w = np.linspace(0.3, 1.7, g.value(out).size).reshape(g.value(out).shape)
                return g.sum(g.mul(out, g.const(w)))

            worst = max(worst, finite_diff_check(build, {"a": a, "b": b}))
        assert worst < 1e-6


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_logsumexp_shift(self, xs):
        g = Graph()
        x = np.array(xs)
        a = g.value(g.logsumexp(g.const(x)))
        b = g.value(g.logsumexp(g.const(x + 100.0)))
        assert b - a == pytest.approx(100.0, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=6).filter(lambda v: np.linalg.norm(v) > 1e-3))
    def test_normalize_unit(self, xs):
        g = Graph()
        assert np.linalg.norm(g.value(g.l2_normalize(g.const(np.array(xs))))) == pytest.approx(1.0, abs=1e-12)
