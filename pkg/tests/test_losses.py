import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rts.diffcore import Graph
from rts.losses import (cross_entropy, cross_entropy_node, kl_gamma, kl_gamma_node,
                        kl_numeric_oracle, logsumexp, total_loss)


class TestCrossEntropy:
    def test_uniform_two(self):
        assert cross_entropy([0.0, 0.0], 0) == pytest.approx(math.log(2), rel=1e-15)

    def test_confident(self):
        assert cross_entropy([10.0, 0.0, 0.0], 0) == pytest.approx(math.log1p(2 * math.exp(-10)), rel=1e-9)

    def test_three_class_scores(self):
        e = [math.exp(v) for v in (2.1, 1.0, 0.6)]
        want = -math.log(e[0] / sum(e))
        assert cross_entropy([2.1, 1.0, 0.6], 0) == pytest.approx(want, rel=1e-13)
        assert want == pytest.approx(0.4421, abs=1e-4)

    @pytest.mark.parametrize("c", [2, 3, 7, 16, 33, 64])
    def test_uniform_is_log_c(self, c):
        assert cross_entropy(np.full(c, 1.7), c - 1) == pytest.approx(math.log(c), rel=1e-14)

    def test_label_range(self):
        with pytest.raises(IndexError):
            cross_entropy([1.0, 2.0], 2)
        with pytest.raises(IndexError):
            cross_entropy([1.0, 2.0], -1)

    def test_huge_logits_stable(self):
        assert cross_entropy([1e4, 0.0], 1) == pytest.approx(1e4)

    def test_logsumexp_batch(self):
        s = np.array([[0.0, 0.0], [1000.0, 1000.0]])
        np.testing.assert_allclose(logsumexp(s), [math.log(2), 1000 + math.log(2)])


class TestKL:
    def test_prior_is_zero(self):
        assert kl_gamma(np.ones(16)) == 0.0

    def test_single(self):
        assert kl_gamma([2.0]) == pytest.approx(0.5 * (2 - math.log(2) - 1), rel=1e-15)
        assert kl_gamma([2.0]) == pytest.approx(0.15343, abs=1e-5)

    def test_pair(self):
        assert kl_gamma([0.5, 2.0]) == pytest.approx(0.125, abs=1e-5)

    def test_nonpositive(self):
        with pytest.raises(ValueError):
            kl_gamma([1.0, 0.0])

    @pytest.mark.parametrize("v", [0.25, 0.5, 1.0, 2.0, 4.0])
    def test_oracle(self, v):
        assert kl_numeric_oracle(v) == pytest.approx(kl_gamma([v]), abs=1e-6)

    def test_oracle_values(self):
        assert abs(kl_numeric_oracle(1.0)) < 1e-9
        assert kl_numeric_oracle(0.25) == pytest.approx(0.5 * (0.25 - math.log(0.25) - 1), abs=1e-6)

    def test_convex_minimum(self):
        assert kl_gamma([1.0]) < kl_gamma([0.9]) and kl_gamma([1.0]) < kl_gamma([1.1])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=32))
    def test_non_negative(self, v):
        assert kl_gamma(v) >= 0.0


class TestTotal:
    def test_examples(self):
        assert total_loss(0.5, 0.1, 0.0).total == 0.5
        assert total_loss(0.5, 0.1, 10.0).total == pytest.approx(1.5, rel=1e-15)
        assert total_loss(0.5, 0.1, 1.0).total == pytest.approx(0.6, rel=1e-15)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            total_loss(0.5, 0.1, -1.0)


class TestNodes:
    def test_cross_entropy_node_matches(self, np_rng):
        logits = np_rng.normal(size=(5, 4)) * 3
        labels = np.array([0, 3, 1, 1, 2])
        g = Graph()
        node = cross_entropy_node(g, g.const(logits), labels)
        want = np.mean([cross_entropy(r, c) for r, c in zip(logits, labels)])
        assert float(g.value(node)) == pytest.approx(want, rel=1e-13)

    def test_kl_node_matches(self, np_rng):
        z = np_rng.normal(size=(3, 16))
        g = Graph()
        node = kl_gamma_node(g, g.const(z))
        want = np.mean([kl_gamma(np.exp(r)) for r in z])
        assert float(g.value(node)) == pytest.approx(want, rel=1e-13)
