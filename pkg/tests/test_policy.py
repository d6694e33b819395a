import math

import numpy as np
import pytest

from bilevel_rl.mdp import TabularMdp, discounted_visitation
from bilevel_rl.policy import (entropies, entropy, entropy_grad, log_policy_grad, recenter, softmax,
                               softmax_vjp, uniform_policy, weighted_entropy)
from bilevel_rl.verify import CHECKS


class TestSoftmax:
    def test_zero_logits_uniform(self):
        np.testing.assert_allclose(softmax(np.zeros((3, 4))), 0.25)

    @pytest.mark.parametrize("t", [-50.0, 0.0, 3.7, 800.0])
    def test_constant_row_uniform(self, t):
        np.testing.assert_allclose(softmax(np.full((1, 4), t)), 0.25)

    def test_log_weights(self):
        row = np.log([[1.0, 2.0, 3.0, 4.0]])
        np.testing.assert_allclose(softmax(row), [[0.1, 0.2, 0.3, 0.4]], rtol=1e-14)

    def test_shift_invariance_and_positivity(self):
        rng = np.random.default_rng(0)
        theta = rng.normal(scale=30, size=(5, 3))
        pi = softmax(theta)
        np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(pi > 0)
        np.testing.assert_allclose(softmax(theta + rng.normal(size=(5, 1))), pi, rtol=1e-12)
        np.testing.assert_allclose(softmax(recenter(theta)), pi, rtol=1e-12)

    @pytest.mark.parametrize("bad", [np.inf, -np.inf, np.nan])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(ValueError, match="non-finite"):
            softmax(np.array([[0.0, bad]]))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            softmax(np.zeros(3))


class TestLogPolicyGrad:
    def test_uniform_four_actions(self):
        g = log_policy_grad(np.zeros((3, 4)), 1, 2)
        expected = np.zeros((3, 4))
        expected[1] = -0.25
        expected[1, 2] = 0.75
        np.testing.assert_allclose(g, expected)

    def test_saturation(self):
        theta = np.array([[60.0, 0.0, 0.0]])
        assert np.abs(log_policy_grad(theta, 0, 0)).max() < 1e-20

    def test_row_sums_and_norm(self):
        rng = np.random.default_rng(1)
        theta = rng.normal(size=(4, 3))
        for s, a in np.ndindex(4, 3):
            g = log_policy_grad(theta, s, a)
            assert abs(g[s].sum()) < 1e-15
            assert np.count_nonzero(np.delete(g, s, axis=0)) == 0
            assert np.linalg.norm(g) <= 2.0

    def test_matches_fd_1e7(self):
        rng = np.random.default_rng(2)
        theta = rng.normal(size=(2, 3))
        for s, a in np.ndindex(2, 3):
            fd = np.zeros_like(theta)
            for idx in np.ndindex(theta.shape):
                e = np.zeros_like(theta)
                e[idx] = 1e-6
                fd[idx] = (math.log(softmax(theta + e)[s, a]) - math.log(softmax(theta - e)[s, a])) / 2e-6
            np.testing.assert_allclose(log_policy_grad(theta, s, a), fd, atol=1e-7)

    def test_index_errors(self):
        with pytest.raises(IndexError):
            log_policy_grad(np.zeros((2, 2)), 2, 0)
        with pytest.raises(IndexError):
            log_policy_grad(np.zeros((2, 2)), 0, -1)


class TestEntropy:
    def test_uniform(self):
        assert entropy(uniform_policy(1, 4), 0) == pytest.approx(1.386294, abs=1e-6)
        assert entropy(uniform_policy(1, 4), 0) == pytest.approx(math.log(4), abs=1e-15)

    def test_deterministic(self):
        assert entropy(np.array([[0.0, 1.0, 0.0]]), 0) == 0.0

    def test_explicit_row(self):
        p = [0.1, 0.2, 0.3, 0.4]
        assert entropy(np.array([p]), 0) == pytest.approx(-sum(q * math.log(q) for q in p), rel=1e-14)

    def test_bounds(self):
        pi = softmax(np.random.default_rng(3).normal(scale=3, size=(20, 5)))
        e = entropies(pi)
        assert np.all(e >= 0) and np.all(e <= math.log(5) + 1e-15)

    def test_entropy_grad_fd(self):
        rng = np.random.default_rng(4)
        theta = rng.normal(size=(2, 4))
        fd = np.array([(entropy(softmax(theta + h), 1) - entropy(softmax(theta - h), 1)) / 2e-6
                       for h in (1e-6 * np.eye(8)).reshape(8, 2, 4)]).reshape(2, 4)
        np.testing.assert_allclose(entropy_grad(softmax(theta), 1), fd[1], atol=1e-9)
        np.testing.assert_allclose(fd[0], 0.0, atol=1e-9)


class TestWeightedEntropy:
    def test_uniform(self):
        mdp = TabularMdp.random(np.random.default_rng(5), 4, 3)
        assert weighted_entropy(mdp, uniform_policy(4, 3)) == pytest.approx(math.log(3), abs=1e-14)

    def test_deterministic(self):
        mdp = TabularMdp.random(np.random.default_rng(5), 4, 3)
        pi = np.zeros((4, 3))
        pi[:, 1] = 1.0
        assert weighted_entropy(mdp, pi) == 0.0

    def test_direct_sum(self):
        rng = np.random.default_rng(6)
        mdp = TabularMdp.random(rng, 5, 2)
        pi = softmax(rng.normal(size=(5, 2)))
        d = discounted_visitation(mdp, pi)
        manual = sum(d[s] * -sum(p * math.log(p) for p in pi[s]) for s in range(5))
        assert weighted_entropy(mdp, pi) == pytest.approx(manual, rel=1e-13)


def test_softmax_vjp_matches_chain_rule():
    rng = np.random.default_rng(7)
    theta = rng.normal(size=(3, 3))
    g = rng.normal(size=(3, 3))
    fd = np.array([((softmax(theta + h) * g).sum() - (softmax(theta - h) * g).sum()) / 2e-6
                   for h in (1e-6 * np.eye(9)).reshape(9, 3, 3)]).reshape(3, 3)
    np.testing.assert_allclose(softmax_vjp(softmax(theta), g), fd, atol=1e-9)


@pytest.mark.parametrize("name", [n for n in CHECKS if n.startswith("policy.")])
def test_policy_invariants(name):
    passed, detail = CHECKS[name].fn()
    assert passed, detail
