import math

import numpy as np
import pytest

from bilevel_rl.mdp import (FeatureReward, LinearSolver, TabularMdp, discounted_visitation,
                            exact_return, exact_value, grad_theta_return, grad_x_return,
                            policy_transition, q_and_advantage, value_bound)
from bilevel_rl.envs.gridworld import GridWorldSpec
from bilevel_rl.policy import softmax, uniform_policy
from bilevel_rl.verify import CHECKS, gradient_identity_errors


def one_state(rewards, gamma=0.5):
    nA = len(rewards)
    return TabularMdp(np.ones((1, nA, 1)), gamma, np.ones(1)), np.array([rewards], dtype=float)


def chain_2state():
    # action 0 moves s0 -> s1 and stays in s1; action 1 stays put
    P = np.zeros((2, 2, 2))
    P[0, 0, 1] = P[1, 0, 1] = 1.0
    P[0, 1, 0] = P[1, 1, 1] = 1.0
    return P


class TestTabularMdp:
    def test_rejects_bad_kernel(self):
        P = np.full((2, 2, 2), 0.4)
        with pytest.raises(ValueError, match="distribution"):
            TabularMdp(P, 0.9, np.full(2, 0.5))

    def test_rejects_negative_entries(self):
        P = np.zeros((1, 1, 2))
        P[0, 0] = [1.5, -0.5]
        with pytest.raises(ValueError):
            TabularMdp(np.concatenate([P, P]), 0.9, np.full(2, 0.5))

    @pytest.mark.parametrize("gamma", [0.0, 1.0, -0.1])
    def test_rejects_gamma(self, gamma):
        with pytest.raises(ValueError, match="gamma"):
            TabularMdp(np.ones((1, 1, 1)), gamma, np.ones(1))

    def test_rho_bounded_away_from_zero(self):
        with pytest.raises(ValueError, match="rho_min"):
            TabularMdp(chain_2state(), 0.9, np.array([1.0, 0.0]))
        TabularMdp(chain_2state(), 0.9, np.array([1.0, 0.0]), rho_min=0.0)

    def test_random_is_valid(self):
        mdp = TabularMdp.random(np.random.default_rng(0), 5, 3)
        assert mdp.num_states == 5 and mdp.num_actions == 3
        np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0, atol=1e-12)


class TestPolicyTransition:
    def test_single_state(self):
        mdp, _ = one_state([1.0, 0.0])
        np.testing.assert_array_equal(policy_transition(mdp, np.array([[0.3, 0.7]])), [[1.0]])

    def test_deterministic_chain(self):
        mdp = TabularMdp(chain_2state(), 0.9, np.array([0.5, 0.5]))
        pi = np.array([[1.0, 0.0], [1.0, 0.0]])
        np.testing.assert_array_equal(policy_transition(mdp, pi), [[0, 1], [0, 1]])

    def test_uniform_averages_action_rows(self):
        mdp = TabularMdp.random(np.random.default_rng(3), 3, 2)
        P_pi = policy_transition(mdp, uniform_policy(3, 2))
        np.testing.assert_allclose(P_pi, mdp.transition.mean(axis=1), atol=1e-15)
        np.testing.assert_allclose(P_pi.sum(axis=1), 1.0, atol=1e-12)

    def test_shape_mismatch(self):
        mdp = TabularMdp.random(np.random.default_rng(3), 3, 2)
        with pytest.raises(ValueError, match="shape"):
            policy_transition(mdp, uniform_policy(3, 3))


class TestVisitation:
    def test_single_state(self):
        mdp, _ = one_state([0.0, 0.0])
        np.testing.assert_allclose(discounted_visitation(mdp, np.full((1, 2), 0.5)), [1.0])

    def test_absorbing_start(self):
        mdp = TabularMdp(chain_2state(), 0.9, np.array([1.0, 0.0]), rho_min=0.0)
        pi = np.array([[0.0, 1.0], [0.0, 1.0]])
        np.testing.assert_allclose(discounted_visitation(mdp, pi), [1.0, 0.0], atol=1e-15)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_power_series(self, seed):
        rng = np.random.default_rng(seed)
        mdp = TabularMdp.random(rng, 4, 3, gamma=0.9)
        pi = softmax(rng.normal(size=(4, 3)))
        P_T = policy_transition(mdp, pi).T
        term, series = mdp.rho.copy(), np.zeros(4)
        for k in range(201):
            series += (1 - mdp.gamma) * mdp.gamma ** k * term
            term = P_T @ term
        np.testing.assert_allclose(discounted_visitation(mdp, pi), series, atol=1e-8)

    def test_sums_to_one_and_dominates_restart(self):
        rng = np.random.default_rng(9)
        mdp = TabularMdp.random(rng, 6, 2)
        d = discounted_visitation(mdp, softmax(rng.normal(size=(6, 2))))
        assert abs(d.sum() - 1) < 1e-10
        assert np.all(d >= (1 - mdp.gamma) * mdp.rho - 1e-15)


class TestValue:
    def test_zero_reward(self):
        mdp = TabularMdp(chain_2state(), 0.9, np.array([0.5, 0.5]))
        pi = np.array([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(exact_value(mdp, np.zeros((2, 2)), None, pi, 0.0), [0.0, 0.0])

    def test_one_state_geometric(self):
        mdp, r = one_state([1.0, 0.0], gamma=0.5)
        np.testing.assert_allclose(exact_value(mdp, r, None, np.full((1, 2), 0.5), 0.0), [1.0])

    def test_one_state_entropy(self):
        mdp, r = one_state([1.0, 0.0], gamma=0.5)
        V = exact_value(mdp, r, None, np.full((1, 2), 0.5), 0.5)
        np.testing.assert_allclose(V, [(0.5 + 0.5 * math.log(2)) / 0.5], rtol=1e-14)

    def test_bellman_residual(self):
        rng = np.random.default_rng(4)
        mdp = TabularMdp.random(rng, 5, 3)
        r = rng.normal(size=(5, 3))
        pi, tau = softmax(rng.normal(size=(5, 3))), 0.7
        V = exact_value(mdp, r, None, pi, tau)
        ent = -(pi * np.log(pi)).sum(axis=1)
        rhs = (pi * r).sum(axis=1) + tau * ent + mdp.gamma * policy_transition(mdp, pi) @ V
        assert np.max(np.abs(V - rhs)) <= 1e-10

    def test_negative_tau(self):
        mdp, r = one_state([1.0, 0.0])
        with pytest.raises(ValueError):
            exact_value(mdp, r, None, np.full((1, 2), 0.5), -0.1)

    def test_linear_solver_matches(self):
        rng = np.random.default_rng(5)
        mdp = TabularMdp.random(rng, 4, 2)
        pi = softmax(rng.normal(size=(4, 2)))
        rhs = rng.normal(size=4)
        np.testing.assert_allclose(LinearSolver(mdp, pi).value(rhs),
                                   np.linalg.solve(np.eye(4) - mdp.gamma * policy_transition(mdp, pi), rhs))
        np.testing.assert_allclose(LinearSolver(mdp, pi).visitation((1 - mdp.gamma) * mdp.rho),
                                   discounted_visitation(mdp, pi), atol=1e-14)


class TestReturn:
    def test_zero(self):
        mdp = TabularMdp.random(np.random.default_rng(0), 3, 2)
        assert exact_return(mdp, np.zeros(3)) == 0.0

    def test_point_mass(self):
        mdp = TabularMdp(chain_2state(), 0.9, np.array([1.0, 0.0]), rho_min=0.0)
        assert exact_return(mdp, np.array([3.5, -2.0])) == 3.5

    def test_uniform_rho(self):
        P = np.ones((4, 1, 4)) / 4
        mdp = TabularMdp(P, 0.9, np.full(4, 0.25))
        assert exact_return(mdp, np.array([1.0, 2.0, 3.0, 4.0])) == pytest.approx(2.5, abs=1e-15)


class TestAdvantage:
    def test_optimal_chain(self):
        mdp = TabularMdp(chain_2state(), 0.9, np.array([0.5, 0.5]))
        r = np.array([[0.0, 0.0], [1.0, 0.0]])
        pi = np.array([[1.0, 0.0], [1.0, 0.0]])
        V = exact_value(mdp, r, None, pi, 0.0)
        _, A = q_and_advantage(mdp, r, None, pi, 0.0, V)
        np.testing.assert_allclose(A[:, 0], 0.0, atol=1e-12)

    def test_direct_arithmetic(self):
        # gamma = 0 is outside the MDP's (0, 1); use a tiny gamma with V = 0.5 held fixed
        mdp, r = one_state([1.0, 0.0], gamma=1e-300)
        _, A = q_and_advantage(mdp, r, None, np.full((1, 2), 0.5), 0.0, np.array([0.5]))
        np.testing.assert_allclose(A, [[0.5, -0.5]])

    @pytest.mark.parametrize("tau", [0.0, 0.3])
    def test_weighted_advantage_vanishes(self, tau):
        rng = np.random.default_rng(6)
        mdp = TabularMdp.random(rng, 5, 3)
        r = rng.normal(size=(5, 3))
        pi = softmax(rng.normal(size=(5, 3)))
        V = exact_value(mdp, r, None, pi, tau)
        _, A = q_and_advantage(mdp, r, None, pi, tau, V)
        assert np.max(np.abs((pi * A).sum(axis=1))) <= 1e-9


def linear_reward(rng, nS, nA, d):
    return FeatureReward(rng.normal(size=(nS, nA)), rng.normal(size=(nS, nA, d)), 0.0,
                         x_lo=-np.ones(d), x_hi=np.ones(d))


class TestGradients:
    def test_x_independent_reward(self):
        rng = np.random.default_rng(0)
        mdp = TabularMdp.random(rng, 3, 2)
        reward = FeatureReward(rng.normal(size=(3, 2)), np.zeros((3, 2, 2)))
        np.testing.assert_array_equal(grad_x_return(mdp, reward, np.ones(2), uniform_policy(3, 2)), 0.0)

    def test_gridworld_center_symmetry(self):
        pb = GridWorldSpec(5, 5, 0.9, 1.0).build()
        g = grad_x_return(pb.mdp, pb.reward, pb.x0, uniform_policy(25, 4))
        np.testing.assert_allclose(g, 0.0, atol=1e-10)

    def test_linear_reward_closed_form(self):
        rng = np.random.default_rng(1)
        mdp = TabularMdp.random(rng, 4, 3)
        reward = linear_reward(rng, 4, 3, 2)
        pi = softmax(rng.normal(size=(4, 3)))
        d = discounted_visitation(mdp, pi)
        expected = np.einsum("s,sa,sai->i", d, pi, reward.features) / (1 - mdp.gamma)
        np.testing.assert_allclose(grad_x_return(mdp, reward, rng.normal(size=2), pi), expected, rtol=1e-12)

    def test_theta_symmetric_rewards(self):
        mdp = TabularMdp.random(np.random.default_rng(2), 3, 2)
        g = grad_theta_return(mdp, np.ones((3, 2)), None, np.zeros((3, 2)), 0.0)
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_theta_fd_small(self):
        rng = np.random.default_rng(7)
        mdp = TabularMdp.random(rng, 3, 2)
        r, theta, tau = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), 0.1
        eps, fd = 1e-6, np.zeros_like(theta)
        for idx in np.ndindex(theta.shape):
            e = np.zeros_like(theta)
            e[idx] = eps
            fd[idx] = (exact_return(mdp, exact_value(mdp, r, None, softmax(theta + e), tau))
                       - exact_return(mdp, exact_value(mdp, r, None, softmax(theta - e), tau))) / (2 * eps)
        np.testing.assert_allclose(grad_theta_return(mdp, r, None, theta, tau), fd, rtol=1e-6, atol=1e-9)

    def test_identities_on_20_instances(self):
        errs = gradient_identity_errors(20)
        assert errs.shape == (20, 2)
        assert errs.max() <= 1e-5

    def test_feature_reward_grad_fd(self):
        rng = np.random.default_rng(8)
        reward = FeatureReward(rng.normal(size=(2, 2)), rng.normal(size=(2, 2, 3)), 0.7)
        x = rng.normal(size=3)
        for s, a in np.ndindex(2, 2):
            fd = np.array([(reward.evaluate(x + h, s, a) - reward.evaluate(x - h, s, a)) / 2e-6
                           for h in 1e-6 * np.eye(3)])
            np.testing.assert_allclose(reward.grad_x(x, s, a), fd, rtol=1e-5)


def test_value_bound_formula():
    assert value_bound(1.0, 4, 0.9) == pytest.approx((1 + math.log(4)) / 0.1)
    assert value_bound(2.0, 4, 0.5, tau_cap=3.0) == pytest.approx((2 + 3 * math.log(4)) / 0.5)


@pytest.mark.parametrize("name", [n for n in CHECKS if n.startswith("mdp.")])
def test_mdp_invariants(name):
    passed, detail = CHECKS[name].fn()
    assert passed, detail
