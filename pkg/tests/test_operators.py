import math

import numpy as np
import pytest

from bilevel_rl.actor_critic import iid_sample
from bilevel_rl.envs.gridworld import GridWorldSpec
from bilevel_rl.mdp import FeatureReward, TabularMdp, discounted_visitation, exact_value, grad_theta_return
from bilevel_rl.operators import (ENUMERATION_LIMIT, BoundViolation, OperatorBounds, OperatorSample,
                                  expected_D, expected_F, expected_G, sample_D, sample_F, sample_G)
from bilevel_rl.oracles import ExactOracles, central_difference
from bilevel_rl.policy import log_policy_grad, softmax
from bilevel_rl.problem import BilevelProblem, LinearPolicyUpper, random_problem
from bilevel_rl.verify import CHECKS, operator_identity_errors


def constant_reward_problem(value=1.0, num_states=3, num_actions=2, gamma=0.9, seed=0):
    """Reward r = value everywhere, independent of x; f depends on x only."""
    rng = np.random.default_rng(seed)
    mdp = TabularMdp.random(rng, num_states, num_actions, gamma)
    reward = FeatureReward(np.full((num_states, num_actions), value), np.zeros((num_states, num_actions, 2)),
                           x_lo=-np.ones(2), x_hi=np.ones(2))
    upper = LinearPolicyUpper(1.0, np.zeros(2), np.zeros((num_states, num_actions)),
                              x_lo=-np.ones(2), x_hi=np.ones(2))
    return BilevelProblem(mdp, reward, upper, np.array([0.3, -0.2]), -np.ones(2), np.ones(2))


class TestSampleD:
    def test_equal_draws_and_zero_upper_gradient_cancel(self):
        pb = random_problem(np.random.default_rng(0), 4, 3, 2)
        pi = softmax(np.zeros((4, 3)))
        out = sample_D(pb, pb.x0, pi, 2, 1, 2, 1, 0.3, grad_f_x=np.zeros(2))
        np.testing.assert_array_equal(out.value, 0.0)

    def test_x_independent_reward_leaves_upper_gradient(self):
        pb = constant_reward_problem()
        pi = softmax(np.zeros((3, 2)))
        out = sample_D(pb, pb.x0, pi, 0, 1, 2, 0, 0.05)
        np.testing.assert_allclose(out.value, 2.0 * pb.x0, rtol=1e-15)

    def test_gridworld_hand_composed(self):
        spec = GridWorldSpec()
        pb = spec.build()
        x, w, gamma = np.array([3.25, 6.5]), 0.1, spec.gamma
        pi_L = softmax(np.random.default_rng(1).normal(size=(100, 4)))
        s, sb = 37, 82
        cs, csb = spec.coords()[s], spec.coords()[sb]
        expected = 2.0 * (x - spec.center) + (2.0 * (cs - x) - 2.0 * (csb - x)) / (w * (1 - gamma))
        out = sample_D(pb, x, pi_L, s, 0, sb, 3, w)
        np.testing.assert_allclose(out.value, expected, rtol=1e-13)

    def test_uncorrected_scale(self):
        pb = random_problem(np.random.default_rng(2), 3, 2, 2)
        pi = softmax(np.zeros((3, 2)))
        a = sample_D(pb, pb.x0, pi, 0, 0, 1, 1, 0.2, grad_f_x=np.zeros(2))
        b = sample_D(pb, pb.x0, pi, 0, 0, 1, 1, 0.2, grad_f_x=np.zeros(2), entropy_correction=False)
        np.testing.assert_allclose(a.value * (1 - pb.mdp.gamma), b.value, rtol=1e-13)

    @pytest.mark.parametrize("w", [0.0, -1.0])
    def test_nonpositive_w_rejected(self, w):
        pb = random_problem(np.random.default_rng(3), 3, 2, 2)
        with pytest.raises(ValueError):
            sample_D(pb, pb.x0, softmax(np.zeros((3, 2))), 0, 0, 1, 1, w)


class TestSampleF:
    def test_single_term_form(self):
        pb = constant_reward_problem(1.0)
        theta = np.random.default_rng(4).normal(size=(3, 2))
        pi = softmax(theta)
        out = sample_F(pb, pb.x0, pi, np.zeros(3), 1, 0, 2, 0.0, 0.0, entropy_correction=False)
        np.testing.assert_allclose(out.value, log_policy_grad(theta, 1, 0), rtol=1e-15)

    def test_corrected_form_scales(self):
        pb = constant_reward_problem(1.0)
        theta = np.random.default_rng(4).normal(size=(3, 2))
        out = sample_F(pb, pb.x0, softmax(theta), np.zeros(3), 1, 0, 2, 0.0, 0.0)
        np.testing.assert_allclose(out.value, log_policy_grad(theta, 1, 0) / (1 - pb.mdp.gamma), rtol=1e-14)

    def test_zero_td_error_gives_zero(self):
        # deterministic self-loops: V(s) = (r + tau H) / (1 - gamma) makes the TD error vanish
        gamma, tau = 0.8, 0.0
        P = np.zeros((2, 2, 2))
        P[0, :, 0] = 1.0
        P[1, :, 1] = 1.0
        mdp = TabularMdp(P, gamma, np.array([0.5, 0.5]))
        reward = FeatureReward(np.full((2, 2), 0.7), np.zeros((2, 2, 1)), x_lo=-np.ones(1), x_hi=np.ones(1))
        upper = LinearPolicyUpper(0.0, np.zeros(1), np.zeros((2, 2)), x_lo=-np.ones(1), x_hi=np.ones(1))
        pb = BilevelProblem(mdp, reward, upper, np.zeros(1), -np.ones(1), np.ones(1))
        V = np.full(2, 0.7 / (1 - gamma))
        pi = softmax(np.array([[0.3, -0.1], [1.0, 0.0]]))
        for s in range(2):
            out = sample_F(pb, pb.x0, pi, V, s, 1, s, 0.0, tau)
            np.testing.assert_allclose(out.value, 0.0, atol=1e-13)

    def test_penalty_term(self):
        pb = random_problem(np.random.default_rng(5), 3, 2, 2)
        theta = np.random.default_rng(6).normal(size=(3, 2))
        pi, V = softmax(theta), np.full(3, 0.4)
        plain = sample_F(pb, pb.x0, pi, V, 0, 1, 2, 0.0, 0.3).value
        pen = sample_F(pb, pb.x0, pi, V, 0, 1, 2, 0.25, 0.3).value
        np.testing.assert_allclose(pen, plain - 0.25 * pb.upper.grad_theta(pb.x0, pi), rtol=1e-14)

    def test_negative_arguments_rejected(self):
        pb = random_problem(np.random.default_rng(5), 3, 2, 2)
        pi = softmax(np.zeros((3, 2)))
        with pytest.raises(ValueError):
            sample_F(pb, pb.x0, pi, np.zeros(3), 0, 0, 0, -0.1, 0.3)
        with pytest.raises(ValueError):
            sample_F(pb, pb.x0, pi, np.zeros(3), 0, 0, 0, 0.1, -0.3)


class TestSampleG:
    def test_unit_reward_gives_basis_vector(self):
        pb = constant_reward_problem(1.0)
        out = sample_G(pb, pb.x0, softmax(np.zeros((3, 2))), np.zeros(3), 2, 1, 0, 0.0)
        np.testing.assert_array_equal(out.value, [0.0, 0.0, 1.0])

    def test_zero_td_error(self):
        pb = constant_reward_problem(1.0)
        V = np.full(3, 1.0 / (1 - pb.mdp.gamma))
        out = sample_G(pb, pb.x0, softmax(np.zeros((3, 2))), V, 1, 0, 2, 0.0)
        np.testing.assert_allclose(out.value, 0.0, atol=1e-14)

    def test_support_single_coordinate(self):
        pb = random_problem(np.random.default_rng(7), 4, 3, 2)
        out = sample_G(pb, pb.x0, softmax(np.zeros((4, 3))), np.full(4, 0.2), 3, 2, 1, 0.5)
        assert np.count_nonzero(out.value[:3]) == 0 and out.value[3] != 0


class TestBounds:
    def test_sample_check(self):
        OperatorSample(np.array([3.0, 4.0]), 5.0).check()
        with pytest.raises(BoundViolation):
            OperatorSample(np.array([3.0, 4.0]), 4.9).check()

    @pytest.mark.parametrize("seed", range(3))
    def test_sweep_of_random_draws(self, seed):
        # w <= L_r / L_f and tau <= 1; V-hat in the box, uniform random (s, a, s') and logits
        rng = np.random.default_rng(50 + seed)
        pb = random_problem(rng, 4, 3, 2)
        L_r, L_fx, _ = pb.lipschitz()
        bounds = OperatorBounds.from_problem(pb)
        w_max = min(1.0, L_r / L_fx)
        for _ in range(10_000 // 3):
            x = rng.uniform(pb.x_lo, pb.x_hi)
            theta = rng.normal(scale=2.0, size=(4, 3))
            pi, pi_L = softmax(theta), softmax(rng.normal(scale=2.0, size=(4, 3)))
            V = rng.uniform(0, bounds.B_V, size=4)
            s, a, s1, sb, ab = rng.integers(0, [4, 3, 4, 4, 3])
            w, tau = rng.uniform(0.01, 1.0) * w_max, rng.uniform(0, 1)
            shift = pb.reward_shift
            sample_F(pb, x, pi, V, s, a, s1, w, tau, shift=shift, bounds=bounds).check()
            sample_G(pb, x, pi, V, s, a, s1, tau, shift=shift, bounds=bounds).check()
            sample_D(pb, x, pi_L, s, a, sb, ab, w, bounds=bounds).check()

    def test_closed_forms(self):
        b = OperatorBounds(0.9, 3, 2.0, 1.0, 1.5, 0.7, 0.4, entropy_correction=False)
        assert b.B_G == pytest.approx(1.9 * b.B_V + math.log(3) + 2.0, rel=1e-15)
        assert b.B_D == pytest.approx(4.5, rel=1e-15)
        assert b.D(0.5) == pytest.approx(0.7 + 6.0, rel=1e-15)
        assert b.F(0.5) == pytest.approx(2 * b.B_G + 0.2, rel=1e-15)


class TestExpectations:
    def test_expected_G_zero_at_exact_value(self):
        pb = random_problem(np.random.default_rng(8), 4, 3, 2)
        theta = np.random.default_rng(9).normal(size=(4, 3))
        V = exact_value(pb.mdp, pb.reward, pb.x0, softmax(theta), 0.4)
        np.testing.assert_allclose(expected_G(pb, pb.x0, theta, V, 0.4), 0.0, atol=1e-10)

    def test_expected_F_equals_return_gradient(self):
        pb = random_problem(np.random.default_rng(10), 4, 3, 2)
        theta = np.random.default_rng(11).normal(size=(4, 3))
        V = exact_value(pb.mdp, pb.reward, pb.x0, softmax(theta), 0.4)
        np.testing.assert_allclose(expected_F(pb, pb.x0, theta, V, 0.0, 0.4),
                                   grad_theta_return(pb.mdp, pb.reward, pb.x0, theta, 0.4), atol=1e-10)

    def test_expected_F_is_negative_scaled_lagrangian_gradient(self):
        pb = random_problem(np.random.default_rng(12), 3, 2, 2)
        theta = np.random.default_rng(13).normal(size=(3, 2))
        w, tau = 0.3, 0.5
        o = ExactOracles(pb)
        V = exact_value(pb.mdp, pb.reward, pb.x0, softmax(theta), tau)
        F = expected_F(pb, pb.x0, theta, V, w, tau)
        fd = central_difference(lambda th: o.lagrangian(pb.x0, softmax(th.reshape(3, 2)), w, tau),
                                theta.ravel(), 1e-5).reshape(3, 2)
        np.testing.assert_allclose(F, -w * fd, atol=1e-8)

    def test_expected_D_at_oracle_policies(self):
        pb = random_problem(np.random.default_rng(14), 3, 2, 2)
        o = ExactOracles(pb)
        w, tau = 0.4, 0.5
        D = expected_D(pb, pb.x0, o.soft_optimum(pb.x0, tau)[1], o.lagrangian_optimum(pb.x0, w, tau), w)
        np.testing.assert_allclose(D, o.penalty_hypergrad(pb.x0, w, tau), atol=1e-10)

    def test_shifted_critic_coordinates(self):
        pb = random_problem(np.random.default_rng(15), 4, 2, 2)
        theta = np.zeros((4, 2))
        V = exact_value(pb.mdp, pb.reward, pb.x0, softmax(theta), 0.3)
        shift = 0.8
        G = expected_G(pb, pb.x0, theta, V - shift / (1 - pb.mdp.gamma), 0.3, shift)
        np.testing.assert_allclose(G, 0.0, atol=1e-10)

    def test_baseline_invariance(self):
        pb = random_problem(np.random.default_rng(16), 4, 3, 2)
        theta = np.random.default_rng(17).normal(size=(4, 3))
        V = np.random.default_rng(18).uniform(0, 3, size=4)
        a = expected_F(pb, pb.x0, theta, V, 0.2, 0.3)
        b = expected_F(pb, pb.x0, theta, V, 0.2, 0.3, include_baseline=False)
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_sample_mean_matches_expected_G(self):
        pb = random_problem(np.random.default_rng(19), 3, 2, 2)
        theta = np.random.default_rng(20).normal(size=(3, 2))
        pi, V = softmax(theta), np.full(3, 0.5)
        rng = np.random.default_rng(21)
        d = discounted_visitation(pb.mdp, pi)
        draws = np.array([sample_G(pb, pb.x0, pi, V, *iid_sample(pb.mdp, pi, rng, d), 0.3).value
                          for _ in range(40_000)])
        se = draws.std(axis=0, ddof=1) / math.sqrt(len(draws))
        z = np.abs(draws.mean(axis=0) - expected_G(pb, pb.x0, theta, V, 0.3)) / se
        assert z.max() <= 4.0

    def test_enumeration_guard(self):
        n = int(round((ENUMERATION_LIMIT / 2) ** 0.5)) + 2
        P = np.zeros((n, 2, n))
        P[:, :, 0] = 1.0
        mdp = TabularMdp(P, 0.5, np.full(n, 1.0 / n))
        reward = FeatureReward(np.zeros((n, 2)), np.zeros((n, 2, 1)), x_lo=-np.ones(1), x_hi=np.ones(1))
        upper = LinearPolicyUpper(0.0, np.zeros(1), np.zeros((n, 2)), x_lo=-np.ones(1), x_hi=np.ones(1))
        pb = BilevelProblem(mdp, reward, upper, np.zeros(1), -np.ones(1), np.ones(1))
        with pytest.raises(ValueError, match="ENUMERATION_LIMIT"):
            expected_G(pb, pb.x0, np.zeros((n, 2)), np.zeros(n), 0.1)


def test_identity_errors_small():
    errs = operator_identity_errors(num=2)
    assert max(errs.values()) <= 1e-10


@pytest.mark.parametrize("name", [n for n in CHECKS if n.startswith("operators.")])
def test_operator_invariants(name):
    passed, detail = CHECKS[name].fn()
    assert passed, detail
