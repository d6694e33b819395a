"""Bi-level problem bundle: lower MDP + parameterized reward + upper objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import FeatureReward, RewardModel, TabularMdp
from .policy import softmax_vjp


class UpperObjective:
    """Upper-level objective f(x, pi).

    ``grad_pi`` is the partial derivative treating the policy entries as free
    variables; ``grad_theta`` pulls it back through the softmax. Stochastic
    objectives override :meth:`sample_grads`; the exact methods double as the
    expectation hook used by enumeration and the oracles.
    """

    deterministic = True

    def value(self, x, pi) -> float:
        raise NotImplementedError

    def grad_x(self, x, pi) -> np.ndarray:
        raise NotImplementedError

    def grad_pi(self, x, pi) -> np.ndarray:
        raise NotImplementedError

    def grad_theta(self, x, pi) -> np.ndarray:
        return softmax_vjp(pi, self.grad_pi(x, pi))

    def sample_grads(self, x, pi, rng: np.random.Generator):
        """One (grad_x, grad_theta) sample; exact for deterministic objectives."""
        return self.grad_x(x, pi), self.grad_theta(x, pi)

    def lipschitz(self) -> tuple[float, float]:
        """Upper bounds on ||grad_x f|| and ||grad_theta f|| over the domain."""
        raise NotImplementedError


@dataclass
class LinearPolicyUpper(UpperObjective):
    """``f(x, pi) = kappa ||x - center||^2 + sum_{s,a} weights[s,a] pi(a|s) + const``."""

    kappa: float
    center: np.ndarray
    weights: np.ndarray
    const: float = 0.0
    x_lo: np.ndarray | None = None
    x_hi: np.ndarray | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)

    def value(self, x, pi):
        diff = np.asarray(x, dtype=float) - self.center
        return float(self.kappa * diff @ diff + (self.weights * pi).sum() + self.const)

    def grad_x(self, x, pi):
        return 2.0 * self.kappa * (np.asarray(x, dtype=float) - self.center)

    def grad_pi(self, x, pi):
        return self.weights

    def lipschitz(self):
        if self.x_lo is None:
            lx = np.inf
        else:
            far = np.maximum(np.abs(self.x_lo - self.center), np.abs(self.x_hi - self.center))
            lx = 2.0 * abs(self.kappa) * float(np.linalg.norm(far))
        # per state, ||pi * (g - pi.g)||_2 <= (max g - min g) / 2
        spread = self.weights.max(axis=1) - self.weights.min(axis=1)
        return lx, float(np.linalg.norm(spread / 2.0))


@dataclass
class BilevelProblem:
    """min_x f(x, pi*(x)) where pi*(x) solves the regularized lower MDP.

    x lives in the box [x_lo, x_hi] and is clamped there after every update.
    """

    mdp: TabularMdp
    reward: RewardModel
    upper: UpperObjective
    x0: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    name: str = "problem"

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.x_lo = np.asarray(self.x_lo, dtype=float)
        self.x_hi = np.asarray(self.x_hi, dtype=float)
        if self.x0.shape != (self.reward.dim_x,):
            raise ValueError("x0 dimension does not match the reward model")

    @property
    def dim_x(self) -> int:
        return self.reward.dim_x

    def project(self, x):
        return np.clip(x, self.x_lo, self.x_hi)

    @property
    def reward_shift(self) -> float:
        """r_min; the critic learns values of r - r_min."""
        return self.reward.reward_bounds()[0]

    @property
    def reward_range(self) -> float:
        lo, hi = self.reward.reward_bounds()
        return hi - lo

    def lipschitz(self) -> tuple[float, float, float]:
        """(L_r, L_f_x, L_f_theta)."""
        lfx, lft = self.upper.lipschitz()
        return self.reward.grad_bound(), lfx, lft

    def kernel_eligible(self) -> bool:
        return isinstance(self.reward, FeatureReward) and isinstance(self.upper, LinearPolicyUpper)


def random_problem(rng: np.random.Generator, num_states: int = 4, num_actions: int = 3,
                   dim_x: int = 2, gamma: float = 0.9, kappa: float = 0.5,
                   bound: float = 1.0) -> BilevelProblem:
    """Random instance with a linear-in-x reward and a linear-in-policy upper objective.

    x lives in [-bound, bound]^dim_x; rewards and upper weights are O(1).
    """
    mdp = TabularMdp.random(rng, num_states, num_actions, gamma)
    lo, hi = np.full(dim_x, -bound), np.full(dim_x, bound)
    base = rng.uniform(-0.5, 0.5, size=(num_states, num_actions))
    feats = rng.normal(scale=0.5, size=(num_states, num_actions, dim_x))
    reward = FeatureReward(base, feats, 0.0, x_lo=lo, x_hi=hi)
    weights = rng.normal(size=(num_states, num_actions))
    upper = LinearPolicyUpper(kappa, rng.uniform(-0.5, 0.5, size=dim_x), weights, x_lo=lo, x_hi=hi)
    x0 = rng.uniform(-0.5 * bound, 0.5 * bound, size=dim_x)
    return BilevelProblem(mdp, reward, upper, x0=x0, x_lo=lo, x_hi=hi, name="random")
