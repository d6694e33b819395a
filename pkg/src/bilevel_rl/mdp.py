"""Exact tabular MDP quantities.

Everything here is a pure function of its inputs. Policies are |S| x |A|
row-stochastic tables, values are length-|S| vectors, and rewards come from a
:class:`RewardModel` evaluated at the upper-level variable ``x``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.special import xlogy

from .policy import entropies, softmax

PROB_TOL = 1e-12


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with transition tensor ``P[s, a, s']``, discount and initial law."""

    transition: np.ndarray
    gamma: float
    rho: np.ndarray
    rho_min: float = 1e-6

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        rho = np.asarray(self.rho, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape |S| x |A| x |S|, got {P.shape}")
        if rho.shape != (P.shape[0],):
            raise ValueError(f"rho must have length {P.shape[0]}, got shape {rho.shape}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > PROB_TOL:
            raise ValueError("every transition slice P(.|s,a) must be a distribution")
        if abs(rho.sum() - 1.0) > PROB_TOL:
            raise ValueError("rho must sum to 1")
        if np.any(rho < self.rho_min):
            raise ValueError(f"rho must be bounded below by rho_min={self.rho_min}")
        P.setflags(write=False)
        rho.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "rho", rho)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @classmethod
    def random(cls, rng: np.random.Generator, num_states: int, num_actions: int,
               gamma: float = 0.9, concentration: float = 1.0) -> "TabularMdp":
        """Dirichlet-random kernel and initial law with full support."""
        P = rng.dirichlet(np.full(num_states, concentration), size=(num_states, num_actions))
        rho = rng.dirichlet(np.full(num_states, 2.0))
        rho = 0.9 * rho + 0.1 / num_states
        return cls(P, gamma, rho / rho.sum())


class RewardModel:
    """Reward r_x(s, a) depending smoothly on an upper-level vector x.

    Subclasses implement :meth:`table` and :meth:`grad_table`. ``reward_bounds``
    and ``grad_bound`` describe the reward over the admissible x domain; they
    size the critic box and the operator bounds.
    """

    dim_x: int

    def table(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_table(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, x, s: int, a: int) -> float:
        return float(self.table(np.asarray(x, dtype=float))[s, a])

    def grad_x(self, x, s: int, a: int) -> np.ndarray:
        return self.grad_table(np.asarray(x, dtype=float))[s, a]

    def reward_bounds(self) -> tuple[float, float]:
        raise NotImplementedError

    def grad_bound(self) -> float:
        raise NotImplementedError


@dataclass
class FeatureReward(RewardModel):
    """``r_x(s,a) = base[s,a] + features[s,a] . x - quad * ||x||^2``.

    Covers linear-in-x rewards (``quad = 0``) and the GridWorld negated squared
    distance. ``x_lo``/``x_hi`` bound the x domain for the reward range.
    """

    base: np.ndarray
    features: np.ndarray
    quad: float = 0.0
    x_lo: np.ndarray | None = None
    x_hi: np.ndarray | None = None
    _bounds: tuple | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float)
        self.features = np.asarray(self.features, dtype=float)
        if self.features.shape[:2] != self.base.shape:
            raise ValueError("features must have shape |S| x |A| x d matching base")
        if self.quad < 0:
            raise ValueError("quad must be nonnegative")
        if self.x_lo is not None:
            self.x_lo = np.asarray(self.x_lo, dtype=float)
            self.x_hi = np.asarray(self.x_hi, dtype=float)

    @property
    def dim_x(self) -> int:
        return self.features.shape[2]

    def table(self, x):
        x = np.asarray(x, dtype=float)
        return self.base + self.features @ x - self.quad * float(x @ x)

    def grad_table(self, x):
        x = np.asarray(x, dtype=float)
        return self.features - 2.0 * self.quad * x

    def evaluate(self, x, s, a):
        x = np.asarray(x, dtype=float)
        return float(self.base[s, a] + self.features[s, a] @ x - self.quad * (x @ x))

    def grad_x(self, x, s, a):
        return self.features[s, a] - 2.0 * self.quad * np.asarray(x, dtype=float)

    def _require_box(self):
        if self.x_lo is None:
            raise ValueError("reward bounds need a bounded x domain (x_lo, x_hi)")

    def reward_bounds(self):
        if self._bounds is None:
            self._require_box()
            lo, hi = self.x_lo, self.x_hi
            # per-coordinate terms features_i * x_i - quad * x_i^2 are separable
            cand = [np.broadcast_to(lo, self.features.shape), np.broadcast_to(hi, self.features.shape)]
            if self.quad > 0:
                crit = np.clip(self.features / (2 * self.quad), lo, hi)
                cand.append(crit)
            vals = [self.features * c - self.quad * c ** 2 for c in cand]
            tmax = np.max(vals, axis=0).sum(axis=2)
            tmin = np.min(vals, axis=0).sum(axis=2)
            self._bounds = (float((self.base + tmin).min()), float((self.base + tmax).max()))
        return self._bounds

    def grad_bound(self):
        self._require_box()
        # ||features - 2 quad x|| is convex in x: maximized at a vertex of the box
        best = 0.0
        for corner in itertools.product(*zip(self.x_lo, self.x_hi)):
            g = self.features - 2.0 * self.quad * np.asarray(corner)
            best = max(best, float(np.sqrt((g ** 2).sum(axis=2)).max()))
        return best


def reward_table(reward, x) -> np.ndarray:
    """Accept either a RewardModel or an explicit |S| x |A| table."""
    if isinstance(reward, RewardModel):
        return reward.table(x)
    return np.asarray(reward, dtype=float)


def _check_policy(mdp: TabularMdp, pi: np.ndarray):
    if pi.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(f"policy shape {pi.shape} does not match MDP "
                         f"({mdp.num_states}, {mdp.num_actions})")


def policy_transition(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """State-to-state kernel P^pi(s'|s) = sum_a pi(a|s) P(s'|s,a)."""
    pi = np.asarray(pi, dtype=float)
    _check_policy(mdp, pi)
    return np.einsum("sa,sat->st", pi, mdp.transition)


def discounted_visitation(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """d_rho^pi, solving d = (1-gamma) rho + gamma (P^pi)^T d."""
    P_pi = policy_transition(mdp, pi)
    n = mdp.num_states
    d = np.linalg.solve(np.eye(n) - mdp.gamma * P_pi.T, (1.0 - mdp.gamma) * mdp.rho)
    return d


def exact_value(mdp: TabularMdp, reward, x, pi: np.ndarray, tau: float) -> np.ndarray:
    """Entropy-regularized value V_tau^{x,pi} by a dense linear solve."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    pi = np.asarray(pi, dtype=float)
    P_pi = policy_transition(mdp, pi)
    r = reward_table(reward, x)
    rhs = (pi * r).sum(axis=1) + tau * entropies(pi)
    return np.linalg.solve(np.eye(mdp.num_states) - mdp.gamma * P_pi, rhs)


def exact_return(mdp: TabularMdp, V: np.ndarray) -> float:
    """J_tau = rho^T V."""
    return float(mdp.rho @ V)


def q_and_advantage(mdp: TabularMdp, reward, x, pi: np.ndarray, tau: float,
                    V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Regularized Q and advantage A = Q - tau log pi - V.

    Entries where pi(a|s) == 0 get A = +inf for tau > 0 (the log-barrier).
    """
    r = reward_table(reward, x)
    Q = r + mdp.gamma * mdp.transition @ V
    with np.errstate(divide="ignore"):
        logp = np.log(pi)
    A = Q - V[:, None]
    if tau > 0:
        A = A - tau * logp
    return Q, A


def grad_x_return(mdp: TabularMdp, reward: RewardModel, x, pi: np.ndarray) -> np.ndarray:
    """grad_x J_tau(x, pi) = E_{d_rho^pi, pi}[grad_x r_x(s,a)] / (1 - gamma).

    Independent of tau since the entropy term does not depend on x.
    """
    d = discounted_visitation(mdp, pi)
    G = reward.grad_table(np.asarray(x, dtype=float))
    return np.einsum("s,sa,sai->i", d, pi, G) / (1.0 - mdp.gamma)


def grad_theta_return(mdp: TabularMdp, reward, x, theta: np.ndarray, tau: float) -> np.ndarray:
    """dJ_tau/dtheta(s,a) = d(s) pi(a|s) A_tau(s,a) / (1 - gamma)."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    pi = softmax(theta)
    return _grad_theta_from_pi(mdp, reward_table(reward, x), pi, tau)


def _grad_theta_from_pi(mdp, r, pi, tau, V=None, d=None):
    if V is None:
        V = exact_value(mdp, r, None, pi, tau)
    if d is None:
        d = discounted_visitation(mdp, pi)
    Q = r + mdp.gamma * mdp.transition @ V
    # pi * A without forming log(0)
    piA = pi * (Q - V[:, None]) - tau * xlogy(pi, pi)
    return d[:, None] * piA / (1.0 - mdp.gamma)


class LinearSolver:
    """Cached LU factorization of (I - gamma P^pi) for repeated solves."""

    def __init__(self, mdp: TabularMdp, pi: np.ndarray):
        P_pi = policy_transition(mdp, pi)
        self._lu = lu_factor(np.eye(mdp.num_states) - mdp.gamma * P_pi)

    def value(self, rhs: np.ndarray) -> np.ndarray:
        return lu_solve(self._lu, rhs)

    def visitation(self, rhs: np.ndarray) -> np.ndarray:
        return lu_solve(self._lu, rhs, trans=1)


def value_bound(reward_range: float, num_actions: int, gamma: float, tau_cap: float = 1.0) -> float:
    """B_V for critic values of the shifted reward r - r_min."""
    return (reward_range + max(1.0, tau_cap) * np.log(num_actions)) / (1.0 - gamma)
