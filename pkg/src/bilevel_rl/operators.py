"""Stochastic update operators D, F, G, their exact expectations, and bounds.

Orientation: the lower level maximizes J_tau and the policy iterates ascend
F. With exact values, E[F_{0,tau}] = grad_theta J_tau and
E[F_{w,tau}] = -grad_theta (w * L_{w,tau}).

Critic values may live in shifted coordinates: ``shift`` is the constant
subtracted from every reward, so the TD error is the same whether the critic
tracks V or V - shift / (1 - gamma).

By default F and D carry a 1/(1-gamma) factor and F adds the per-state entropy
gradient, which makes the expectations equal the true gradients. Setting
``entropy_correction=False`` gives the uncorrected operators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import discounted_visitation, reward_table, value_bound
from .policy import entropies, entropy, entropy_grad, log_policy_grad, softmax

ENUMERATION_LIMIT = 2_000_000


class BoundViolation(AssertionError):
    pass


@dataclass(frozen=True)
class OperatorSample:
    value: np.ndarray
    bound_used: float

    def check(self):
        norm = float(np.linalg.norm(self.value))
        if not norm <= self.bound_used * (1.0 + 1e-12):
            raise BoundViolation(f"operator norm {norm:.6g} exceeds bound {self.bound_used:.6g}")
        return self


@dataclass(frozen=True)
class OperatorBounds:
    """Norm bounds for the sampled operators.

    ``reward_range`` is r_max - r_min over the x domain; ``tau_cap`` the
    largest regularization weight of the run (at least 1 in the formulas).
    """

    gamma: float
    num_actions: int
    reward_range: float
    tau_cap: float
    L_r: float
    L_fx: float
    L_ftheta: float
    entropy_correction: bool = True

    @classmethod
    def from_problem(cls, problem, tau_cap: float = 1.0, entropy_correction: bool = True):
        L_r, L_fx, L_ft = problem.lipschitz()
        return cls(problem.mdp.gamma, problem.mdp.num_actions, problem.reward_range,
                   tau_cap, L_r, L_fx, L_ft, entropy_correction)

    @property
    def _tc(self) -> float:
        return max(1.0, self.tau_cap)

    @property
    def B_V(self) -> float:
        return value_bound(self.reward_range, self.num_actions, self.gamma, self.tau_cap)

    @property
    def B_G(self) -> float:
        log_a = np.log(self.num_actions)
        return (1.0 + self.gamma) * self.B_V + self._tc * log_a + self.reward_range

    @property
    def B_D(self) -> float:
        """Numerator of the D bound when w <= L_r / L_f_x."""
        scale = 1.0 / (1.0 - self.gamma) if self.entropy_correction else 1.0
        return 3.0 * self.L_r * scale

    def F(self, w: float) -> float:
        log_a = np.log(self.num_actions)
        if self.entropy_correction:
            td = (2.0 * self.B_G + 2.0 * self._tc * log_a) / (1.0 - self.gamma)
        else:
            td = 2.0 * self.B_G
        return td + w * self.L_ftheta

    def D(self, w: float) -> float:
        scale = 1.0 / (1.0 - self.gamma) if self.entropy_correction else 1.0
        return self.L_fx + 2.0 * self.L_r * scale / w


def _td_error(problem, x, pi, v_hat, s, a, s_next, tau, shift, baseline=True):
    gamma = problem.mdp.gamma
    target = problem.reward.evaluate(x, s, a) - shift + tau * entropy(pi, s) + gamma * v_hat[s_next]
    return target - v_hat[s] if baseline else target


def sample_D(problem, x, pi_L, s: int, a: int, s_bar: int, a_bar: int, w: float,
             grad_f_x=None, bounds: OperatorBounds | None = None,
             entropy_correction: bool = True) -> OperatorSample:
    """grad_x f(x, pi^L, xi) + (grad_x r(s,a) - grad_x r(s_bar,a_bar)) / (w (1-gamma)).

    (s, a) comes from the pi_theta trajectory and (s_bar, a_bar) from pi^L.
    """
    if not w > 0:
        raise ValueError("sample_D needs w > 0")
    if grad_f_x is None:
        grad_f_x = problem.upper.grad_x(x, pi_L)
    scale = w * (1.0 - problem.mdp.gamma) if entropy_correction else w
    diff = problem.reward.grad_x(x, s, a) - problem.reward.grad_x(x, s_bar, a_bar)
    value = np.asarray(grad_f_x, dtype=float) + diff / scale
    return OperatorSample(value, bounds.D(w) if bounds else np.inf)


def sample_F(problem, x, pi, v_hat, s: int, a: int, s_next: int, w: float, tau: float,
             grad_f_theta=None, shift: float = 0.0, include_baseline: bool = True,
             entropy_correction: bool = True,
             bounds: OperatorBounds | None = None) -> OperatorSample:
    """Actor operator F_{w,tau}; w = 0 gives the plain policy-gradient sample."""
    if w < 0 or tau < 0:
        raise ValueError("sample_F needs w >= 0 and tau >= 0")
    td = _td_error(problem, x, pi, v_hat, s, a, s_next, tau, shift, include_baseline)
    value = td * log_policy_grad(None, s, a, pi)
    if entropy_correction:
        value[s] += tau * entropy_grad(pi, s)
        value /= 1.0 - problem.mdp.gamma
    if w > 0:
        if grad_f_theta is None:
            grad_f_theta = problem.upper.grad_theta(x, pi)
        value -= w * grad_f_theta
    return OperatorSample(value, bounds.F(w) if bounds else np.inf)


def sample_G(problem, x, pi, v_hat, s: int, a: int, s_next: int, tau: float,
             shift: float = 0.0, bounds: OperatorBounds | None = None) -> OperatorSample:
    """Critic operator e_s * (TD error)."""
    value = np.zeros(problem.mdp.num_states)
    value[s] = _td_error(problem, x, pi, v_hat, s, a, s_next, tau, shift)
    return OperatorSample(value, bounds.B_G if bounds else np.inf)


def _guard(mdp):
    size = mdp.num_states * mdp.num_actions * mdp.num_states
    if size > ENUMERATION_LIMIT:
        raise ValueError(f"enumeration over {size} (s, a, s') triples exceeds ENUMERATION_LIMIT")


def _expected_td(problem, x, pi, V, tau, shift, include_baseline=True):
    """E_{s'}[TD](s, a) as an |S| x |A| table."""
    mdp = problem.mdp
    r = reward_table(problem.reward, x) - shift
    td = r + tau * entropies(pi)[:, None] + mdp.gamma * mdp.transition @ V
    return td - V[:, None] if include_baseline else td


def expected_D(problem, x, pi, pi_L, w: float, entropy_correction: bool = True) -> np.ndarray:
    """E over s ~ d^pi, a ~ pi, s_bar ~ d^{pi_L}, a_bar ~ pi_L and xi of sample_D."""
    mdp = problem.mdp
    _guard(mdp)
    G = problem.reward.grad_table(np.asarray(x, dtype=float))
    d, d_L = discounted_visitation(mdp, pi), discounted_visitation(mdp, pi_L)
    mean = np.einsum("s,sa,sai->i", d, pi, G)
    mean_L = np.einsum("s,sa,sai->i", d_L, pi_L, G)
    scale = w * (1.0 - mdp.gamma) if entropy_correction else w
    return problem.upper.grad_x(x, pi_L) + (mean - mean_L) / scale


def expected_F(problem, x, theta, V, w: float, tau: float, shift: float = 0.0,
               include_baseline: bool = True, entropy_correction: bool = True) -> np.ndarray:
    """E over s ~ d^pi, a ~ pi, s' ~ P and xi of sample_F."""
    mdp = problem.mdp
    _guard(mdp)
    pi = softmax(theta)
    d = discounted_visitation(mdp, pi)
    td = _expected_td(problem, x, pi, np.asarray(V, dtype=float), tau, shift, include_baseline)
    # sum_a pi(a|s) td(s,a) (e_a - pi(.|s))
    score = pi * (td - (pi * td).sum(axis=1, keepdims=True))
    out = d[:, None] * score
    if entropy_correction:
        ent_grad = np.stack([entropy_grad(pi, s) for s in range(mdp.num_states)])
        out = (out + tau * d[:, None] * ent_grad) / (1.0 - mdp.gamma)
    if w > 0:
        out = out - w * problem.upper.grad_theta(x, pi)
    return out


def expected_G(problem, x, theta, V, tau: float, shift: float = 0.0) -> np.ndarray:
    """E over s ~ d^pi, a ~ pi, s' ~ P of sample_G; zero at the exact value."""
    mdp = problem.mdp
    _guard(mdp)
    pi = softmax(theta)
    d = discounted_visitation(mdp, pi)
    td = _expected_td(problem, x, pi, np.asarray(V, dtype=float), tau, shift)
    return d * (pi * td).sum(axis=1)


__all__ = [
    "BoundViolation", "OperatorSample", "OperatorBounds", "sample_D", "sample_F", "sample_G",
    "expected_D", "expected_F", "expected_G", "ENUMERATION_LIMIT",
]
