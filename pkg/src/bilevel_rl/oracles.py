"""Ground-truth solvers for evaluation and testing.

These compute the objects the stochastic algorithm only approximates: the soft
optimal policy pi_tau*(x), the Lagrangian minimizer pi_{w,tau}*(x), the
penalty hypergradient, finite-difference hypergradients of Phi_tau, the
bi-level objective Phi(x), and the four Lyapunov residuals.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import minimize
from scipy.special import logsumexp

from .mdp import (
    LinearSolver,
    TabularMdp,
    _grad_theta_from_pi,
    discounted_visitation,
    exact_return,
    exact_value,
    grad_x_return,
    reward_table,
)
from .policy import entropies, softmax

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class OracleConfig:
    svi_tol: float = 1e-12
    svi_max_iter: int = 20000
    gd_tol: float = 1e-9
    gd_max_iter: int = 20000
    fd_step: float = 1e-5
    phi_eval_tau: float = 1e-6
    phi_refine_tol: float = 1e-4
    method: str = "lbfgs"

    def __post_init__(self):
        for name in ("svi_tol", "gd_tol", "fd_step", "phi_eval_tau", "phi_refine_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"OracleConfig.{name} must be positive")
        if self.method not in ("lbfgs", "gd"):
            raise ValueError(f"unknown Lagrangian solver method {self.method!r}")


DEFAULT_CONFIG = OracleConfig()


def _soft_backup(mdp, r, V, tau):
    Q = r + mdp.gamma * mdp.transition @ V
    return Q, tau * logsumexp(Q / tau, axis=1)


def soft_value_iteration(mdp: TabularMdp, reward, x, tau: float,
                         config: OracleConfig = DEFAULT_CONFIG,
                         V0: np.ndarray | None = None,
                         accelerate: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Fixed point of V <- tau log sum_a exp((r + gamma P V)/tau).

    With ``accelerate`` each backup is followed by exact evaluation of the
    soft-greedy policy (soft policy iteration), which converges in a handful
    of sweeps. Returns (V*, pi_tau*).
    """
    if not tau > 0:
        raise ValueError("soft value iteration needs tau > 0")
    r = reward_table(reward, x)
    V = np.zeros(mdp.num_states) if V0 is None else np.array(V0, dtype=float)
    residual = np.inf
    for _ in range(config.svi_max_iter):
        Q, V_new = _soft_backup(mdp, r, V, tau)
        residual = float(np.max(np.abs(V_new - V)))
        if residual <= config.svi_tol * max(1.0, float(np.max(np.abs(V_new)))):
            V = V_new
            break
        if accelerate:
            pi = softmax((Q - V_new[:, None]) / tau)
            V_eval = exact_value(mdp, r, None, pi, tau)
            # keep the sweep monotone: evaluation of the improved policy dominates V_new
            V = V_eval if np.all(np.isfinite(V_eval)) else V_new
        else:
            V = V_new
    else:
        raise ConvergenceError("soft value iteration hit svi_max_iter", residual)
    Q = r + mdp.gamma * mdp.transition @ V
    pi = softmax((Q - V[:, None]) / tau)
    return V, pi


def bellman_residual(mdp, reward, x, V, tau) -> float:
    _, TV = _soft_backup(mdp, reward_table(reward, x), V, tau)
    return float(np.max(np.abs(TV - V)))


def _return_and_grad(mdp, r, theta, tau):
    pi = softmax(theta)
    solver = LinearSolver(mdp, pi)
    V = solver.value((pi * r).sum(axis=1) + tau * entropies(pi))
    d = solver.visitation((1.0 - mdp.gamma) * mdp.rho)
    return exact_return(mdp, V), _grad_theta_from_pi(mdp, r, pi, tau, V=V, d=d), pi


def _lagrangian_grad(mdp, r, upper, x, w, tau, theta):
    """Gradient of w*f - J_tau in theta; complex-safe for complex-step Hessians."""
    m = theta.real.max(axis=1, keepdims=True)
    z = np.exp(theta - m)
    total = z.sum(axis=1, keepdims=True)
    pi = z / total
    logp = theta - m - np.log(total)
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    lu = lu_factor(np.eye(mdp.num_states) - mdp.gamma * P_pi)
    V = lu_solve(lu, (pi * (r - tau * logp)).sum(axis=1))
    d = lu_solve(lu, (1.0 - mdp.gamma) * mdp.rho, trans=1)
    Q = r + mdp.gamma * mdp.transition @ V
    grad_J = d[:, None] * pi * (Q - tau * logp - V[:, None]) / (1.0 - mdp.gamma)
    return w * upper.grad_theta(x, pi) - grad_J


def _lagrangian_fn(mdp, r, upper, x, w, tau, shape):
    """Objective w*f - J_tau over flat theta (w*L up to a theta-free constant)."""

    def fn(flat):
        theta = flat.reshape(shape)
        J, gJ, pi = _return_and_grad(mdp, r, theta, tau)
        val = w * upper.value(x, pi) - J
        grad = w * upper.grad_theta(x, pi) - gJ
        return val, grad.ravel()

    return fn


def _hessian(grad_fn, theta, fd=1e-5):
    """Hessian columns by complex step; central differences if the path is not complex-safe."""
    n = theta.size
    H = np.empty((n, n))
    try:
        for i in range(n):
            e = np.zeros(n, dtype=complex)
            e[i] = 1e-30j
            H[:, i] = grad_fn((theta + e).reshape(theta.shape)).imag.ravel() / 1e-30
    except (TypeError, ValueError):
        for i in range(n):
            e = np.zeros(n)
            e[i] = fd
            plus = grad_fn((theta + e).reshape(theta.shape)).ravel()
            minus = grad_fn((theta - e).reshape(theta.shape)).ravel()
            H[:, i] = (plus - minus) / (2 * fd)
    return 0.5 * (H + H.T)


def _newton_polish(fn, grad_fn, theta, tol, max_iter=200):
    """Saddle-free Newton with an Armijo search on the objective.

    When objective changes drop below float resolution the search accepts any
    step that shrinks the gradient norm instead.
    """
    val, g = fn(theta)
    gnorm = float(np.linalg.norm(g))
    for _ in range(max_iter):
        if gnorm <= tol:
            break
        lam, U = np.linalg.eigh(_hessian(grad_fn, theta))
        keep = np.abs(lam) > 1e-13 * max(1.0, np.abs(lam).max())
        step = -U[:, keep] @ ((U[:, keep].T @ g) / np.abs(lam[keep]))
        slope = float(g @ step)
        scale = 1.0
        while scale > 1e-12:
            cval, cg = fn(theta + scale * step)
            if cval <= val + 1e-4 * scale * slope:
                break
            flat = abs(cval - val) <= 1e-13 * max(1.0, abs(val))
            if flat and np.linalg.norm(cg) < gnorm:
                break
            scale *= 0.5
        else:
            break
        theta = theta + scale * step
        val, g, gnorm = cval, cg, float(np.linalg.norm(cg))
    return theta, gnorm


def _backtracking_gd(fn, theta, tol, max_iter):
    val, g = fn(theta)
    step = 1.0
    for _ in range(max_iter):
        gnorm2 = float(g @ g)
        if gnorm2 <= tol * tol:
            break
        while True:
            cand = theta - step * g
            cval, cg = fn(cand)
            if cval <= val - 0.5 * step * gnorm2 or step < 1e-16:
                break
            step *= 0.5
        theta, val, g = cand, cval, cg
        step *= 2.0
    return theta, float(np.linalg.norm(g))


def lagrangian_minimizer(mdp: TabularMdp, reward, upper, x, w: float, tau: float,
                         config: OracleConfig = DEFAULT_CONFIG,
                         theta0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """pi_{w,tau}*(x) = argmin_pi L_{w,tau}(x, pi); returns (pi, theta).

    Minimizes w*f(x, pi_theta) - J_tau(x, pi_theta) over softmax logits.
    """
    if not (w > 0 and tau > 0):
        raise ValueError("lagrangian_minimizer needs w > 0 and tau > 0")
    x = np.asarray(x, dtype=float)
    r = reward_table(reward, x)
    shape = (mdp.num_states, mdp.num_actions)
    if theta0 is None:
        _, pi0 = soft_value_iteration(mdp, r, None, tau, config)
        theta0 = np.log(np.maximum(pi0, 1e-300))
    fn = _lagrangian_fn(mdp, r, upper, x, w, tau, shape)
    theta = np.asarray(theta0, dtype=float).ravel().copy()
    if config.method == "lbfgs":
        res = minimize(fn, theta, jac=True, method="L-BFGS-B",
                       options={"maxiter": min(3000, config.gd_max_iter), "gtol": config.gd_tol * 1e-2,
                                "ftol": 0.0, "maxcor": 30})

        def grad_fn(th):
            return _lagrangian_grad(mdp, r, upper, x, w, tau, th.reshape(shape))

        theta, gnorm = _newton_polish(fn, grad_fn, res.x, config.gd_tol)
    else:
        theta, gnorm = _backtracking_gd(fn, theta, config.gd_tol, config.gd_max_iter)
    if gnorm > config.gd_tol:
        raise ConvergenceError("Lagrangian minimizer did not reach gd_tol", gnorm)
    theta = theta.reshape(shape)
    return softmax(theta), theta


def central_difference(fun, x, step: float) -> np.ndarray:
    """Central differences with per-coordinate steps step * max(1, |x_i|)."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (fun(x + e) - fun(x - e)) / (2.0 * h)
    return grad


class ExactOracles:
    """Oracle evaluations for one BilevelProblem, memoized per (x, tau, w)."""

    def __init__(self, problem, config: OracleConfig = DEFAULT_CONFIG):
        self.problem = problem
        self.config = config
        self._soft: dict = {}
        self._lag: dict = {}

    @property
    def mdp(self):
        return self.problem.mdp

    def _key(self, x, *extra):
        return (np.asarray(x, dtype=float).tobytes(),) + extra

    def soft_optimum(self, x, tau: float) -> tuple[np.ndarray, np.ndarray]:
        key = self._key(x, tau)
        if key not in self._soft:
            self._soft[key] = soft_value_iteration(self.mdp, self.problem.reward, x, tau, self.config)
        return self._soft[key]

    def lagrangian_optimum(self, x, w: float, tau: float) -> np.ndarray:
        key = self._key(x, w, tau)
        if key not in self._lag:
            _, pi_star = self.soft_optimum(x, tau)
            theta0 = np.log(np.maximum(pi_star, 1e-300))
            self._lag[key] = lagrangian_minimizer(self.mdp, self.problem.reward, self.problem.upper,
                                                  x, w, tau, self.config, theta0=theta0)[0]
        return self._lag[key]

    def J(self, x, pi, tau: float) -> float:
        return exact_return(self.mdp, exact_value(self.mdp, self.problem.reward, x, pi, tau))

    def phi_tau(self, x, tau: float) -> float:
        """Phi_tau(x) = f(x, pi_tau*(x))."""
        return self.problem.upper.value(x, self.soft_optimum(x, tau)[1])

    def phi(self, x) -> float:
        """Phi(x), with pi*(x) taken as pi_tau*(x) at tau = phi_eval_tau."""
        return self.phi_tau(x, self.config.phi_eval_tau)

    def phi_refinement_gap(self, x) -> float:
        tau = self.config.phi_eval_tau
        return abs(self.phi_tau(x, tau) - self.phi_tau(x, tau / 10.0))

    def lagrangian(self, x, pi, w: float, tau: float) -> float:
        """L_{w,tau}(x, pi)."""
        _, pi_star = self.soft_optimum(x, tau)
        gap = self.J(x, pi_star, tau) - self.J(x, pi, tau)
        return self.problem.upper.value(x, pi) + gap / w

    def phi_w_tau(self, x, w: float, tau: float) -> float:
        return self.lagrangian(x, self.lagrangian_optimum(x, w, tau), w, tau)

    def penalty_hypergrad(self, x, w: float, tau: float) -> np.ndarray:
        """grad_x f(x, pi_wt) + (grad_x J(x, pi_t) - grad_x J(x, pi_wt)) / w."""
        _, pi_t = self.soft_optimum(x, tau)
        pi_wt = self.lagrangian_optimum(x, w, tau)
        reward = self.problem.reward
        gap = grad_x_return(self.mdp, reward, x, pi_t) - grad_x_return(self.mdp, reward, x, pi_wt)
        return self.problem.upper.grad_x(x, pi_wt) + gap / w

    def fd_hypergrad_phi_tau(self, x, tau: float, step: float | None = None) -> np.ndarray:
        return central_difference(lambda z: self.phi_tau(z, tau), x, step or self.config.fd_step)

    def lyapunov_residuals(self, state, w: float, tau: float) -> dict:
        """(eps_theta, eps_theta_L, eps_V, eps_V_L) at the state's iterates."""
        x = state.x
        mdp, reward = self.mdp, self.problem.reward
        _, pi_t = self.soft_optimum(x, tau)
        pi = softmax(state.theta)
        pi_L = softmax(state.theta_L)
        shift = self.problem.reward_shift / (1.0 - mdp.gamma)
        V = exact_value(mdp, reward, x, pi, tau)
        V_L = exact_value(mdp, reward, x, pi_L, tau)
        eps_theta = exact_return(mdp, exact_value(mdp, reward, x, pi_t, tau)) - exact_return(mdp, V)
        pi_wt = self.lagrangian_optimum(x, w, tau)
        eps_theta_L = w * (self.lagrangian(x, pi_L, w, tau) - self.lagrangian(x, pi_wt, w, tau))
        return {
            "eps_theta": float(eps_theta),
            "eps_theta_L": float(eps_theta_L),
            "eps_V": float(np.sum((state.v_hat - (V - shift)) ** 2)),
            "eps_V_L": float(np.sum((state.v_hat_L - (V_L - shift)) ** 2)),
        }


__all__ = [
    "ConvergenceError", "OracleConfig", "ExactOracles", "soft_value_iteration",
    "lagrangian_minimizer", "bellman_residual", "central_difference",
    "discounted_visitation",
]
