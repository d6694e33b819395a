"""Comparison algorithms sharing the environments, schedules and trace format.

* ``partial_sgd``: x follows the partial gradient of f at the current lower
  policy, ignoring how the policy responds to x.
* ``finite_difference``: SPSA estimate of the response derivative from two
  inner actor-critic solves at x +/- eps * Delta, then the chain rule.
* ``nested_loop``: many inner iterations of the proposed method at frozen x,
  then one x step along the averaged D samples.
* ``fixed_regularization``: the proposed method with a constant tau.

The nested baselines count one outer step as one iteration ``k``; ``samples``
includes every inner transition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actor_critic import (AlgorithmOptions, Evaluator, RunResult, RunState, _upper_grads,
                           advance, run, step)
from .operators import OperatorBounds
from .policy import recenter, softmax
from .schedules import ScheduleSet, schedule_at

KINDS = ("partial_sgd", "finite_difference", "nested_loop", "fixed_regularization")


@dataclass(frozen=True)
class BaselineConfig:
    """``fd_epsilon = None`` means 0.05 times the width of the x box."""

    kind: str
    inner_iters: int = 2000
    fd_epsilon: float | None = None
    fixed_tau: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}; expected one of {KINDS}")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be at least 1")
        if self.fd_epsilon is not None and not self.fd_epsilon > 0:
            raise ValueError("fd_epsilon must be positive")
        if self.fixed_tau is not None and not self.fixed_tau > 0:
            raise ValueError("fixed_tau must be positive")

    def epsilon(self, problem) -> float:
        if self.fd_epsilon is not None:
            return self.fd_epsilon
        width = float(np.max(problem.x_hi - problem.x_lo))
        if not np.isfinite(width):
            raise ValueError("fd_epsilon must be set for an unbounded x domain")
        return 0.05 * width


def partial_sgd_step(state: RunState, problem, schedules: ScheduleSet,
                     options: AlgorithmOptions = AlgorithmOptions()) -> RunState:
    """One partial gradient descent / actor-critic ascent iteration."""
    return step(state, problem, schedules, options, variant="partial_sgd")


def fixed_tau_schedules(schedules: ScheduleSet, fixed_tau: float) -> ScheduleSet:
    return schedules.with_values(tau0=fixed_tau, c_tau=0.0)


def _inner_schedules(schedules: ScheduleSet, w: float, tau: float) -> ScheduleSet:
    """x frozen, w and tau held at their outer values."""
    return ScheduleSet(0.0, schedules.alpha0, schedules.beta0, w, tau,
                       0.0, schedules.c_alpha, schedules.c_beta, 0.0, 0.0)


class ActorCriticInner:
    """Approximate pi_tau*(x) with actor-critic iterations at frozen x.

    Each call works on a copy of ``state``, so the two SPSA solves share
    their random draws (common random numbers).
    """

    def __init__(self, problem, schedules: ScheduleSet, options: AlgorithmOptions):
        self.problem = problem
        self.schedules = schedules
        self.options = options
        self.bounds = OperatorBounds.from_problem(problem, schedules.tau0, options.entropy_correction)

    def __call__(self, state: RunState, x, tau: float, n: int) -> RunState:
        sub = state.copy()
        sub.x = np.array(x, dtype=float)
        sub.k = state.inner_k
        sched = _inner_schedules(self.schedules, self.schedules.w0, tau)
        advance(sub, self.problem, sched, n, self.options, "partial_sgd", bounds=self.bounds)
        return sub


class ExactInner:
    """Inner solver replaced by the soft-optimality oracle."""

    def __init__(self, oracles):
        self.oracles = oracles

    def __call__(self, state: RunState, x, tau: float, n: int) -> RunState:
        problem = self.oracles.problem
        sub = state.copy()
        sub.x = np.array(x, dtype=float)
        V, pi = self.oracles.soft_optimum(sub.x, tau)
        sub.theta = recenter(np.log(pi))
        sub.v_hat = V - problem.reward_shift / (1.0 - problem.mdp.gamma)
        sub.samples += n
        return sub


def spsa_direction(state: RunState, problem, schedules: ScheduleSet, cfg: BaselineConfig,
                   inner, delta=None):
    """Chain-rule hypergradient estimate and the two inner solutions.

    The response derivative along Delta is (theta(x+) - theta(x-)) / (2 eps);
    with Rademacher Delta (its own inverse) the estimate is
    grad_x f + Delta * <grad_theta f, that derivative>. Near the boundary
    the perturbation center moves inward so both points stay in the box.
    """
    _, _, _, _, tau = schedule_at(schedules, state.k)
    eps = cfg.epsilon(problem)
    if delta is None:
        delta = state.xi_rng.choice([-1.0, 1.0], size=state.x.shape)
    delta = np.asarray(delta, dtype=float)
    lo, hi = problem.x_lo + eps, problem.x_hi - eps
    x = np.where(lo <= hi, np.clip(state.x, lo, hi), state.x)
    plus = inner(state, problem.project(x + eps * delta), tau, cfg.inner_iters)
    minus = inner(state, problem.project(x - eps * delta), tau, cfg.inner_iters)
    dtheta = (recenter(plus.theta) - recenter(minus.theta)) / (2.0 * eps)
    theta_mid = 0.5 * (recenter(plus.theta) + recenter(minus.theta))
    gx, gt = _upper_grads(problem.upper, x, softmax(theta_mid), state.xi_rng)
    return gx + delta * float(np.sum(gt * dtheta)), plus, minus


def finite_difference_bilevel_step(state: RunState, problem, schedules: ScheduleSet,
                                   cfg: BaselineConfig, inner=None, delta=None,
                                   options: AlgorithmOptions = AlgorithmOptions()) -> RunState:
    """One outer SPSA step; costs 2 * inner_iters samples."""
    inner = inner or ActorCriticInner(problem, schedules, options)
    direction, plus, minus = spsa_direction(state, problem, schedules, cfg, inner, delta)
    zeta = schedule_at(schedules, state.k)[0]
    # warm start: the midpoint of the two inner solutions
    state.theta = 0.5 * (recenter(plus.theta) + recenter(minus.theta))
    state.v_hat = 0.5 * (plus.v_hat + minus.v_hat)
    state.cursors = plus.cursors.copy()
    state.rng = minus.rng
    state.samples = plus.samples + minus.samples - state.samples
    state.inner_k += cfg.inner_iters
    state.x = problem.project(state.x - zeta * direction)
    state.d_sum = state.d_sum + direction
    state.k += 1
    return state


def nested_loop_step(state: RunState, problem, schedules: ScheduleSet, cfg: BaselineConfig,
                     options: AlgorithmOptions = AlgorithmOptions(),
                     bounds: OperatorBounds | None = None) -> RunState:
    """inner_iters proposed iterations at frozen x, then x -= zeta_k * mean D."""
    zeta, _, _, w, tau = schedule_at(schedules, state.k)
    if bounds is None:
        bounds = OperatorBounds.from_problem(problem, schedules.tau0, options.entropy_correction)
    outer_k, outer_sum = state.k, state.d_sum
    state.k, state.d_sum = state.inner_k, np.zeros_like(state.x)
    advance(state, problem, _inner_schedules(schedules, w, tau), cfg.inner_iters, options,
            "proposed", bounds=bounds)
    mean_D = state.d_sum / cfg.inner_iters
    state.inner_k = state.k
    state.k, state.d_sum = outer_k + 1, outer_sum + state.d_sum
    state.x = problem.project(state.x - zeta * mean_D)
    return state


def _outer_stepper(problem, schedules, cfg, options):
    if cfg.kind == "nested_loop":
        bounds = OperatorBounds.from_problem(problem, schedules.tau0, options.entropy_correction)

        def stepper(state, n):
            for _ in range(n):
                nested_loop_step(state, problem, schedules, cfg, options, bounds)
        return stepper
    inner = ActorCriticInner(problem, schedules, options)

    def stepper(state, n):
        for _ in range(n):
            finite_difference_bilevel_step(state, problem, schedules, cfg, inner, options=options)
    return stepper


def run_baseline(problem, schedules: ScheduleSet, cfg: BaselineConfig, iterations: int,
                 seed: int = 0, options: AlgorithmOptions = AlgorithmOptions(),
                 evaluator: Evaluator | None = None, cadence: str = "geometric:1.2",
                 x0=None, on_record=None) -> RunResult:
    """Run a baseline; ``iterations`` counts outer steps for the nested kinds."""
    common = dict(seed=seed, options=options, evaluator=evaluator, cadence=cadence, x0=x0,
                  on_record=on_record)
    if cfg.kind == "partial_sgd":
        return run(problem, schedules, iterations, variant="partial_sgd", **common)
    if cfg.kind == "fixed_regularization":
        return fixed_regularization_run(problem, schedules, cfg, iterations, **common)
    return run(problem, schedules, iterations,
               stepper=_outer_stepper(problem, schedules, cfg, options), **common)


def fixed_regularization_run(problem, schedules: ScheduleSet, cfg: BaselineConfig,
                             iterations: int, **kwargs) -> RunResult:
    """The proposed method with c_tau = 0 and tau0 = cfg.fixed_tau."""
    if cfg.fixed_tau is None:
        raise ValueError("fixed_regularization needs fixed_tau")
    return run(problem, fixed_tau_schedules(schedules, cfg.fixed_tau), iterations, **kwargs)


def nested_loop_run(problem, schedules: ScheduleSet, cfg: BaselineConfig, iterations: int,
                    **kwargs) -> RunResult:
    return run_baseline(problem, schedules, BaselineConfig("nested_loop", cfg.inner_iters,
                                                           cfg.fd_epsilon, cfg.fixed_tau),
                        iterations, **kwargs)


__all__ = [
    "BaselineConfig", "KINDS", "partial_sgd_step", "finite_difference_bilevel_step",
    "nested_loop_step", "nested_loop_run", "fixed_regularization_run", "run_baseline",
    "spsa_direction", "ActorCriticInner", "ExactInner", "fixed_tau_schedules",
]
