"""Single-loop penalty actor-critic for bi-level RL.

Each iteration draws one transition from each of two gamma-restart
trajectories: the first follows pi_theta (the lower-level best-response
tracker), the second pi_{theta^L} (the Lagrangian tracker). All five iterates
are then updated synchronously from iteration-k values:

    x       <- proj(x - zeta_k D)
    theta   <- theta + alpha_k F_{0, tau_k}
    theta^L <- theta^L + alpha_k F_{w_k, tau_k}
    V, V^L  <- clip(V + beta_k G, 0, B_V)

``mode="iid"`` replaces the trajectories with exact draws from d_rho^pi.
Problems with a quadratic-feature reward and a linear-in-policy upper
objective run Markovian segments in the compiled kernel; everything else
goes through :func:`step`.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .mdp import discounted_visitation, value_bound
from .operators import OperatorBounds, sample_D, sample_F, sample_G
from .policy import recenter, softmax
from .schedules import ScheduleSet, schedule_at

log = logging.getLogger(__name__)

VARIANTS = ("proposed", "partial_sgd")
KERNEL_CHUNK = 1 << 15


class DivergenceError(RuntimeError):
    """A non-finite update was about to be applied.

    ``state`` is the last finite state; ``records`` the trace so far.
    """

    def __init__(self, k: int, state, records=()):
        super().__init__(f"non-finite update at iteration {k}")
        self.k = k
        self.state = state
        self.records = list(records)


@dataclass(frozen=True)
class AlgorithmOptions:
    mode: str = "markovian"
    include_baseline: bool = True
    entropy_correction: bool = True
    td_target_uses_restart: bool = False
    recenter_every: int = 10_000
    track_bounds: bool = False
    use_kernel: bool = True
    critic_init: float = 0.0

    def __post_init__(self):
        if self.mode not in ("markovian", "iid"):
            raise ValueError(f"mode must be 'markovian' or 'iid', got {self.mode!r}")
        if self.recenter_every < 0:
            raise ValueError("recenter_every must be nonnegative")
        if not 0.0 <= self.critic_init <= 1.0:
            raise ValueError("critic_init must lie in [0, 1]")


@dataclass
class RunState:
    x: np.ndarray
    theta: np.ndarray
    theta_L: np.ndarray
    v_hat: np.ndarray
    v_hat_L: np.ndarray
    cursors: np.ndarray
    rng: np.random.Generator
    xi_rng: np.random.Generator
    k: int = 0
    samples: int = 0
    d_sum: np.ndarray | None = None
    # iterations consumed by the inner solves of nested baselines
    inner_k: int = 0
    # [max |D|/bound, max |F|/bound, max |G|/bound, violations D, F, G]
    bound_stats: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        if self.d_sum is None:
            self.d_sum = np.zeros_like(self.x)

    def copy(self) -> "RunState":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class TraceRecord:
    k: int
    samples: int
    phi: float
    grad_norm: float
    eps_theta: float
    eps_theta_L: float
    eps_V: float
    eps_V_L: float
    x: tuple
    zeta: float
    alpha: float
    beta: float
    w: float
    tau: float


def init_state(problem, seed: int, x0=None, critic_init: float = 0.0, tau_cap: float = 1.0) -> RunState:
    """theta = 0 (uniform policies), cursors drawn from rho.

    Both critics start at ``critic_init * B_V``: 0 is the bottom of the value
    box, 1 the top (optimistic).
    """
    if not 0.0 <= critic_init <= 1.0:
        raise ValueError("critic_init must lie in [0, 1]")
    traj_seq, xi_seq = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.Generator(np.random.PCG64(traj_seq))
    mdp = problem.mdp
    shape = (mdp.num_states, mdp.num_actions)
    u = rng.random(2)
    cursors = np.array([kernels.categorical(mdp.rho, u[0]), kernels.categorical(mdp.rho, u[1])],
                       dtype=np.int64)
    x = problem.project(np.array(problem.x0 if x0 is None else x0, dtype=float))
    v0 = critic_init * value_bound(problem.reward_range, mdp.num_actions, mdp.gamma, tau_cap)
    return RunState(x, np.zeros(shape), np.zeros(shape), np.full(mdp.num_states, v0),
                    np.full(mdp.num_states, v0), cursors, rng,
                    np.random.Generator(np.random.PCG64(xi_seq)))


def _advance(mdp, pi, cursor: int, u):
    a = kernels.categorical(pi[cursor], u[0])
    s_next = kernels.categorical(mdp.transition[cursor, a], u[1])
    restart = kernels.categorical(mdp.rho, u[3])
    new_cursor = restart if u[2] < 1.0 - mdp.gamma else s_next
    return cursor, a, s_next, new_cursor


def advance_trajectory(mdp, pi, cursor: int, rng: np.random.Generator):
    """One gamma-restart step: (s, a, s_next, new_cursor), consuming four uniforms."""
    if not 0 <= cursor < mdp.num_states:
        raise IndexError(f"cursor {cursor} out of range")
    return _advance(mdp, pi, cursor, rng.random(4))


def _iid(mdp, pi, d, u):
    s = kernels.categorical(d, u[0])
    a = kernels.categorical(pi[s], u[1])
    return s, a, kernels.categorical(mdp.transition[s, a], u[2])


def iid_sample(mdp, pi, rng: np.random.Generator, d=None):
    """(s, a, s_next) with s ~ d_rho^pi exactly, a ~ pi(.|s), s_next ~ P(.|s, a)."""
    if d is None:
        d = discounted_visitation(mdp, pi)
    return _iid(mdp, pi, d, rng.random(3))


def _track(stats, j, sample):
    norm = float(np.linalg.norm(sample.value))
    ratio = norm / sample.bound_used
    stats[j] = max(stats[j], ratio)
    if norm > sample.bound_used * (1.0 + 1e-12):
        stats[3 + j] += 1


def _upper_grads(upper, x, pi, rng):
    if upper.deterministic:
        return upper.grad_x(x, pi), upper.grad_theta(x, pi)
    return upper.sample_grads(x, pi, rng)


def step(state: RunState, problem, schedules: ScheduleSet, options: AlgorithmOptions = AlgorithmOptions(),
         bounds: OperatorBounds | None = None, variant: str = "proposed") -> RunState:
    """One iteration in place, built from the operator functions. Returns ``state``."""
    mdp = problem.mdp
    if bounds is None:
        bounds = OperatorBounds.from_problem(problem, schedules.tau0, options.entropy_correction)
    zeta, alpha, beta, w, tau = schedule_at(schedules, state.k)
    shift = problem.reward_shift
    x = state.x
    u = state.rng.random(8)
    pi = softmax(state.theta)
    kw = dict(shift=shift, include_baseline=options.include_baseline,
              entropy_correction=options.entropy_correction, bounds=bounds)

    if options.mode == "iid":
        s, a, s1 = _iid(mdp, pi, discounted_visitation(mdp, pi), u[0:4])
        c1 = s1
    else:
        s, a, s1, c1 = _advance(mdp, pi, int(state.cursors[0]), u[0:4])
    t1 = c1 if options.td_target_uses_restart else s1
    F0 = sample_F(problem, x, pi, state.v_hat, s, a, t1, 0.0, tau, **kw)
    G0 = sample_G(problem, x, pi, state.v_hat, s, a, t1, tau, shift=shift, bounds=bounds)
    track = [(1, F0), (2, G0)]

    if variant == "proposed":
        pi_L = softmax(state.theta_L)
        if options.mode == "iid":
            sb, ab, sb1 = _iid(mdp, pi_L, discounted_visitation(mdp, pi_L), u[4:8])
            c2 = sb1
        else:
            sb, ab, sb1, c2 = _advance(mdp, pi_L, int(state.cursors[1]), u[4:8])
        t2 = c2 if options.td_target_uses_restart else sb1
        gx, gt = _upper_grads(problem.upper, x, pi_L, state.xi_rng)
        D = sample_D(problem, x, pi_L, s, a, sb, ab, w, grad_f_x=gx, bounds=bounds,
                     entropy_correction=options.entropy_correction)
        FL = sample_F(problem, x, pi_L, state.v_hat_L, sb, ab, t2, w, tau, grad_f_theta=gt, **kw)
        GL = sample_G(problem, x, pi_L, state.v_hat_L, sb, ab, t2, tau, shift=shift, bounds=bounds)
        track += [(0, D), (1, FL), (2, GL)]
        direction = D.value
        updates = [F0.value, FL.value, G0.value, GL.value, D.value]
    elif variant == "partial_sgd":
        direction, _ = _upper_grads(problem.upper, x, pi, state.xi_rng)
        updates = [F0.value, G0.value, direction]
    else:
        raise ValueError(f"unknown variant {variant!r}")

    if not all(np.all(np.isfinite(v)) for v in updates):
        raise DivergenceError(state.k, state.copy())
    if options.track_bounds:
        for j, sample in track:
            _track(state.bound_stats, j, sample)

    B_V = bounds.B_V
    state.x = problem.project(x - zeta * direction)
    state.d_sum = state.d_sum + direction
    state.theta = state.theta + alpha * F0.value
    state.v_hat = np.clip(state.v_hat + beta * G0.value, 0.0, B_V)
    state.cursors[0] = c1
    if variant == "proposed":
        state.theta_L = state.theta_L + alpha * FL.value
        state.v_hat_L = np.clip(state.v_hat_L + beta * GL.value, 0.0, B_V)
        state.cursors[1] = c2
        state.samples += 2
    else:
        state.samples += 1
    state.k += 1
    if options.recenter_every and state.k % options.recenter_every == 0:
        state.theta = recenter(state.theta)
        state.theta_L = recenter(state.theta_L)
    return state


def kernel_eligible(problem, options: AlgorithmOptions) -> bool:
    return options.use_kernel and options.mode == "markovian" and problem.kernel_eligible()


def _bound_vector(bounds: OperatorBounds, track: bool) -> np.ndarray:
    if not track:
        return np.zeros(0)
    scale = 1.0 / (1.0 - bounds.gamma) if bounds.entropy_correction else 1.0
    return np.array([bounds.L_fx, 2.0 * bounds.L_r * scale, bounds.F(0.0), bounds.L_ftheta, bounds.B_G])


def advance(state: RunState, problem, schedules: ScheduleSet, n: int,
            options: AlgorithmOptions = AlgorithmOptions(), variant: str = "proposed",
            run_segment=None, bounds: OperatorBounds | None = None) -> RunState:
    """Run ``n`` iterations in place, through the kernel when the problem allows it.

    ``bounds`` defaults to the bounds for ``schedules.tau0``; callers running
    sub-schedules pass the outer bounds so the critic box stays fixed.
    """
    if bounds is None:
        bounds = OperatorBounds.from_problem(problem, schedules.tau0, options.entropy_correction)
    if not kernel_eligible(problem, options):
        for _ in range(n):
            step(state, problem, schedules, options, bounds, variant)
        return state
    run_segment = run_segment or kernels.run_segment
    reward, upper, mdp = problem.reward, problem.upper, problem.mdp
    code = VARIANTS.index(variant)
    per_iter = 2 if code == 0 else 1
    sched = schedules.packed()
    bvec = _bound_vector(bounds, options.track_bounds)
    remaining = n
    while remaining > 0:
        m = min(remaining, KERNEL_CHUNK)
        uniforms = state.rng.random((m, 8))
        done = run_segment(
            mdp.transition, mdp.rho, mdp.gamma, reward.base, reward.features, float(reward.quad),
            float(upper.kappa), upper.center, upper.weights, problem.x_lo, problem.x_hi,
            problem.reward_shift, bounds.B_V, state.x, state.theta, state.theta_L,
            state.v_hat, state.v_hat_L, state.cursors, sched, state.k, m, uniforms, code,
            options.include_baseline, options.entropy_correction,
            options.td_target_uses_restart, options.recenter_every, state.d_sum,
            state.bound_stats, bvec)
        state.k += done
        state.samples += per_iter * done
        if done < m:
            raise DivergenceError(state.k, state.copy())
        remaining -= m
    return state


def checkpoints(iterations: int, cadence: str = "geometric:1.2") -> list[int]:
    """Sorted checkpoint iterations, always including 0 and ``iterations``.

    ``geometric:q`` records at ceil(q^m); ``every:N`` at multiples of N.
    """
    kind, _, arg = cadence.partition(":")
    pts = {0, iterations}
    if kind == "geometric":
        q = float(arg or 1.2)
        if not q > 1.0:
            raise ValueError("geometric cadence needs a ratio > 1")
        m = 0
        while True:
            k = math.ceil(q ** m)
            if k > iterations:
                break
            pts.add(k)
            m += 1
    elif kind == "every":
        every = int(arg)
        if every < 1:
            raise ValueError("every:N needs N >= 1")
        pts.update(range(every, iterations + 1, every))
    else:
        raise ValueError(f"unknown checkpoint cadence {cadence!r}")
    return sorted(pts)


def projected_gradient(g, x, lo, hi, atol=1e-12):
    """Zero the components of g that would push x out of the box [lo, hi]."""
    g = np.array(g, dtype=float)
    g[(x >= hi - atol) & (g < 0)] = 0.0
    g[(x <= lo + atol) & (g > 0)] = 0.0
    return g


class Evaluator:
    """Checkpoint metrics for a problem.

    ``phi`` is the exact bi-level objective at x. ``grad_norm`` is the norm of
    the projected finite-difference gradient of Phi_{tau_k} at the current
    tau_k. Residuals need the Lagrangian oracle and are optional.
    """

    def __init__(self, oracles, phi: bool = True, grad_norm: bool = True, residuals: bool = False):
        self.oracles = oracles
        self.phi = phi
        self.grad_norm = grad_norm
        self.residuals = residuals

    def record(self, state: RunState, schedules: ScheduleSet, k: int | None = None,
               w_tau: tuple | None = None) -> TraceRecord:
        k = state.k if k is None else k
        zeta, alpha, beta, w, tau = schedule_at(schedules, k)
        if w_tau is not None:
            w, tau = w_tau
        problem = self.oracles.problem
        x = state.x.copy()
        nan = float("nan")
        phi = self.oracles.phi(x) if self.phi else nan
        gnorm = nan
        if self.grad_norm:
            g = self.oracles.fd_hypergrad_phi_tau(x, tau)
            gnorm = float(np.linalg.norm(projected_gradient(g, x, problem.x_lo, problem.x_hi)))
        res = dict(eps_theta=nan, eps_theta_L=nan, eps_V=nan, eps_V_L=nan)
        if self.residuals:
            res = self.oracles.lyapunov_residuals(state, w, tau)
        return TraceRecord(k, state.samples, float(phi), gnorm, res["eps_theta"], res["eps_theta_L"],
                           res["eps_V"], res["eps_V_L"], tuple(float(v) for v in x),
                           zeta, alpha, beta, w, tau)


@dataclass
class RunResult:
    records: list
    state: RunState

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]


def run(problem, schedules: ScheduleSet, iterations: int, seed: int = 0,
        options: AlgorithmOptions = AlgorithmOptions(), evaluator: Evaluator | None = None,
        variant: str = "proposed", cadence: str = "geometric:1.2", x0=None,
        on_record=None, stepper=None) -> RunResult:
    """Run the algorithm, recording metrics at the checkpoint iterations.

    ``on_record`` is called with each record as soon as it exists.
    ``stepper(state, n)`` replaces :func:`advance` for algorithms whose
    iterations are outer steps (the nested baselines).
    """
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if stepper is None:
        def stepper(st, n):
            advance(st, problem, schedules, n, options, variant)
    state = init_state(problem, seed, x0, options.critic_init, schedules.tau0)
    records = []

    def emit():
        if evaluator is not None:
            rec = evaluator.record(state, schedules)
            records.append(rec)
            if on_record:
                on_record(rec)

    emit()
    for target in checkpoints(iterations, cadence)[1:]:
        try:
            stepper(state, target - state.k)
        except DivergenceError as err:
            err.records = records
            raise
        emit()
    return RunResult(records, state)
