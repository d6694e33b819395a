"""Invariant and identity checks run by ``bilevel-rl verify`` and the test suite.

Each check is a function returning ``(passed, detail)`` registered under a
dotted name. Checks whose property is known not to hold for finite tabular
problems are registered with ``known_failure`` set to the reason; they are
reported but do not change the exit status.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import kernels
from .actor_critic import (AlgorithmOptions, Evaluator, _advance, advance, init_state, iid_sample,
                           run, step)
from .baselines import BaselineConfig, run_baseline
from .envs.gridworld import GridWorldSpec
from .envs.preference import PreferenceProblemSpec, preference_loss
from .mdp import (FeatureReward, TabularMdp, discounted_visitation, exact_return, exact_value,
                  grad_theta_return, grad_x_return, policy_transition)
from .operators import OperatorBounds, expected_D, expected_F, expected_G, sample_F
from .oracles import ExactOracles, bellman_residual, central_difference, soft_value_iteration
from .policy import entropies, log_policy_grad, softmax, weighted_entropy
from .problem import random_problem
from .schedules import ScheduleSet
from .trace import emit_trace, parse_trace


@dataclass(frozen=True)
class Check:
    name: str
    description: str
    fn: object
    known_failure: str | None = None


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float
    known_failure: str | None = None

    @property
    def status(self) -> str:
        if self.passed:
            return "PASS"
        return "KNOWN-FAIL" if self.known_failure else "FAIL"


CHECKS: dict[str, Check] = {}


def check(name: str, description: str, known_failure: str | None = None):
    def register(fn):
        CHECKS[name] = Check(name, description, fn, known_failure)
        return fn
    return register


def _rng(seed):
    return np.random.default_rng(seed)


def _rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-12))


def _random_instance(seed, num_states=None, num_actions=None, gamma=0.9):
    rng = _rng(seed)
    nS = num_states or int(rng.integers(2, 6))
    nA = num_actions or int(rng.integers(2, 4))
    pb = random_problem(rng, nS, nA, 2, gamma)
    theta = rng.normal(size=(nS, nA))
    tau = float(rng.uniform(0.0, 1.0))
    return pb, theta, tau, rng


# ---------------------------------------------------------------- mdp core

@check("mdp.visitation_fixed_point",
       "discounted visitation is the stationary law of the gamma-restart chain")
def _visitation_fixed_point():
    worst = 0.0
    for seed in range(10):
        pb, theta, _, _ = _random_instance(seed)
        mdp, pi = pb.mdp, softmax(theta)
        d = discounted_visitation(mdp, pi)
        P_gamma = (1.0 - mdp.gamma) * mdp.rho[None, :] + mdp.gamma * policy_transition(mdp, pi)
        worst = max(worst, float(np.abs(P_gamma.T @ d - d).max()), abs(d.sum() - 1.0))
    return worst <= 1e-10, f"max fixed-point residual {worst:.2e}"


@check("mdp.value_monotone_in_tau", "V_tau is entrywise nondecreasing in tau")
def _value_monotone():
    worst = np.inf
    for seed in range(20):
        pb, theta, _, rng = _random_instance(seed)
        t1, t2 = np.sort(rng.uniform(0.0, 2.0, size=2))
        x, pi = pb.x0, softmax(theta)
        gap = exact_value(pb.mdp, pb.reward, x, pi, t2) - exact_value(pb.mdp, pb.reward, x, pi, t1)
        worst = min(worst, float(gap.min()))
    return worst >= -1e-12, f"min V_tau2 - V_tau1 = {worst:.3e}"


@check("mdp.return_tau_lipschitz", "|J_t1 - J_t2| <= |t1 - t2| log|A| / (1 - gamma)")
def _return_lipschitz():
    worst = 0.0
    for seed in range(20):
        pb, theta, _, rng = _random_instance(seed)
        t1, t2 = rng.uniform(0.0, 2.0, size=2)
        mdp, x, pi = pb.mdp, pb.x0, softmax(theta)
        J1 = exact_return(mdp, exact_value(mdp, pb.reward, x, pi, t1))
        J2 = exact_return(mdp, exact_value(mdp, pb.reward, x, pi, t2))
        bound = abs(t1 - t2) * math.log(mdp.num_actions) / (1.0 - mdp.gamma)
        worst = max(worst, abs(J1 - J2) / bound)
    return worst <= 1.0 + 1e-12, f"max |dJ| / bound = {worst:.4f}"


def gradient_identity_errors(num=20, seed0=0):
    """Relative errors of the closed-form gradients against central differences."""
    errs = []
    for seed in range(seed0, seed0 + num):
        pb, theta, tau, _ = _random_instance(seed, gamma=0.9)
        mdp, x = pb.mdp, pb.x0

        def J_theta(flat):
            th = flat.reshape(theta.shape)
            return exact_return(mdp, exact_value(mdp, pb.reward, x, softmax(th), tau))

        step = 1e-6 * max(1.0, float(np.abs(theta).max()))
        fd = central_difference(J_theta, theta.ravel(), step).reshape(theta.shape)
        e_theta = _rel(grad_theta_return(mdp, pb.reward, x, theta, tau), fd)
        pi = softmax(theta)

        def J_x(z):
            return exact_return(mdp, exact_value(mdp, pb.reward, z, pi, tau))

        step = 1e-6 * max(1.0, float(np.abs(x).max()))
        e_x = _rel(grad_x_return(mdp, pb.reward, x, pi), central_difference(J_x, x, step))
        errs.append((e_theta, e_x))
    return np.array(errs)


@check("mdp.gradient_identities",
       "grad_theta_return and grad_x_return match central differences (1e-5 relative, 20 MDPs)")
def _gradient_identities():
    errs = gradient_identity_errors()
    worst = float(errs.max())
    return worst <= 1e-5, f"max relative error {worst:.2e}"


# ---------------------------------------------------------------- policy

@check("policy.log_grad_jacobian", "log_policy_grad is the Jacobian row of log softmax")
def _log_grad_jacobian():
    rng = _rng(11)
    worst = 0.0
    for _ in range(100):
        nS, nA = int(rng.integers(1, 5)), int(rng.integers(2, 5))
        theta = rng.normal(scale=2.0, size=(nS, nA))
        s, a = int(rng.integers(nS)), int(rng.integers(nA))
        fd = central_difference(lambda f: math.log(softmax(f.reshape(nS, nA))[s, a]),
                                theta.ravel(), 1e-6).reshape(nS, nA)
        worst = max(worst, _rel(log_policy_grad(theta, s, a), fd))
    return worst <= 1e-6, f"max relative error {worst:.2e}"


@check("policy.log_grad_l1_bound", "||grad log pi||_1 <= 2")
def _log_grad_l1():
    rng = _rng(12)
    worst = 0.0
    for scale in (0.1, 1.0, 10.0, 100.0):
        for _ in range(50):
            theta = rng.normal(scale=scale, size=(3, 4))
            for s, a in itertools.product(range(3), range(4)):
                worst = max(worst, float(np.abs(log_policy_grad(theta, s, a)).sum()))
    return worst <= 2.0, f"max l1 norm {worst:.6f}"


# ---------------------------------------------------------------- oracles

def pi_tau_halving_ratios(num=5, taus=(0.1, 0.05, 0.025)):
    """||pi_t - pi_{t/2}|| / ||pi_{t/2} - pi_{t/4}|| on random instances."""
    out = []
    for seed in range(num):
        pb = random_problem(_rng(seed), 4, 3, 2)
        o = ExactOracles(pb)
        pis = {}
        for t in taus:
            for m in (1, 2, 4):
                pis.setdefault(t / m, o.soft_optimum(pb.x0, t / m)[1])
        out.append([np.linalg.norm(pis[t] - pis[t / 2]) / np.linalg.norm(pis[t / 2] - pis[t / 4])
                    for t in taus])
    return np.array(out)


@check("oracles.pi_tau_linear_rate",
       "||pi_tau - pi_{tau/2}|| halving ratios lie in [1.5, 2.5] for tau in {0.1, 0.05, 0.025}",
       known_failure="on finite MDPs pi_tau converges to pi* exponentially fast in 1/tau, "
                     "so the ratios grow without bound instead of settling near 2")
def _pi_tau_rate():
    r = pi_tau_halving_ratios()
    ok = bool(np.all((r >= 1.5) & (r <= 2.5)))
    return ok, "ratios " + "; ".join(" ".join(f"{v:.3g}" for v in row) for row in r)


def penalty_gap_ratios(num=5, w=0.02, tau=0.5):
    """||grad Phi_{w,tau} - fd grad Phi_tau|| at w over the same at w/2."""
    out = []
    for seed in range(num):
        pb = random_problem(_rng(100 + seed), 3, 2, 2)
        o = ExactOracles(pb)
        x = pb.x0
        fd = o.fd_hypergrad_phi_tau(x, tau, 1e-5)
        g1 = np.linalg.norm(o.penalty_hypergrad(x, w, tau) - fd)
        g2 = np.linalg.norm(o.penalty_hypergrad(x, w / 2, tau) - fd)
        out.append(g1 / g2)
    return np.array(out)


@check("oracles.penalty_gap_linear_in_w",
       "penalty hypergradient bias halves with w (ratio in [1.4, 2.6], 5 instances)")
def _penalty_gap():
    r = penalty_gap_ratios()
    return bool(np.all((r >= 1.4) & (r <= 2.6))), "ratios " + " ".join(f"{v:.3f}" for v in r)


def soft_vi_errors(num=10):
    """(max Bellman residual, max error of pi against exp(r / tau) on one-state MDPs)."""
    res, closed = 0.0, 0.0
    for seed in range(num):
        pb, _, tau, rng = _random_instance(400 + seed)
        tau = max(tau, 0.05)
        V, _ = soft_value_iteration(pb.mdp, pb.reward, pb.x0, tau)
        res = max(res, bellman_residual(pb.mdp, pb.reward, pb.x0, V, tau))
        nA = int(rng.integers(2, 5))
        one = TabularMdp(np.ones((1, nA, 1)), 0.9, np.ones(1))
        r = rng.normal(size=(1, nA))
        _, pi = soft_value_iteration(one, r, None, tau)
        closed = max(closed, float(np.abs(pi - softmax(r / tau)).max()))
    return res, closed


@check("oracles.soft_value_iteration",
       "soft VI Bellman residual <= 1e-12; one-state policies match pi ~ exp(r / tau) to 1e-10")
def _soft_vi():
    res, closed = soft_vi_errors()
    return res <= 1e-12 and closed <= 1e-10, f"residual {res:.1e}, closed-form error {closed:.1e}"


@check("oracles.soft_optimum_stationary", "grad_theta J_tau vanishes at the soft optimum")
def _soft_stationary():
    worst = 0.0
    for seed in range(10):
        pb, _, tau, _ = _random_instance(seed)
        tau = max(tau, 0.05)
        _, pi = soft_value_iteration(pb.mdp, pb.reward, pb.x0, tau)
        worst = max(worst, float(np.abs(grad_theta_return(pb.mdp, pb.reward, pb.x0,
                                                          np.log(pi), tau)).max()))
    return worst <= 1e-9, f"max |grad| {worst:.2e}"


def tied_instance(seed, num_states=4, num_actions=3, gamma=0.9):
    """MDP whose unregularized optimum has ties between actions with different futures."""
    rng = _rng(seed)
    mdp = TabularMdp.random(rng, num_states, num_actions, gamma)
    V0 = rng.normal(size=num_states)
    r = V0[:, None] - gamma * mdp.transition @ V0
    optimal = rng.random((num_states, num_actions)) < 0.6
    optimal[np.arange(num_states), rng.integers(num_actions, size=num_states)] = True
    r = np.where(optimal, r, r - rng.uniform(0.5, 1.0, size=r.shape))
    reward = FeatureReward(r, np.zeros((num_states, num_actions, 1)), x_lo=[0.0], x_hi=[0.0])
    return mdp, reward, optimal


@check("oracles.entropy_selection",
       "pi_tau at tau=1e-6 has the largest weighted entropy among optimal policies")
def _entropy_selection():
    worst = np.inf
    for seed in range(5):
        mdp, reward, optimal = tied_instance(seed)
        _, pi_star = soft_value_iteration(mdp, reward, np.zeros(1), 1e-6)
        h_star = weighted_entropy(mdp, pi_star)
        rng = _rng(seed)
        candidates = [optimal / optimal.sum(axis=1, keepdims=True)]
        for choice in itertools.product(*(np.flatnonzero(row) for row in optimal)):
            det = np.zeros_like(pi_star)
            det[np.arange(mdp.num_states), choice] = 1.0
            candidates.append(det)
        for _ in range(20):
            mix = rng.random(optimal.shape) * optimal
            candidates.append(mix / mix.sum(axis=1, keepdims=True))
        worst = min(worst, min(h_star - weighted_entropy(mdp, c) for c in candidates))
    return worst >= -1e-6, f"min H(pi_1e-6) - H(candidate) = {worst:.3e}"


# ---------------------------------------------------------------- operators

def operator_identity_errors(num=5):
    """Max absolute errors of the four enumerated-expectation identities."""
    errs = {"F_grad": 0.0, "G_zero": 0.0, "D_hypergrad": 0.0, "baseline": 0.0}
    for seed in range(num):
        pb, theta, tau, rng = _random_instance(200 + seed, num_states=3, num_actions=2)
        tau = max(tau, 0.2)
        mdp, x = pb.mdp, pb.x0
        shift = pb.reward_shift
        pi = softmax(theta)
        V = exact_value(mdp, pb.reward, x, pi, tau) - shift / (1.0 - mdp.gamma)
        F = expected_F(pb, x, theta, V, 0.0, tau, shift)
        errs["F_grad"] = max(errs["F_grad"], float(np.abs(F - grad_theta_return(
            mdp, pb.reward, x, theta, tau)).max()))
        errs["G_zero"] = max(errs["G_zero"], float(np.abs(expected_G(pb, x, theta, V, tau, shift)).max()))
        F_nb = expected_F(pb, x, theta, V, 0.0, tau, shift, include_baseline=False)
        errs["baseline"] = max(errs["baseline"], float(np.abs(F - F_nb).max()))
        o = ExactOracles(pb)
        w = 0.5
        pi_t = o.soft_optimum(x, tau)[1]
        pi_wt = o.lagrangian_optimum(x, w, tau)
        D = expected_D(pb, x, pi_t, pi_wt, w)
        errs["D_hypergrad"] = max(errs["D_hypergrad"],
                                  float(np.abs(D - o.penalty_hypergrad(x, w, tau)).max()))
    return errs


@check("operators.expected_identities",
       "enumerated F, G, D expectations equal grad J, 0, the penalty hypergradient; "
       "F is baseline-invariant (1e-10)")
def _operator_identities():
    errs = operator_identity_errors()
    return max(errs.values()) <= 1e-10, ", ".join(f"{k} {v:.1e}" for k, v in errs.items())


def monte_carlo_F(num=100_000, seed=7):
    """(max |z-score|) of the sample mean of iid sample_F draws against expected_F."""
    pb, theta, tau, _ = _random_instance(seed, num_states=3, num_actions=2)
    mdp, x, shift = pb.mdp, pb.x0, pb.reward_shift
    pi = softmax(theta)
    V = exact_value(mdp, pb.reward, x, pi, tau) - shift / (1.0 - mdp.gamma) + 0.3
    rng = _rng(seed)
    d = discounted_visitation(mdp, pi)
    draws = np.empty((num, pi.size))
    for i in range(num):
        s, a, s1 = iid_sample(mdp, pi, rng, d)
        draws[i] = sample_F(pb, x, pi, V, s, a, s1, 0.0, tau, shift=shift).value.ravel()
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / math.sqrt(num)
    target = expected_F(pb, x, theta, V, 0.0, tau, shift).ravel()
    z = np.abs(mean - target) / np.maximum(se, 1e-300)
    return float(z.max())


@check("operators.monte_carlo_F", "mean of 1e5 iid sample_F draws is within 4 SE of expected_F")
def _mc_F():
    z = monte_carlo_F()
    return z <= 4.0, f"max |z| = {z:.2f}"


def _bound_regime_problem(seed):
    """Random problem with w <= L_r / L_f and tau <= 1."""
    return random_problem(_rng(300 + seed), 4, 3, 2)


@check("operators.bounds_hold", "every sampled D, F, G respects its bound (w <= L_r/L_f, tau <= 1)")
def _bounds_hold():
    stats_all = np.zeros(6)
    for seed in range(3):
        pb = _bound_regime_problem(seed)
        L_r, L_fx, _ = pb.lipschitz()
        w0 = min(0.5, L_r / max(L_fx, 1e-12))
        sched = ScheduleSet(0.05, 0.1, 0.1, w0, 1.0, c_tau=0.05)
        opts = AlgorithmOptions(track_bounds=True)
        st = init_state(pb, seed)
        advance(st, pb, sched, 20_000, opts)
        stats_all = np.maximum(stats_all, st.bound_stats)
    violations = int(stats_all[3:].sum())
    return violations == 0, (f"max ratios D {stats_all[0]:.3f} F {stats_all[1]:.3f} "
                             f"G {stats_all[2]:.3f}; violations {violations}")


# ---------------------------------------------------------------- actor-critic

def _small_gridworld():
    return GridWorldSpec(4, 4, 0.9, 5.0).build()


@check("actor_critic.determinism", "identical config and seed give identical traces")
def _determinism():
    pb = _small_gridworld()
    sched = ScheduleSet(1e-3, 1e-2, 0.5, 1.0, 2.0)
    ev = Evaluator(ExactOracles(pb), grad_norm=False)
    texts = [emit_trace(run(pb, sched, 3000, seed=5, evaluator=ev).records) for _ in range(2)]
    return texts[0] == texts[1], f"{len(texts[0])} bytes"


@check("actor_critic.projection_safety", "critic entries stay in [0, B_V] after every step")
def _projection_safety():
    pb = _small_gridworld()
    sched = ScheduleSet(1e-3, 5e-2, 1.0, 1.0, 2.0, c_beta=0.0)
    bounds = OperatorBounds.from_problem(pb, sched.tau0)
    st = init_state(pb, 1, critic_init=0.5, tau_cap=sched.tau0)
    lo, hi = np.inf, -np.inf
    opts = AlgorithmOptions(use_kernel=False)
    for _ in range(3000):
        step(st, pb, sched, opts, bounds)
        both = np.concatenate([st.v_hat, st.v_hat_L])
        lo, hi = min(lo, both.min()), max(hi, both.max())
    return lo >= 0.0 and hi <= bounds.B_V, f"range [{lo:.4g}, {hi:.4g}], B_V {bounds.B_V:.4g}"


@check("actor_critic.two_samples_per_iteration",
       "each iteration consumes one transition from each of the two trajectories")
def _two_samples():
    pb = _small_gridworld()
    sched = ScheduleSet(1e-3, 1e-2, 0.5, 1.0, 2.0)
    st = init_state(pb, 2)
    before = st.rng.bit_generator.state
    advance(st, pb, sched, 500)
    ref = np.random.Generator(np.random.PCG64())
    ref.bit_generator.state = before
    ref.random((500, 8))
    same_stream = ref.bit_generator.state == st.rng.bit_generator.state
    return st.samples == 1000 and st.k == 500 and same_stream, f"samples {st.samples} after 500 iterations"


def restart_chain_tv(steps=1_000_000, seed=3):
    """TV distance between the visited-state law of the restart chain and d_rho^pi."""
    pb, theta, _, _ = _random_instance(seed, num_states=5, num_actions=3)
    mdp, pi = pb.mdp, softmax(theta)
    rng = _rng(seed)
    counts = np.zeros(mdp.num_states)
    cursor = kernels.categorical(mdp.rho, rng.random())
    block = 100_000
    for start in range(0, steps, block):
        u = rng.random((min(block, steps - start), 4))
        for row in u:
            counts[cursor] += 1
            cursor = _advance(mdp, pi, cursor, row)[3]
    return 0.5 * float(np.abs(counts / steps - discounted_visitation(mdp, pi)).sum())


@check("actor_critic.restart_stationarity",
       "empirical law of the gamma-restart sampler is within TV 0.02 of d_rho^pi after 1e6 steps")
def _restart_stationarity():
    tv = restart_chain_tv()
    return tv <= 0.02, f"TV {tv:.4f}"


def iid_chi_square(n=50_000, seed=4):
    pb, theta, _, _ = _random_instance(seed, num_states=5, num_actions=3)
    mdp, pi = pb.mdp, softmax(theta)
    d = discounted_visitation(mdp, pi)
    rng = _rng(seed)
    counts = np.zeros(mdp.num_states)
    for _ in range(n):
        counts[iid_sample(mdp, pi, rng, d)[0]] += 1
    return float(stats.chisquare(counts, n * d).pvalue)


@check("actor_critic.iid_chi_square", "i.i.d. sampler passes a chi-square test at alpha = 0.01")
def _iid_chi2():
    p = iid_chi_square()
    return p >= 0.01, f"p-value {p:.3f}"


def theta_ascent_residual(seed=0, steps=100_000, tau=0.5, alpha0=0.05):
    """eps_theta after actor steps with the exact critic at frozen x (5-state instance)."""
    pb, _, _, _ = _random_instance(500 + seed, num_states=5, num_actions=3)
    mdp, x = pb.mdp, pb.x0
    r = pb.reward.table(x)
    theta = np.zeros((mdp.num_states, mdp.num_actions))
    rng = _rng(seed)
    cursor = kernels.categorical(mdp.rho, rng.random())
    gamma = mdp.gamma
    for k in range(steps):
        pi = softmax(theta)
        if k % 10 == 0:
            V = exact_value(mdp, r, None, pi, tau)
        s, a, s1, cursor = _advance(mdp, pi, cursor, rng.random(4))
        ent = float(entropies(pi[s:s + 1])[0])
        td = r[s, a] + tau * ent + gamma * V[s1] - V[s]
        row = -td * pi[s]
        row[a] += td
        logp = np.log(pi[s])
        row += tau * pi[s] * (-logp - ent)
        theta[s] += alpha0 / math.sqrt(k + 1) * row / (1.0 - gamma)
    V_star, _ = soft_value_iteration(mdp, pb.reward, x, tau)
    J_star = exact_return(mdp, V_star)
    return J_star - exact_return(mdp, exact_value(mdp, r, None, softmax(theta), tau))


@check("actor_critic.theta_ascent_exact_critic",
       "with x frozen and the exact critic, actor steps drive eps_theta below 1e-3 in 1e5 steps")
def _theta_ascent():
    res = [theta_ascent_residual(seed) for seed in range(2)]
    return max(res) < 1e-3, "eps_theta " + " ".join(f"{v:.2e}" for v in res)


@check("actor_critic.kernel_backends_agree",
       "compiled kernel, Python kernel and the generic step produce the same iterates")
def _kernels_agree():
    pb = _small_gridworld()
    sched = ScheduleSet(1e-3, 1e-2, 0.5, 1.0, 2.0)
    states = []
    for runner in ("python", "compiled", "step"):
        st = init_state(pb, 9, critic_init=1.0, tau_cap=sched.tau0)
        if runner == "step":
            advance(st, pb, sched, 2000, AlgorithmOptions(use_kernel=False))
        else:
            seg = kernels.python_run_segment if runner == "python" else kernels.compiled_run_segment()
            if seg is None:
                continue
            advance(st, pb, sched, 2000, run_segment=seg)
        states.append(st)
    worst = max(float(np.abs(a.x - b.x).max() + np.abs(a.theta - b.theta).max()
                      + np.abs(a.theta_L - b.theta_L).max()) for a, b in zip(states, states[1:]))
    return worst <= 1e-8, f"{len(states)} backends, max difference {worst:.1e}"


# ---------------------------------------------------------------- baselines

@check("baselines.shared_trace_format", "every algorithm emits the same trace columns and sample counts")
def _shared_trace():
    pb = _small_gridworld()
    sched = ScheduleSet(1e-3, 1e-2, 0.5, 1.0, 2.0)
    ev = Evaluator(ExactOracles(pb), phi=True, grad_norm=False)
    heads, ok = set(), True
    expected = {"partial_sgd": 1, "finite_difference": 2 * 50, "nested_loop": 2 * 50,
                "fixed_regularization": 2}
    for kind, per in expected.items():
        cfg = BaselineConfig(kind, inner_iters=50, fixed_tau=1.0)
        res = run_baseline(pb, sched, cfg, 4, evaluator=ev, cadence="every:2")
        heads.add(emit_trace(res.records).splitlines()[0])
        ok &= res.final.samples == per * res.final.k
    return ok and len(heads) == 1, f"{len(heads)} distinct headers"


@check("baselines.partial_decomposition",
       "on identical draws, the partial-gradient x step is the proposed step minus the 1/w penalty term")
def _partial_decomposition():
    pb = _small_gridworld()
    mdp, gamma = pb.mdp, pb.mdp.gamma
    opts = AlgorithmOptions(use_kernel=False)
    base = init_state(pb, 4, critic_init=0.5, tau_cap=2.0)
    advance(base, pb, ScheduleSet(1e-3, 1e-2, 0.5, 0.7, 2.0), 50, opts)
    # equal policies make grad_x f identical in both variants
    base.theta_L = base.theta.copy()
    worst = 0.0
    for w0 in (0.1, 0.7, 5.0):
        sched = ScheduleSet(1e-3, 1e-2, 0.5, w0, 2.0)
        zeta, _, _, w, _ = sched.at(base.k)
        x, pi = base.x.copy(), softmax(base.theta)
        u = base.copy().rng.random(8)
        s, a, _, _ = _advance(mdp, pi, int(base.cursors[0]), u[:4])
        sb, ab, _, _ = _advance(mdp, pi, int(base.cursors[1]), u[4:])
        gx = pb.upper.grad_x(x, pi)
        penalty = (pb.reward.grad_x(x, s, a) - pb.reward.grad_x(x, sb, ab)) / (w * (1.0 - gamma))
        prop, part = base.copy(), base.copy()
        step(prop, pb, sched, opts, variant="proposed")
        step(part, pb, sched, opts, variant="partial_sgd")
        worst = max(worst,
                    float(np.abs(prop.x - pb.project(x - zeta * (gx + penalty))).max()),
                    float(np.abs(part.x - pb.project(x - zeta * gx)).max()))
    return worst <= 1e-12, f"max x difference {worst:.1e} across w in (0.1, 0.7, 5)"


# ---------------------------------------------------------------- environments

@check("envs.gridworld_point_mass", "GridWorld transitions are deterministic with clamping at walls")
def _gridworld_point_mass():
    spec = GridWorldSpec()
    P = spec.transition()
    point = bool(np.all(np.isclose(P.max(axis=2), 1.0)) and np.all(np.isin(P, (0.0, 1.0))))
    corner = spec.num_states - 1
    clamp = P[corner, 1, corner] == 1.0 and P[corner, 3, corner] == 1.0 and P[0, 0, 0] == 1.0
    return point and clamp, "every row is a point mass" if point else "non-point-mass row"


def gridworld_lattice_phi(spec: GridWorldSpec | None = None):
    spec = spec or GridWorldSpec()
    pb = spec.build()
    o = ExactOracles(pb)
    goals = spec.coords()
    return goals, np.array([o.phi(g) for g in goals])


@check("envs.gridworld_corner_optimum", "the bottom-right corner minimizes Phi over lattice goals")
def _corner_optimum():
    goals, phis = gridworld_lattice_phi()
    best = goals[int(np.argmin(phis))]
    second = np.sort(phis)[1]
    return bool(np.all(best == GridWorldSpec().corner)), (
        f"argmin ({best[0]:g}, {best[1]:g}) with Phi {phis.min():.4f}; runner-up {second:.4f}")


@check("envs.preference_shift_invariance",
       "adding a per-step constant to r_x leaves the preference loss unchanged (1e-12)")
def _preference_shift():
    pb = PreferenceProblemSpec().build()
    up = pb.upper
    rng = _rng(13)
    worst = 0.0
    for _ in range(20):
        x = rng.uniform(-2, 2, size=4)
        pi = softmax(rng.normal(size=(4, 2)))
        c = rng.uniform(-1, 1)
        worst = max(worst, abs(up.value(x, pi) - up.value(x + c, pi)))
        s0, s1 = rng.normal(size=2) * 3
        y = float(rng.integers(2))
        L = up.length
        worst = max(worst, abs(float(preference_loss(s0, s1, y) - preference_loss(s0 + L * c, s1 + L * c, y))))
    return worst <= 1e-12, f"max loss change {worst:.1e}"


# ---------------------------------------------------------------- harness

@check("harness.config_trace_pure", "config to trace is a pure function of (config, seed)")
def _config_pure():
    from .config import apply_overrides, build, defaults
    from .harness import execute
    vals = apply_overrides(defaults(), ["gridworld.width=4", "gridworld.height=4", "run.iterations=2000",
                                        "evaluation.grad_norm=false", "run.seed=77"])
    texts = [emit_trace(execute(build(vals)).records) for _ in range(2)]
    return texts[0] == texts[1], f"{len(texts[0])} bytes"


@check("harness.trace_roundtrip", "emitted traces parse back bit for bit")
def _roundtrip():
    pb = _small_gridworld()
    sched = ScheduleSet(1e-3, 1e-2, 0.5, 1.0, 2.0)
    res = run(pb, sched, 500, seed=1, evaluator=Evaluator(ExactOracles(pb)))
    back = parse_trace(emit_trace(res.records))
    same = all(a == b or (a != a and b != b)
               for r1, r2 in zip(res.records, back)
               for a, b in zip(_flat(r1), _flat(r2)))
    return same and len(back) == len(res.records), f"{len(back)} records"


def _flat(rec):
    return [rec.k, rec.samples, rec.phi, rec.grad_norm, rec.eps_theta, rec.eps_theta_L, rec.eps_V,
            rec.eps_V_L, *rec.x, rec.zeta, rec.alpha, rec.beta, rec.w, rec.tau]


def run_checks(names=None, report=None) -> list[CheckResult]:
    selected = [CHECKS[n] for n in (names or CHECKS)]
    results = []
    for c in selected:
        t0 = time.perf_counter()
        try:
            passed, detail = c.fn()
        except Exception as err:  # a crashing check is a failing check
            passed, detail = False, f"{type(err).__name__}: {err}"
        res = CheckResult(c.name, bool(passed), detail, time.perf_counter() - t0, c.known_failure)
        results.append(res)
        if report:
            report(res)
    return results


def exit_code(results) -> int:
    return 0 if all(r.passed or r.known_failure for r in results) else 1
