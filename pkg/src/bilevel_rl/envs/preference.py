"""Tabular preference learning with a Bradley-Terry upper objective.

The lower level is a small slip chain whose reward ``r_x(s, a) = x[s]`` is
learned. Responses are length-``L`` rollouts of the lower policy from rho.
A hidden per-state scorer labels each pair: ``y = 1`` when the first
response has the strictly higher true score. The upper objective is the
expected Bradley-Terry negative log-likelihood of those labels under the
learned scores, with both responses drawn from the current policy.

Exact values and gradients enumerate every positive-probability trajectory;
:meth:`BradleyTerryUpper.sample_grads` gives unbiased one-pair estimates
(pathwise in x, score function in the policy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .. import kernels
from ..mdp import FeatureReward, TabularMdp
from ..policy import softmax_vjp
from ..problem import BilevelProblem, UpperObjective

LEFT, RIGHT = 0, 1
TRAJECTORY_LIMIT = 4096
LOG2 = math.log(2.0)


def bradley_terry_prob(score0: float, score1: float) -> float:
    """P(p0 > p1) = exp(score0) / (exp(score0) + exp(score1))."""
    if not (np.isfinite(score0) and np.isfinite(score1)):
        raise ValueError("Bradley-Terry scores must be finite")
    return float(expit(score0 - score1))


def preference_loss(score0, score1, y):
    """-[y log P(p0 > p1) + (1 - y) log P(p1 > p0)], elementwise."""
    delta = np.asarray(score0) - np.asarray(score1)
    return y * np.logaddexp(0.0, -delta) + (1.0 - y) * np.logaddexp(0.0, delta)


def slip_chain(num_states: int, gamma: float, slip: float) -> TabularMdp:
    """Chain with LEFT/RIGHT moves that go the other way with probability ``slip``."""
    if num_states < 2:
        raise ValueError("the chain needs at least two states")
    if not 0.0 <= slip < 0.5:
        raise ValueError("slip must lie in [0, 0.5)")
    P = np.zeros((num_states, 2, num_states))
    for s in range(num_states):
        left, right = max(s - 1, 0), min(s + 1, num_states - 1)
        P[s, LEFT, left] += 1.0 - slip
        P[s, LEFT, right] += slip
        P[s, RIGHT, right] += 1.0 - slip
        P[s, RIGHT, left] += slip
    return TabularMdp(P, gamma, np.full(num_states, 1.0 / num_states))


@dataclass(frozen=True)
class TrajectoryTable:
    """Every positive-probability length-L trajectory of an MDP.

    ``env_prob`` is rho(s_0) prod P(s_{t+1} | s_t, a_t); the policy factor is
    the product of ``pi.flat[flat_index]`` along each row.
    """

    states: np.ndarray
    actions: np.ndarray
    env_prob: np.ndarray
    flat_index: np.ndarray
    counts: np.ndarray

    def __len__(self) -> int:
        return len(self.env_prob)

    def probabilities(self, pi) -> np.ndarray:
        """Trajectory law under ``pi``; complex-safe for complex-step derivatives."""
        return self.env_prob * np.prod(pi.reshape(-1)[self.flat_index], axis=1)


def enumerate_trajectories(mdp: TabularMdp, length: int, limit: int = TRAJECTORY_LIMIT) -> TrajectoryTable:
    nS, nA = mdp.num_states, mdp.num_actions
    paths = [((s,), (), float(mdp.rho[s])) for s in range(nS) if mdp.rho[s] > 0]
    for t in range(length):
        grown = []
        for states, actions, prob in paths:
            s = states[-1]
            for a in range(nA):
                if t == length - 1:
                    grown.append((states, actions + (a,), prob))
                    continue
                for s2 in np.flatnonzero(mdp.transition[s, a] > 0):
                    grown.append((states + (int(s2),), actions + (a,), prob * mdp.transition[s, a, s2]))
        paths = grown
        if len(paths) > limit:
            raise ValueError(f"more than {limit} trajectories; enumeration is not feasible")
    states = np.array([p[0] for p in paths], dtype=np.int64)
    actions = np.array([p[1] for p in paths], dtype=np.int64)
    flat = states * nA + actions
    counts = np.zeros((len(paths), nS * nA))
    for t in range(length):
        np.add.at(counts, (np.arange(len(paths)), flat[:, t]), 1.0)
    return TrajectoryTable(states, actions, np.array([p[2] for p in paths]), flat, counts)


@dataclass(frozen=True)
class PairSample:
    """One sampled comparison: the noise xi = (p0, p1, y) and its estimates."""

    loss: float
    grad_x: np.ndarray
    grad_pi: np.ndarray
    y: float


@dataclass
class BradleyTerryUpper(UpperObjective):
    """Expected preference NLL over response pairs drawn from the lower policy."""

    mdp: TabularMdp
    reward: FeatureReward
    true_table: np.ndarray
    length: int
    pairs_per_eval: int = 1
    baseline: float = LOG2
    deterministic = False
    _table: TrajectoryTable | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.true_table = np.asarray(self.true_table, dtype=float)
        if self.length < 1:
            raise ValueError("trajectory_len must be at least 1")
        if self.pairs_per_eval < 1:
            raise ValueError("pairs_per_eval must be at least 1")

    @property
    def table(self) -> TrajectoryTable:
        if self._table is None:
            self._table = enumerate_trajectories(self.mdp, self.length)
        return self._table

    @staticmethod
    def _true_score(total):
        # rounding makes ties independent of summation order
        return np.round(total, 9)

    def _pair_terms(self, x):
        tab = self.table
        true = self._true_score(tab.counts @ self.true_table.reshape(-1))
        y = (true[:, None] > true[None, :]).astype(float)
        score = tab.counts @ self.reward.table(np.asarray(x, dtype=float)).reshape(-1)
        delta = score[:, None] - score[None, :]
        return y, delta

    def value(self, x, pi):
        q = self.table.probabilities(pi)
        y, delta = self._pair_terms(x)
        return q @ preference_loss(delta, 0.0, y) @ q

    def grad_x(self, x, pi):
        tab = self.table
        q = tab.probabilities(np.asarray(pi, dtype=float))
        y, delta = self._pair_terms(x)
        M = np.outer(q, q) * (expit(delta) - y)
        feats = tab.counts @ self.reward.grad_table(np.asarray(x, dtype=float)).reshape(tab.counts.shape[1], -1)
        return (M.sum(axis=1) - M.sum(axis=0)) @ feats

    def grad_pi(self, x, pi):
        tab = self.table
        q = tab.probabilities(pi)
        y, delta = self._pair_terms(x)
        ell = preference_loss(delta, 0.0, y)
        weight = q * (ell @ q + q @ ell)
        return ((weight @ tab.counts) / pi.reshape(-1)).reshape(pi.shape)

    def rollout(self, pi, rng: np.random.Generator):
        """One trajectory (states, actions) of length L from rho."""
        mdp = self.mdp
        u = rng.random(2 * self.length)
        s = kernels.categorical(mdp.rho, u[0])
        states, actions = [], []
        for t in range(self.length):
            a = kernels.categorical(pi[s], u[2 * t + 1])
            states.append(s)
            actions.append(a)
            if t < self.length - 1:
                s = kernels.categorical(mdp.transition[s, a], u[2 * t + 2])
        return np.array(states), np.array(actions)

    def sample_pair(self, x, pi, rng: np.random.Generator) -> PairSample:
        pi = np.asarray(pi, dtype=float)
        if not (np.all(np.isfinite(pi)) and np.allclose(pi.sum(axis=1), 1.0)):
            raise ValueError("rollout policy rows must be finite distributions")
        x = np.asarray(x, dtype=float)
        (s0, a0), (s1, a1) = self.rollout(pi, rng), self.rollout(pi, rng)
        true0 = self._true_score(self.true_table[s0, a0].sum())
        true1 = self._true_score(self.true_table[s1, a1].sum())
        y = 1.0 if true0 > true1 else 0.0
        r = self.reward.table(x)
        delta = r[s0, a0].sum() - r[s1, a1].sum()
        loss = float(preference_loss(delta, 0.0, y))
        G = self.reward.grad_table(x)
        gx = (expit(delta) - y) * (G[s0, a0].sum(axis=0) - G[s1, a1].sum(axis=0))
        counts = np.zeros(pi.shape)
        np.add.at(counts, (s0, a0), 1.0)
        np.add.at(counts, (s1, a1), 1.0)
        # a constant baseline keeps the score-function estimate unbiased
        gpi = (loss - self.baseline) * counts / pi
        return PairSample(loss, gx, gpi, y)

    def sample_grads(self, x, pi, rng):
        gx = np.zeros(self.reward.dim_x)
        gt = np.zeros(np.shape(pi))
        for _ in range(self.pairs_per_eval):
            smp = self.sample_pair(x, pi, rng)
            gx += smp.grad_x
            gt += softmax_vjp(np.asarray(pi, dtype=float), smp.grad_pi)
        return gx / self.pairs_per_eval, gt / self.pairs_per_eval

    def _max_gap(self) -> float:
        lo, hi = self.reward.reward_bounds()
        return self.length * (hi - lo)

    def lipschitz(self):
        g = self.reward.grad_bound()
        loss_max = float(np.logaddexp(0.0, self._max_gap()))
        spread = max(loss_max - self.baseline, self.baseline)
        return 2.0 * self.length * g, spread * 2.0 * self.length * math.sqrt(2.0)


def preference_upper(x, pi, rng: np.random.Generator, upper: BradleyTerryUpper) -> PairSample:
    """One stochastic loss sample with its x- and policy-gradient estimates."""
    return upper.sample_pair(x, pi, rng)


@dataclass(frozen=True)
class PreferenceProblemSpec:
    num_states: int = 4
    gamma: float = 0.9
    slip: float = 0.1
    trajectory_len: int = 3
    pairs_per_eval: int = 1
    x_bound: float = 2.0
    true_reward: tuple | None = None

    def __post_init__(self):
        if not 2 <= self.num_states <= 8:
            raise ValueError("the preference chain has between 2 and 8 states")
        if self.trajectory_len < 1:
            raise ValueError("trajectory_len must be at least 1")
        if not self.x_bound > 0:
            raise ValueError("x_bound must be positive")

    def base_mdp(self) -> TabularMdp:
        return slip_chain(self.num_states, self.gamma, self.slip)

    def true_table(self) -> np.ndarray:
        """Hidden per-state scorer, repeated over actions."""
        if self.true_reward is None:
            per_state = np.linspace(-1.0, 1.0, self.num_states)
        else:
            per_state = np.asarray(self.true_reward, dtype=float)
            if per_state.shape != (self.num_states,):
                raise ValueError("true_reward needs one entry per state")
        return np.repeat(per_state[:, None], 2, axis=1)

    def build(self) -> BilevelProblem:
        n = self.num_states
        mdp = self.base_mdp()
        lo, hi = np.full(n, -self.x_bound), np.full(n, self.x_bound)
        feats = np.repeat(np.eye(n)[:, None, :], 2, axis=1)
        reward = FeatureReward(np.zeros((n, 2)), feats, 0.0, x_lo=lo, x_hi=hi)
        upper = BradleyTerryUpper(mdp, reward, self.true_table(), self.trajectory_len,
                                  self.pairs_per_eval)
        return BilevelProblem(mdp, reward, upper, x0=np.zeros(n), x_lo=lo, x_hi=hi, name="preference")
