"""GridWorld goal placement.

States are grid cells indexed ``s = row * width + col``. The first coordinate
is the column (grows to the RIGHT), the second is the row (grows DOWN), so the
bottom-right corner is ``(width - 1, height - 1)``. The upper-level variable
``x`` is a continuous goal position; the reward is the negated squared
distance to it, and the upper objective keeps the goal near the center while
rewarding policies that favour DOWN and RIGHT.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..mdp import FeatureReward, TabularMdp
from ..problem import BilevelProblem, LinearPolicyUpper

UP, DOWN, LEFT, RIGHT = range(4)
ACTIONS = ("UP", "DOWN", "LEFT", "RIGHT")
_MOVES = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}


@dataclass(frozen=True)
class GridWorldSpec:
    width: int = 10
    height: int = 10
    gamma: float = 0.95
    lam: float = 10.0
    rho: tuple | None = None
    normalize_reward: bool = False

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid dimensions must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")

    @property
    def num_states(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.width - 1) / 2.0, (self.height - 1) / 2.0])

    @property
    def corner(self) -> np.ndarray:
        return np.array([self.width - 1.0, self.height - 1.0])

    def coords(self) -> np.ndarray:
        """(|S|, 2) array of (col, row) coordinates."""
        s = np.arange(self.num_states)
        return np.stack([s % self.width, s // self.width], axis=1).astype(float)

    def transition(self) -> np.ndarray:
        P = np.zeros((self.num_states, 4, self.num_states))
        for s, (col, row) in enumerate(self.coords().astype(int)):
            for a, (dc, dr) in _MOVES.items():
                c2, r2 = col + dc, row + dr
                if not (0 <= c2 < self.width and 0 <= r2 < self.height):
                    c2, r2 = col, row
                P[s, a, r2 * self.width + c2] = 1.0
        return P

    def build(self) -> BilevelProblem:
        coords = self.coords()
        n = self.num_states
        rho = np.full(n, 1.0 / n) if self.rho is None else np.asarray(self.rho, dtype=float)
        mdp = TabularMdp(self.transition(), self.gamma, rho)
        lo, hi = np.zeros(2), self.corner
        base = np.repeat(-(coords ** 2).sum(axis=1)[:, None], 4, axis=1)
        feats = np.repeat(2.0 * coords[:, None, :], 4, axis=1)
        quad = 1.0
        if self.normalize_reward:
            r_min = -float(((hi - lo) ** 2).sum())
            span = -r_min
            base, feats, quad = (base - r_min) / span, feats / span, quad / span
        reward = FeatureReward(base, feats, quad, x_lo=lo, x_hi=hi)
        weights = np.zeros((n, 4))
        weights[:, [DOWN, RIGHT]] = -self.lam
        upper = LinearPolicyUpper(1.0, self.center, weights, x_lo=lo, x_hi=hi)
        return BilevelProblem(mdp, reward, upper, x0=self.center, x_lo=lo, x_hi=hi, name="gridworld")


def gridworld_reward(x, s: int, spec: GridWorldSpec = GridWorldSpec()) -> float:
    col, row = spec.coords()[s]
    return -float((col - x[0]) ** 2 + (row - x[1]) ** 2)


def gridworld_reward_grad(x, s: int, spec: GridWorldSpec = GridWorldSpec()) -> np.ndarray:
    return 2.0 * (spec.coords()[s] - np.asarray(x, dtype=float))


def gridworld_upper(x, pi, lam: float, spec: GridWorldSpec = GridWorldSpec()):
    """f(x, pi) with its gradients (grad_x, grad_pi)."""
    x = np.asarray(x, dtype=float)
    diff = x - spec.center
    value = float(diff @ diff - lam * (pi[:, DOWN] + pi[:, RIGHT]).sum())
    grad_pi = np.zeros_like(pi)
    grad_pi[:, [DOWN, RIGHT]] = -lam
    return value, 2.0 * diff, grad_pi


def lattice_goals(spec: GridWorldSpec) -> np.ndarray:
    """All lattice goal positions, in state order."""
    return spec.coords()
