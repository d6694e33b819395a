"""Power-law step-size, penalty and regularization schedules."""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

NAMES = ("zeta", "alpha", "beta", "w", "tau")


def parse_exponent(text) -> float:
    """Accept floats or rationals written as ``p/q``."""
    if isinstance(text, (int, float)):
        return float(text)
    return float(Fraction(str(text).strip()))


@dataclass(frozen=True)
class ScheduleSet:
    """Five sequences ``base / (k + 1) ** exponent``.

    ``strict`` enforces zeta0 <= alpha0 <= beta0 <= w0 <= tau0 <= 1.
    """

    zeta0: float
    alpha0: float
    beta0: float
    w0: float
    tau0: float
    c_zeta: float = 0.9
    c_alpha: float = 0.5
    c_beta: float = 0.5
    c_w: float = 0.15
    c_tau: float = 0.05
    strict: bool = False

    def __post_init__(self):
        for name in NAMES:
            if not getattr(self, name + "0") >= 0 or not np.isfinite(getattr(self, name + "0")):
                raise ValueError(f"schedule base {name}0 must be a finite nonnegative number")
            if not getattr(self, "c_" + name) >= 0:
                raise ValueError(f"schedule exponent c_{name} must be nonnegative")
        if not (self.w0 > 0 and self.tau0 > 0):
            raise ValueError("w0 and tau0 must be positive")
        if self.strict:
            chain = [self.zeta0, self.alpha0, self.beta0, self.w0, self.tau0, 1.0]
            if any(lo > hi for lo, hi in zip(chain, chain[1:])):
                raise ValueError("strict mode needs zeta0 <= alpha0 <= beta0 <= w0 <= tau0 <= 1")

    @classmethod
    def decaying(cls, zeta0=0.01, alpha0=0.1, beta0=0.1, w0=0.5, tau0=1.0, strict=False):
        return cls(zeta0, alpha0, beta0, w0, tau0, 0.9, 0.5, 0.5, 0.15, 0.05, strict)

    @classmethod
    def fixed_tau(cls, zeta0=0.01, alpha0=0.1, beta0=0.1, w0=0.5, tau0=1.0, strict=False):
        return cls(zeta0, alpha0, beta0, w0, tau0, 2 / 3, 0.5, 0.5, 1 / 6, 0.0, strict)

    @property
    def bases(self) -> np.ndarray:
        return np.array([getattr(self, n + "0") for n in NAMES], dtype=float)

    @property
    def exponents(self) -> np.ndarray:
        return np.array([getattr(self, "c_" + n) for n in NAMES], dtype=float)

    def packed(self) -> np.ndarray:
        """Bases followed by exponents, the layout the kernels read."""
        return np.concatenate([self.bases, self.exponents])

    def at(self, k: int) -> tuple[float, float, float, float, float]:
        return schedule_at(self, k)

    def with_values(self, **changes) -> "ScheduleSet":
        return replace(self, **changes)


def power_law(base: float, exponent: float, k: int) -> float:
    if exponent == 0.0:
        return base
    return base / (k + 1.0) ** exponent


def schedule_at(s: ScheduleSet, k: int) -> tuple[float, float, float, float, float]:
    """(zeta_k, alpha_k, beta_k, w_k, tau_k)."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    return tuple(power_law(b, c, k) for b, c in zip(s.bases, s.exponents))
