"""Concrete bi-level problems."""

from .gridworld import GridWorldSpec
from .preference import PreferenceProblemSpec

__all__ = ["GridWorldSpec", "PreferenceProblemSpec"]
