"""Tabular softmax policies: parameterization, score function, entropy."""

from __future__ import annotations

import numpy as np
from scipy.special import xlogy


def softmax(theta: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a |S| x |A| logit table."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 2:
        raise ValueError(f"theta must be a |S| x |A| table, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta contains non-finite logits")
    z = np.exp(theta - theta.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def log_policy_grad(theta: np.ndarray, s: int, a: int, pi: np.ndarray | None = None) -> np.ndarray:
    """Gradient of log pi_theta(a|s) with respect to every logit.

    Only row ``s`` is nonzero: ``1[a == a'] - pi(a'|s)``.
    """
    if pi is None:
        pi = softmax(theta)
    n_states, n_actions = pi.shape
    if not (0 <= s < n_states and 0 <= a < n_actions):
        raise IndexError(f"(s, a) = ({s}, {a}) out of range for table {pi.shape}")
    grad = np.zeros_like(pi)
    grad[s] = -pi[s]
    grad[s, a] += 1.0
    return grad


def entropy(pi: np.ndarray, s: int) -> float:
    return float(-xlogy(pi[s], pi[s]).sum())


def entropies(pi: np.ndarray) -> np.ndarray:
    """Per-state entropies E(pi, s) as a vector."""
    return -xlogy(pi, pi).sum(axis=1)


def entropy_grad(pi: np.ndarray, s: int) -> np.ndarray:
    """Gradient of E(pi_theta, s) with respect to row ``s`` of theta."""
    row = pi[s]
    logp = np.log(row, out=np.zeros_like(row), where=row > 0)
    ent = -float(np.dot(row, logp))
    return row * (-logp - ent)


def weighted_entropy(mdp, pi: np.ndarray) -> float:
    """E_{s ~ d_rho^pi}[E(pi, s)]."""
    from .mdp import discounted_visitation

    d = discounted_visitation(mdp, pi)
    return float(d @ entropies(pi))


def softmax_vjp(pi: np.ndarray, grad_pi: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. policy entries back to the logits."""
    return pi * (grad_pi - (pi * grad_pi).sum(axis=1, keepdims=True))


def recenter(theta: np.ndarray) -> np.ndarray:
    # Policy is unchanged by per-row shifts.
    return theta - theta.mean(axis=1, keepdims=True)


def uniform_policy(n_states: int, n_actions: int) -> np.ndarray:
    return np.full((n_states, n_actions), 1.0 / n_actions)
