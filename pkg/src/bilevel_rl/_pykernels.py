"""Pure-Python twin of the compiled actor-critic kernel.

Both implementations run a segment of iterations in place on the state
arrays. They cover problems with a :class:`FeatureReward` and a
:class:`LinearPolicyUpper`, Markovian sampling, and consume exactly eight
pre-drawn uniforms per iteration:

    0-3  trajectory 1: action, next state, restart coin, restart state
    4-7  trajectory 2: same layout

``variant`` 0 runs the two-trajectory penalty method, 1 the partial
gradient method on one trajectory. Passing zeta0 = 0 freezes x.

``stats`` collects [max |D|/bound, max |F|/bound, max |G|/bound, and the
three violation counts] when ``bounds`` has five entries
(L_fx, 2 L_r scale, F constant, L_f_theta, B_G).

Returns the number of completed iterations; fewer than ``n`` means the next
update would have been non-finite and was not applied.
"""

from __future__ import annotations

import math

import numpy as np

PROPOSED, PARTIAL = 0, 1


def categorical(p, u: float) -> int:
    """Inverse-CDF draw by linear scan; rounding falls back to the last positive entry."""
    c = 0.0
    last = 0
    for j in range(len(p)):
        if p[j] > 0.0:
            last = j
            c += p[j]
            if u < c:
                return j
    return last


def softmax_row(row):
    m = max(row)
    e = [math.exp(t - m) for t in row]
    z = sum(e)
    return [v / z for v in e]


def _entropy(p):
    return -sum(v * math.log(v) for v in p if v > 0.0)


def _power(base, expo, k):
    return base if expo == 0.0 else base / (k + 1.0) ** expo


def _trajectory(P, rho, gamma, theta, cursor, u0, u1, u2, u3):
    p = softmax_row(theta[cursor])
    a = categorical(p, u0)
    s_next = categorical(P[cursor, a], u1)
    restart = categorical(rho, u3)
    new_cursor = restart if u2 < 1.0 - gamma else s_next
    return p, a, s_next, new_cursor


def run_segment(P, rho, gamma, base, feats, quad, kappa, center, weights, x_lo, x_hi,
                r_shift, B_V, x, theta, theta_L, v, v_L, cursors, sched, k0, n, uniforms,
                variant, include_baseline, entropy_correction, td_restart, recenter_every,
                d_sum, stats, bounds) -> int:
    nA = theta.shape[1]
    d = x.shape[0]
    scale = 1.0 / (1.0 - gamma) if entropy_correction else 1.0
    track = len(bounds) == 5
    for i in range(n):
        k = k0 + i
        zeta, alpha, beta, w, tau = (_power(sched[j], sched[5 + j], k) for j in range(5))
        u = uniforms[i]
        s = int(cursors[0])
        p, a, s1, c1 = _trajectory(P, rho, gamma, theta, s, u[0], u[1], u[2], u[3])
        t1 = c1 if td_restart else s1
        xx = float(x @ x)
        r = base[s, a] + float(feats[s, a] @ x) - quad * xx - r_shift
        ent = _entropy(p)
        td = r + tau * ent + gamma * v[t1] - v[s]
        td_f = td if include_baseline else td + v[s]
        F0 = [-td_f * p[j] for j in range(nA)]
        F0[a] += td_f
        if entropy_correction:
            for j in range(nA):
                if p[j] > 0.0:
                    F0[j] = (F0[j] + tau * p[j] * (-math.log(p[j]) - ent)) * scale
                else:
                    F0[j] = F0[j] * scale
        grad_f_x = 2.0 * kappa * (x - center)

        if variant == PROPOSED:
            sb = int(cursors[1])
            pL, ab, sb1, c2 = _trajectory(P, rho, gamma, theta_L, sb, u[4], u[5], u[6], u[7])
            t2 = c2 if td_restart else sb1
            rL = base[sb, ab] + float(feats[sb, ab] @ x) - quad * xx - r_shift
            entL = _entropy(pL)
            tdL = rL + tau * entL + gamma * v_L[t2] - v_L[sb]
            tdL_f = tdL if include_baseline else tdL + v_L[sb]
            # full-table penalty term -w * softmax_vjp(pi_L, weights)
            m = theta_L.max(axis=1, keepdims=True)
            PL = np.exp(theta_L - m)
            PL /= PL.sum(axis=1, keepdims=True)
            FL = -w * PL * (weights - (PL * weights).sum(axis=1, keepdims=True))
            rowL = [-tdL_f * pL[j] for j in range(nA)]
            rowL[ab] += tdL_f
            for j in range(nA):
                if entropy_correction:
                    extra = tau * pL[j] * (-math.log(pL[j]) - entL) if pL[j] > 0.0 else 0.0
                    FL[sb, j] += (rowL[j] + extra) * scale
                else:
                    FL[sb, j] += rowL[j]
            Dv = grad_f_x + (feats[s, a] - feats[sb, ab]) * (scale / w)
        else:
            Dv = grad_f_x

        finite = math.isfinite(td) and all(math.isfinite(f) for f in F0) and np.all(np.isfinite(Dv))
        if variant == PROPOSED:
            finite = finite and math.isfinite(tdL) and bool(np.all(np.isfinite(FL)))
        if not finite:
            return i

        if track:
            nD = math.sqrt(float(Dv @ Dv))
            bD = bounds[0] + bounds[1] / w
            nF = math.sqrt(sum(f * f for f in F0))
            bF0 = bounds[2]
            nG = abs(td)
            checks = [(0, nD, bD), (1, nF, bF0), (2, nG, bounds[4])]
            if variant == PROPOSED:
                checks += [(1, math.sqrt(float((FL * FL).sum())), bounds[2] + w * bounds[3]),
                           (2, abs(tdL), bounds[4])]
            else:
                checks = checks[1:]
            for j, norm, bound in checks:
                ratio = norm / bound
                if ratio > stats[j]:
                    stats[j] = ratio
                if norm > bound * (1.0 + 1e-12):
                    stats[3 + j] += 1.0

        for j in range(d):
            x[j] = min(max(x[j] - zeta * Dv[j], x_lo[j]), x_hi[j])
            d_sum[j] += Dv[j]
        for j in range(nA):
            theta[s, j] += alpha * F0[j]
        v[s] = min(max(v[s] + beta * td, 0.0), B_V)
        if variant == PROPOSED:
            theta_L += alpha * FL
            v_L[sb] = min(max(v_L[sb] + beta * tdL, 0.0), B_V)
            cursors[1] = c2
        cursors[0] = c1
        if recenter_every > 0 and (k + 1) % recenter_every == 0:
            theta -= theta.mean(axis=1, keepdims=True)
            theta_L -= theta_L.mean(axis=1, keepdims=True)
    return n
