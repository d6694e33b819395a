# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled actor-critic kernel; see ``_pykernels`` for the contract."""

from libc.math cimport exp, log, sqrt, fabs, pow, isfinite

import numpy as np
cimport numpy as cnp

cnp.import_array()

DEF MAX_A = 64


cdef inline Py_ssize_t categorical(const double[:] p, double u) nogil:
    cdef double c = 0.0
    cdef Py_ssize_t j, last = 0
    for j in range(p.shape[0]):
        if p[j] > 0.0:
            last = j
            c += p[j]
            if u < c:
                return j
    return last


cdef inline Py_ssize_t categorical_ptr(double* p, Py_ssize_t n, double u) nogil:
    cdef double c = 0.0
    cdef Py_ssize_t j, last = 0
    for j in range(n):
        if p[j] > 0.0:
            last = j
            c += p[j]
            if u < c:
                return j
    return last


cdef inline double softmax_row(double[:, :] theta, Py_ssize_t s, double* out) nogil:
    """Fills ``out`` with the policy row; returns its entropy."""
    cdef Py_ssize_t j, nA = theta.shape[1]
    cdef double m = theta[s, 0], z = 0.0, ent = 0.0
    for j in range(1, nA):
        if theta[s, j] > m:
            m = theta[s, j]
    for j in range(nA):
        out[j] = exp(theta[s, j] - m)
        z += out[j]
    for j in range(nA):
        out[j] = out[j] / z
    for j in range(nA):
        if out[j] > 0.0:
            ent -= out[j] * log(out[j])
    return ent


cdef inline double power_law(double base, double expo, long k) nogil:
    if expo == 0.0:
        return base
    return base / pow(k + 1.0, expo)


def run_segment(const double[:, :, :] P, const double[:] rho, double gamma,
                const double[:, :] base, const double[:, :, :] feats, double quad,
                double kappa, const double[:] center, const double[:, :] weights,
                const double[:] x_lo, const double[:] x_hi, double r_shift, double B_V,
                double[:] x, double[:, :] theta, double[:, :] theta_L,
                double[:] v, double[:] v_L, long long[:] cursors, const double[:] sched,
                long k0, long n, const double[:, :] uniforms, int variant,
                bint include_baseline, bint entropy_correction, bint td_restart,
                long recenter_every, double[:] d_sum, double[:] stats, const double[:] bounds):
    cdef Py_ssize_t nS = theta.shape[0], nA = theta.shape[1], d = x.shape[0]
    cdef Py_ssize_t i, j, q, s, a, s1, c1, t1, sb = 0, ab = 0, sb1, c2 = 0, t2
    cdef long k, done = n
    cdef double zeta, alpha, beta, w, tau, scale, xx, r, ent, td, td_f
    cdef double rL, entL = 0.0, tdL = 0.0, tdL_f, dotw, norm, bound, ratio, mean
    cdef double p[MAX_A]
    cdef double pL[MAX_A]
    cdef double F0[MAX_A]
    cdef double prow[MAX_A]
    cdef bint finite, track = bounds.shape[0] == 5
    if nA > MAX_A:
        raise ValueError("kernel supports at most 64 actions")
    cdef double[:, :] FL = np.zeros((nS, nA))
    cdef double[:] Dv = np.zeros(d)
    cdef double[:] gfx = np.zeros(d)
    scale = 1.0 / (1.0 - gamma) if entropy_correction else 1.0

    with nogil:
        for i in range(n):
            k = k0 + i
            zeta = power_law(sched[0], sched[5], k)
            alpha = power_law(sched[1], sched[6], k)
            beta = power_law(sched[2], sched[7], k)
            w = power_law(sched[3], sched[8], k)
            tau = power_law(sched[4], sched[9], k)

            s = cursors[0]
            ent = softmax_row(theta, s, p)
            a = categorical_ptr(p, nA, uniforms[i, 0])
            s1 = categorical(P[s, a], uniforms[i, 1])
            c1 = categorical(rho, uniforms[i, 3])
            if not (uniforms[i, 2] < 1.0 - gamma):
                c1 = s1
            t1 = c1 if td_restart else s1
            xx = 0.0
            r = 0.0
            for j in range(d):
                xx += x[j] * x[j]
            for j in range(d):
                r += feats[s, a, j] * x[j]
            r = base[s, a] + r - quad * xx - r_shift
            td = r + tau * ent + gamma * v[t1] - v[s]
            td_f = td if include_baseline else td + v[s]
            for j in range(nA):
                F0[j] = -td_f * p[j]
            F0[a] += td_f
            if entropy_correction:
                for j in range(nA):
                    if p[j] > 0.0:
                        F0[j] = (F0[j] + tau * p[j] * (-log(p[j]) - ent)) * scale
                    else:
                        F0[j] = F0[j] * scale
            for j in range(d):
                gfx[j] = 2.0 * kappa * (x[j] - center[j])

            finite = isfinite(td)
            if variant == 0:
                sb = cursors[1]
                entL = softmax_row(theta_L, sb, pL)
                ab = categorical_ptr(pL, nA, uniforms[i, 4])
                sb1 = categorical(P[sb, ab], uniforms[i, 5])
                c2 = categorical(rho, uniforms[i, 7])
                if not (uniforms[i, 6] < 1.0 - gamma):
                    c2 = sb1
                t2 = c2 if td_restart else sb1
                rL = 0.0
                for j in range(d):
                    rL += feats[sb, ab, j] * x[j]
                rL = base[sb, ab] + rL - quad * xx - r_shift
                tdL = rL + tau * entL + gamma * v_L[t2] - v_L[sb]
                tdL_f = tdL if include_baseline else tdL + v_L[sb]
                for q in range(nS):
                    softmax_row(theta_L, q, prow)
                    dotw = 0.0
                    for j in range(nA):
                        dotw += prow[j] * weights[q, j]
                    for j in range(nA):
                        FL[q, j] = -w * (prow[j] * (weights[q, j] - dotw))
                for j in range(nA):
                    if entropy_correction:
                        if pL[j] > 0.0:
                            FL[sb, j] += (-tdL_f * pL[j] + (tdL_f if j == ab else 0.0)
                                          + tau * pL[j] * (-log(pL[j]) - entL)) * scale
                        else:
                            FL[sb, j] += (-tdL_f * pL[j] + (tdL_f if j == ab else 0.0)) * scale
                    else:
                        FL[sb, j] += -tdL_f * pL[j] + (tdL_f if j == ab else 0.0)
                for j in range(d):
                    Dv[j] = gfx[j] + (feats[s, a, j] - feats[sb, ab, j]) * (scale / w)
                finite = finite and isfinite(tdL)
                for q in range(nS):
                    for j in range(nA):
                        if not isfinite(FL[q, j]):
                            finite = False
            else:
                for j in range(d):
                    Dv[j] = gfx[j]
            for j in range(nA):
                if not isfinite(F0[j]):
                    finite = False
            for j in range(d):
                if not isfinite(Dv[j]):
                    finite = False
            if not finite:
                done = i
                break

            if track:
                norm = 0.0
                for j in range(d):
                    norm += Dv[j] * Dv[j]
                norm = sqrt(norm)
                bound = bounds[0] + bounds[1] / w
                if variant == 0:
                    ratio = norm / bound
                    if ratio > stats[0]:
                        stats[0] = ratio
                    if norm > bound * (1.0 + 1e-12):
                        stats[3] += 1.0
                norm = 0.0
                for j in range(nA):
                    norm += F0[j] * F0[j]
                norm = sqrt(norm)
                ratio = norm / bounds[2]
                if ratio > stats[1]:
                    stats[1] = ratio
                if norm > bounds[2] * (1.0 + 1e-12):
                    stats[4] += 1.0
                ratio = fabs(td) / bounds[4]
                if ratio > stats[2]:
                    stats[2] = ratio
                if fabs(td) > bounds[4] * (1.0 + 1e-12):
                    stats[5] += 1.0
                if variant == 0:
                    norm = 0.0
                    for q in range(nS):
                        for j in range(nA):
                            norm += FL[q, j] * FL[q, j]
                    norm = sqrt(norm)
                    bound = bounds[2] + w * bounds[3]
                    ratio = norm / bound
                    if ratio > stats[1]:
                        stats[1] = ratio
                    if norm > bound * (1.0 + 1e-12):
                        stats[4] += 1.0
                    ratio = fabs(tdL) / bounds[4]
                    if ratio > stats[2]:
                        stats[2] = ratio
                    if fabs(tdL) > bounds[4] * (1.0 + 1e-12):
                        stats[5] += 1.0

            for j in range(d):
                x[j] = min(max(x[j] - zeta * Dv[j], x_lo[j]), x_hi[j])
                d_sum[j] += Dv[j]
            for j in range(nA):
                theta[s, j] += alpha * F0[j]
            v[s] = min(max(v[s] + beta * td, 0.0), B_V)
            if variant == 0:
                for q in range(nS):
                    for j in range(nA):
                        theta_L[q, j] += alpha * FL[q, j]
                v_L[sb] = min(max(v_L[sb] + beta * tdL, 0.0), B_V)
                cursors[1] = c2
            cursors[0] = c1
            if recenter_every > 0 and (k + 1) % recenter_every == 0:
                for q in range(nS):
                    mean = 0.0
                    for j in range(nA):
                        mean += theta[q, j]
                    mean /= nA
                    for j in range(nA):
                        theta[q, j] -= mean
                    mean = 0.0
                    for j in range(nA):
                        mean += theta_L[q, j]
                    mean /= nA
                    for j in range(nA):
                        theta_L[q, j] -= mean
    return done
