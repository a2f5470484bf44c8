"""Compiled per-draw pivot computations.

Observations are flat arrays ordered by (lab, level, replicate).  Nonzero
levels enter the variance equations through ``t = y / x`` and the zero level
through ``y`` itself, so every observation carries a factor ``a`` (``1/x``, or
1 at the blank) and a flag ``nz`` for the multiplicative term.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

SOLVED = 0
NO_SOLUTION = 1
MULTIPLE = 2

GRID = (0.5, 1.0, 2.0)
STALL_ITERS = 8
STALL_DROP = 1e-3


@njit(cache=True)
def init_pivots(y, lab, zero, zeps, q, alpha_out):
    """Blank-level pivots; returns sigma_eps_init (NaN when SS_z = 0)."""
    sy = np.zeros(q)
    sz = np.zeros(q)
    cnt = np.zeros(q)
    for o in range(y.size):
        if zero[o]:
            i = lab[o]
            sy[i] += y[o]
            sz[i] += zeps[o]
            cnt[i] += 1.0
    ssy = 0.0
    ssz = 0.0
    for o in range(y.size):
        if zero[o]:
            i = lab[o]
            dy = y[o] - sy[i] / cnt[i]
            dz = zeps[o] - sz[i] / cnt[i]
            ssy += dy * dy
            ssz += dz * dz
    if ssz <= 0.0:
        return np.nan
    s = math.sqrt(ssy / ssz)
    for i in range(q):
        alpha_out[i] = sy[i] / cnt[i] - s * sz[i] / cnt[i]
    return s


@njit(cache=True)
def beta_pivots(y, x, lab, q, alpha_init, s_init, sig_hat, zeta, zeps, out):
    num = np.zeros(q)
    den = np.zeros(q)
    for o in range(y.size):
        i = lab[o]
        num[i] += y[o] - alpha_init[i] - s_init * zeps[o]
        den[i] += x[o] * math.exp(sig_hat * zeta[o])
    ok = True
    for i in range(q):
        if den[i] > 0.0:
            out[i] = num[i] / den[i]
        else:
            out[i] = np.nan
            ok = False
    return ok


@njit(cache=True)
def alpha_pivots(y, x, lab, q, beta, s_init, sig_hat, zeta, zeps, out):
    num = np.zeros(q)
    den = np.zeros(q)
    for o in range(y.size):
        if x[o] > 0.0:
            i = lab[o]
            num[i] += y[o] / x[o] - beta[i] * math.exp(sig_hat * zeta[o]) - s_init * zeps[o] / x[o]
            den[i] += 1.0 / x[o]
    ok = True
    for i in range(q):
        if den[i] > 0.0:
            out[i] = num[i] / den[i]
        else:
            out[i] = np.nan
            ok = False
    return ok


@njit(cache=True)
def workspace(q, r, n):
    """Scratch space for :func:`_system`, reused across evaluations."""
    return np.empty(3 * q + 3 * r + 3 * n)


@njit(cache=True)
def _system(se, sp, alpha, beta, lab, level, a, nz, w1, w2, q, r, zeta, zeps, lhs1, lhs2, want, out, work):
    """E1, E2 at (sigma_eta=se, sigma_eps=sp) and optionally their gradients.

    ``out`` receives [E1, E2, dE1/dse, dE1/dsp, dE2/dse, dE2/dsp].
    """
    n = lab.size
    m1 = work[0:q]
    m1e = work[q:2 * q]
    m1p = work[2 * q:3 * q]
    k = 3 * q
    m2 = work[k:k + r]
    m2e = work[k + r:k + 2 * r]
    m2p = work[k + 2 * r:k + 3 * r]
    k += 3 * r
    v = work[k:k + n]
    ve = work[k + n:k + 2 * n]
    vp = work[k + 2 * n:k + 3 * n]
    work[:k] = 0.0
    for o in range(n):
        i = lab[o]
        j = level[o]
        if nz[o]:
            ex = math.exp(se * zeta[o])
            v[o] = alpha[i] * a[o] + beta[i] * ex + sp * zeps[o] * a[o]
            ve[o] = beta[i] * zeta[o] * ex
        else:
            v[o] = alpha[i] + sp * zeps[o]
            ve[o] = 0.0
        vp[o] = zeps[o] * a[o]
        m1[i] += w1[o] * v[o]
        m2[j] += w2[o] * v[o]
        if want:
            m1e[i] += w1[o] * ve[o]
            m1p[i] += w1[o] * vp[o]
            m2e[j] += w2[o] * ve[o]
            m2p[j] += w2[o] * vp[o]
    r1 = 0.0
    r2 = 0.0
    g1e = 0.0
    g1p = 0.0
    g2e = 0.0
    g2p = 0.0
    for o in range(n):
        i = lab[o]
        j = level[o]
        d2 = v[o] - m2[j]
        r2 += d2 * d2
        if want:
            g2e += 2.0 * d2 * (ve[o] - m2e[j])
            g2p += 2.0 * d2 * (vp[o] - m2p[j])
        if nz[o]:
            d1 = v[o] - m1[i]
            r1 += d1 * d1
            if want:
                g1e += 2.0 * d1 * (ve[o] - m1e[i])
                g1p += 2.0 * d1 * (vp[o] - m1p[i])
    out[0] = r1 - lhs1
    out[1] = r2 - lhs2
    out[2] = g1e
    out[3] = g1p
    out[4] = g2e
    out[5] = g2p


@njit(cache=True)
def _newton(u0, w0, alpha, beta, lab, level, a, nz, w1, w2, q, r, zeta, zeps, lhs1, lhs2, s1, s2, tol, maxit, res, work):
    """Damped Newton on the scaled system in (log sigma_eta, log sigma_eps).

    Returns (converged, u, w).  When the Jacobian is singular the step falls
    back to steepest descent on the squared residual norm.  A start that
    creeps along for STALL_ITERS steps without shrinking the residual norm
    by a relative STALL_DROP is abandoned; near a root the steps are
    quadratic and never trip this.
    """
    out = np.empty(6)
    stalled = 0
    u = u0
    w = w0
    se = math.exp(u)
    sp = math.exp(w)
    _system(se, sp, alpha, beta, lab, level, a, nz, w1, w2, q, r, zeta, zeps, lhs1, lhs2, 1, out, work)
    f1 = out[0] / s1
    f2 = out[1] / s2
    for it in range(maxit):
        if max(abs(f1), abs(f2)) < tol:
            res[0] = f1
            res[1] = f2
            return True, u, w
        j11 = out[2] * se / s1
        j12 = out[3] * sp / s1
        j21 = out[4] * se / s2
        j22 = out[5] * sp / s2
        det = j11 * j22 - j12 * j21
        scale = abs(j11 * j22) + abs(j12 * j21)
        if det != 0.0 and abs(det) > 1e-14 * scale:
            du = -(j22 * f1 - j12 * f2) / det
            dw = -(-j21 * f1 + j11 * f2) / det
        else:
            gu = j11 * f1 + j21 * f2
            gw = j12 * f1 + j22 * f2
            gg = gu * gu + gw * gw
            if gg == 0.0:
                return False, u, w
            jg1 = j11 * gu + j12 * gw
            jg2 = j21 * gu + j22 * gw
            step = gg / max(jg1 * jg1 + jg2 * jg2, 1e-300)
            du = -step * gu
            dw = -step * gw
        big = max(abs(du), abs(dw))
        if big > 2.0:
            du *= 2.0 / big
            dw *= 2.0 / big
        norm0 = f1 * f1 + f2 * f2
        lam = 1.0
        accepted = False
        for _ in range(30):
            un = u + lam * du
            wn = w + lam * dw
            sen = math.exp(un)
            spn = math.exp(wn)
            _system(sen, spn, alpha, beta, lab, level, a, nz, w1, w2, q, r, zeta, zeps, lhs1, lhs2, 1, out, work)
            g1 = out[0] / s1
            g2 = out[1] / s2
            if g1 * g1 + g2 * g2 < (1.0 - 1e-4 * lam) * norm0:
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            res[0] = f1
            res[1] = f2
            return False, u, w
        if g1 * g1 + g2 * g2 > (1.0 - STALL_DROP) * norm0:
            stalled += 1
            if stalled >= STALL_ITERS:
                res[0] = g1
                res[1] = g2
                return False, un, wn
        else:
            stalled = 0
        u = un
        w = wn
        se = sen
        sp = spn
        f1 = g1
        f2 = g2
        if u < -40.0 or w < -60.0 or u > 5.0:
            return False, u, w
    res[0] = f1
    res[1] = f2
    return max(abs(f1), abs(f2)) < tol, u, w


@njit(cache=True)
def _rss(se, sp, alpha, beta, y, x, lab, zeta, zeps):
    tot = 0.0
    for o in range(y.size):
        i = lab[o]
        d = y[o] - (alpha[i] + beta[i] * x[o] * math.exp(se * zeta[o]) + sp * zeps[o])
        tot += d * d
    return tot


@njit(cache=True)
def solve_variance(
    alpha, beta, y, x, lab, level, a, nz, w1, w2, q, r, zeta, zeps,
    lhs1, lhs2, s1, s2, base_eta, base_eps, tol, maxit, distinct, res, work,
):
    """Multi-start solve; returns (sigma_eta, sigma_eps, status)."""
    out = np.empty(6)
    # exact boundary root, e.g. noise-free data
    _system(0.0, 0.0, alpha, beta, lab, level, a, nz, w1, w2, q, r, zeta, zeps, lhs1, lhs2, 0, out, work)
    if abs(out[0] / s1) < tol and abs(out[1] / s2) < tol:
        res[0] = out[0] / s1
        res[1] = out[1] / s2
        return 0.0, 0.0, SOLVED
    roots_e = np.empty(9)
    roots_p = np.empty(9)
    nroot = 0
    rr = np.empty(2)
    for ge in range(3):
        for gp in range(3):
            ok, u, w = _newton(
                math.log(GRID[ge] * base_eta), math.log(GRID[gp] * base_eps),
                alpha, beta, lab, level, a, nz, w1, w2, q, r, zeta, zeps, lhs1, lhs2, s1, s2, tol, maxit, rr, work,
            )
            if not ok:
                continue
            se = math.exp(u)
            sp = math.exp(w)
            new = True
            for k in range(nroot):
                if abs(roots_e[k] - se) <= distinct and abs(roots_p[k] - sp) <= distinct:
                    new = False
                    break
            if new:
                roots_e[nroot] = se
                roots_p[nroot] = sp
                nroot += 1
    if nroot == 0:
        res[0] = np.nan
        res[1] = np.nan
        return np.nan, np.nan, NO_SOLUTION
    best = 0
    status = SOLVED
    if nroot > 1:
        status = MULTIPLE
        best_rss = np.inf
        for k in range(nroot):
            v = _rss(roots_e[k], roots_p[k], alpha, beta, y, x, lab, zeta, zeps)
            if v < best_rss:
                best_rss = v
                best = k
    _system(roots_e[best], roots_p[best], alpha, beta, lab, level, a, nz, w1, w2, q, r, zeta, zeps, lhs1, lhs2, 0, out, work)
    res[0] = out[0] / s1
    res[1] = out[1] / s2
    return roots_e[best], roots_p[best], status


@njit(cache=True)
def draw_batch(
    y, x, lab, level, zero, a, nz, w1, w2, q, r, lhs1, lhs2, s1, s2,
    sig_hat, eta_floor, eps_floor, zeta, zeps, tol, maxit, distinct,
    alpha_out, beta_out, seta_out, seps_out, status_out, resid_out,
):
    """Algorithm steps 3 to 5 for each row of ``zeta``/``zeps``."""
    m = zeta.shape[0]
    a_init = np.empty(q)
    rr = np.empty(2)
    work = workspace(q, r, y.size)
    for d in range(m):
        ze = zeta[d]
        zp = zeps[d]
        s_init = init_pivots(y, lab, zero, zp, q, a_init)
        if not (s_init >= 0.0):
            status_out[d] = NO_SOLUTION
            seta_out[d] = np.nan
            seps_out[d] = np.nan
            continue
        b = beta_out[d]
        al = alpha_out[d]
        if not beta_pivots(y, x, lab, q, a_init, s_init, sig_hat, ze, zp, b):
            status_out[d] = NO_SOLUTION
            seta_out[d] = np.nan
            seps_out[d] = np.nan
            continue
        alpha_pivots(y, x, lab, q, b, s_init, sig_hat, ze, zp, al)
        base_eta = max(sig_hat, eta_floor)
        base_eps = max(s_init, eps_floor)
        se, sp, st = solve_variance(
            al, b, y, x, lab, level, a, nz, w1, w2, q, r, ze, zp,
            lhs1, lhs2, s1, s2, base_eta, base_eps, tol, maxit, distinct, rr, work,
        )
        seta_out[d] = se
        seps_out[d] = sp
        status_out[d] = st
        resid_out[d, 0] = rr[0]
        resid_out[d, 1] = rr[1]
