"""Compiled inner loops for the integrated likelihood.

The per-observation marginal density integrates the multiplicative error out
with adaptive Gauss-Hermite quadrature: nodes are centred on the mode of the
integrand in ``u`` and scaled by its curvature there.  Gradient and Hessian
are quadrature estimates of the exact derivatives of the integral
(posterior-weighted score identities), so they do not depend on where the
nodes sit.

Parameter vector layout: ``[alpha_0..alpha_{q-1}, beta_0..beta_{q-1},
sigma_eta, log sigma_eps]``.  The likelihood is even in ``sigma_eta``.
"""

import math
from functools import lru_cache

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
SQRT2 = math.sqrt(2.0)


@lru_cache(maxsize=16)
def _gh_rule(order):
    t, w = np.polynomial.hermite.hermgauss(order)
    t, logw = t, np.log(w)
    t.flags.writeable = False
    logw.flags.writeable = False
    return t, logw


def gh_rule(order):
    """Gauss-Hermite nodes and log weights (cached, read-only)."""
    return _gh_rule(int(order))


@njit(cache=True)
def _h(u, y, a, bx, sp, s2):
    r = y - a - bx * math.exp(sp * u)
    return -r * r / (2.0 * s2) - 0.5 * u * u


@njit(cache=True)
def _mode(y, a, bx, sp, s2):
    """Mode and curvature scale of u -> log phi(y; a + bx e^{sp u}, s2) + log phi(u)."""
    if bx == 0.0 or sp == 0.0:
        return 0.0, 1.0
    u = 0.0
    hu = _h(u, y, a, bx, sp, s2)
    for _ in range(100):
        m = bx * math.exp(sp * u)
        r = y - a - m
        grad = r * m * sp / s2 - u
        curv = (r * m - m * m) * sp * sp / s2 - 1.0
        gn = -(m * m * sp * sp) / s2 - 1.0
        if curv >= gn * 1e-3:
            curv = gn
        step = -grad / curv
        if step > 3.0:
            step = 3.0
        elif step < -3.0:
            step = -3.0
        accepted = False
        for _ls in range(60):
            un = u + step
            hn = _h(un, y, a, bx, sp, s2)
            if hn >= hu - 1e-14 * abs(hu):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        u, hu = un, hn
        if abs(step) < 1e-12 * (1.0 + abs(u)):
            break
    m = bx * math.exp(sp * u)
    r = y - a - m
    curv = (r * m - m * m) * sp * sp / s2 - 1.0
    if curv >= -1e-12:
        curv = -(m * m * sp * sp) / s2 - 1.0
    return u, 1.0 / math.sqrt(-curv)


@njit(cache=True)
def obs_terms(y, a, b, x, sp, tau, t, logw, want, g4, h4, lv):
    """Log marginal density of one observation and, optionally, derivatives.

    ``want``: 0 value only, 1 adds the gradient, 2 adds the Hessian.  The
    local parameter order is ``(alpha, beta, sigma_eta, tau)``.
    """
    s2 = math.exp(2.0 * tau)
    for k in range(4):
        g4[k] = 0.0
        for l in range(4):
            h4[k, l] = 0.0
    if x == 0.0:
        r = y - a
        ll = -0.5 * LOG_2PI - tau - r * r / (2.0 * s2)
        if want >= 1:
            g4[0] = r / s2
            g4[3] = -1.0 + r * r / s2
        if want >= 2:
            h4[0, 0] = -1.0 / s2
            h4[0, 3] = -2.0 * r / s2
            h4[3, 0] = h4[0, 3]
            h4[3, 3] = -2.0 * r * r / s2
        return ll

    u0, sc = _mode(y, a, b * x, sp, s2)
    n = t.size
    lscale = math.log(SQRT2 * sc)
    lmax = -np.inf
    for m in range(n):
        u = u0 + SQRT2 * sc * t[m]
        mm = x * math.exp(sp * u)
        r = y - a - b * mm
        lv[m] = logw[m] + t[m] * t[m] + lscale - 0.5 * u * u - 0.5 * LOG_2PI
        lv[m] += -0.5 * LOG_2PI - tau - r * r / (2.0 * s2)
        if lv[m] > lmax:
            lmax = lv[m]
    acc = 0.0
    for m in range(n):
        acc += math.exp(lv[m] - lmax)
    ll = lmax + math.log(acc)
    if want == 0:
        return ll

    d = np.empty(4)
    for m in range(n):
        p = math.exp(lv[m] - ll)
        if p == 0.0:
            continue
        u = u0 + SQRT2 * sc * t[m]
        mm = x * math.exp(sp * u)
        r = y - a - b * mm
        d[0] = r / s2
        d[1] = r * mm / s2
        d[2] = r * b * mm * u / s2
        d[3] = -1.0 + r * r / s2
        for k in range(4):
            g4[k] += p * d[k]
        if want >= 2:
            bm = b * mm
            h4[0, 0] += p * (-1.0 / s2)
            h4[0, 1] += p * (-mm / s2)
            h4[0, 2] += p * (-bm * u / s2)
            h4[0, 3] += p * (-2.0 * r / s2)
            h4[1, 1] += p * (-mm * mm / s2)
            h4[1, 2] += p * (mm * u * (r - bm) / s2)
            h4[1, 3] += p * (-2.0 * r * mm / s2)
            h4[2, 2] += p * (bm * u * u * (r - bm) / s2)
            h4[2, 3] += p * (-2.0 * r * bm * u / s2)
            h4[3, 3] += p * (-2.0 * r * r / s2)
            for k in range(4):
                for l in range(k, 4):
                    h4[k, l] += p * d[k] * d[l]
    if want >= 2:
        for k in range(4):
            for l in range(k, 4):
                h4[k, l] -= g4[k] * g4[l]
                h4[l, k] = h4[k, l]
    return ll


@njit(cache=True)
def dataset_terms(theta, y, x, lab, q, t, logw, want, grad, hess):
    """Sum of ``obs_terms`` over a dataset, scattered into global arrays."""
    n_par = 2 * q + 2
    for k in range(n_par):
        grad[k] = 0.0
        for l in range(n_par):
            hess[k, l] = 0.0
    sp = theta[2 * q]
    tau = theta[2 * q + 1]
    g4 = np.empty(4)
    h4 = np.empty((4, 4))
    lv = np.empty(t.size)
    idx = np.empty(4, dtype=np.int64)
    total = 0.0
    for o in range(y.size):
        i = lab[o]
        ll = obs_terms(y[o], theta[i], theta[q + i], x[o], sp, tau, t, logw, want, g4, h4, lv)
        total += ll
        if want >= 1:
            idx[0] = i
            idx[1] = q + i
            idx[2] = 2 * q
            idx[3] = 2 * q + 1
            for k in range(4):
                grad[idx[k]] += g4[k]
            if want >= 2:
                for k in range(4):
                    for l in range(4):
                        hess[idx[k], idx[l]] += h4[k, l]
    return total


@njit(cache=True)
def _ascent_direction(grad, hess, fixed):
    """Saddle-free Newton direction: solve |H| d = g on the free coordinates."""
    n = grad.size
    a = -hess.copy()
    g = grad.copy()
    for k in range(n):
        if fixed[k]:
            g[k] = 0.0
            for l in range(n):
                a[k, l] = 0.0
                a[l, k] = 0.0
            a[k, k] = 1.0
    w, v = np.linalg.eigh(a)
    wmax = 0.0
    for k in range(n):
        if abs(w[k]) > wmax:
            wmax = abs(w[k])
    floor = max(wmax * 1e-12, 1e-300)
    c = v.T @ g
    for k in range(n):
        c[k] /= max(abs(w[k]), floor)
    d = v @ c
    return d, g


@njit(cache=True)
def newton_fit(theta0, y, x, lab, q, t, logw, tau_min, maxit, tol):
    """Maximize the integrated log-likelihood by damped saddle-free Newton.

    Returns ``(theta, loglik, converged, n_iter)``.
    """
    n_par = 2 * q + 2
    theta = theta0.copy()
    if theta[n_par - 1] < tau_min:
        theta[n_par - 1] = tau_min
    grad = np.empty(n_par)
    hess = np.empty((n_par, n_par))
    gtmp = np.empty(n_par)
    htmp = np.empty((n_par, n_par))
    fixed = np.zeros(n_par, dtype=np.bool_)
    f = dataset_terms(theta, y, x, lab, q, t, logw, 2, grad, hess)
    if not np.isfinite(f):
        return theta, f, False, 0
    for it in range(maxit):
        fixed[n_par - 1] = theta[n_par - 1] <= tau_min + 1e-12 and grad[n_par - 1] < 0.0
        d, g = _ascent_direction(grad, hess, fixed)
        dec = 0.0
        for k in range(n_par):
            dec += g[k] * d[k]
        if dec < tol:
            return theta, f, True, it
        # keep the variance parameters from jumping across orders of magnitude
        big = max(abs(d[n_par - 1]), abs(d[n_par - 2]))
        step = 1.0
        if big > 1.0:
            step = 1.0 / big
        accepted = False
        for _ls in range(60):
            cand = theta + step * d
            if cand[n_par - 1] < tau_min:
                cand[n_par - 1] = tau_min
            fc = dataset_terms(cand, y, x, lab, q, t, logw, 0, gtmp, htmp)
            if np.isfinite(fc) and fc >= f + 1e-4 * step * dec:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # no ascent possible along d: stationary to working precision
            return theta, f, dec < 1e3 * tol, it
        theta = cand
        f = dataset_terms(theta, y, x, lab, q, t, logw, 2, grad, hess)
    return theta, f, False, maxit


@njit(cache=True)
def conc_terms(X, ys, labs, alpha, beta, sp, tau, t, logw, want, out):
    """Log-likelihood of new measurements as a function of the concentration.

    ``out`` receives ``(d/dX, d2/dX2)`` when ``want`` is 1 or 2.
    """
    s2 = math.exp(2.0 * tau)
    n = t.size
    lv = np.empty(n)
    total = 0.0
    g_tot = 0.0
    h_tot = 0.0
    for o in range(ys.size):
        a = alpha[labs[o]]
        b = beta[labs[o]]
        y = ys[o]
        u0, sc = _mode(y, a, b * X, sp, s2)
        lscale = math.log(SQRT2 * sc)
        lmax = -np.inf
        for m in range(n):
            u = u0 + SQRT2 * sc * t[m]
            r = y - a - b * X * math.exp(sp * u)
            lv[m] = logw[m] + t[m] * t[m] + lscale - 0.5 * u * u - LOG_2PI - tau - r * r / (2.0 * s2)
            if lv[m] > lmax:
                lmax = lv[m]
        acc = 0.0
        for m in range(n):
            acc += math.exp(lv[m] - lmax)
        ll = lmax + math.log(acc)
        total += ll
        if want >= 1:
            g = 0.0
            h = 0.0
            for m in range(n):
                p = math.exp(lv[m] - ll)
                u = u0 + SQRT2 * sc * t[m]
                dmu = b * math.exp(sp * u)
                r = y - a - dmu * X
                s = r * dmu / s2
                g += p * s
                h += p * (-dmu * dmu / s2 + s * s)
            g_tot += g
            h_tot += h - g * g
    out[0] = g_tot
    out[1] = h_tot
    return total


@njit(cache=True)
def invert_concentration(ys, labs, alpha, beta, sp, tau, t, logw, x0, maxit):
    """Maximize the new-measurement likelihood over X >= 0 (safeguarded Newton).

    Returns ``(x_hat, loglik, converged)``.
    """
    out = np.empty(2)
    X = max(x0, 0.0)
    f = conc_terms(X, ys, labs, alpha, beta, sp, tau, t, logw, 2, out)
    for _ in range(maxit):
        g, h = out[0], out[1]
        if X <= 0.0 and g <= 0.0:
            return 0.0, f, True
        step = g / max(abs(h), 1e-12 * (1.0 + abs(g)))
        if step > 0.5 * (1.0 + X) * 10.0:
            step = 5.0 * (1.0 + X)
        accepted = False
        for _ls in range(60):
            cand = max(X + step, 0.0)
            fc = conc_terms(cand, ys, labs, alpha, beta, sp, tau, t, logw, 0, out)
            if fc >= f - 1e-13 * abs(f):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            conc_terms(X, ys, labs, alpha, beta, sp, tau, t, logw, 2, out)
            return X, f, abs(out[0]) < 1e-6 * (1.0 + abs(f))
        moved = abs(cand - X)
        X = cand
        f = conc_terms(X, ys, labs, alpha, beta, sp, tau, t, logw, 2, out)
        if moved < 1e-11 * (1.0 + X):
            return X, f, True
    return X, f, False
