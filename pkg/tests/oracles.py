"""Independent reference computations used by the unit and acceptance tests.

Nothing here calls the compiled kernels; each routine is a direct, slow
transcription of the defining formula.
"""

import math

import numpy as np
from scipy import stats


def loglik_stratified_mc(data, params, n_strata=100_000, seed=0):
    """Integrated log-likelihood by importance-sampled, stratified Monte Carlo.

    For each observation the proposal is a Student t (4 df) centred at the
    peak of the integrand (located on a fine grid) with a curvature-matched
    scale; its polynomial tails keep the weights bounded.  Draws are
    stratified: one uniform per stratum of (0, 1), mapped through the t
    quantile function.
    """
    rng = np.random.default_rng(seed)
    v = stats.t.ppf((np.arange(n_strata) + rng.random(n_strata)) / n_strata, df=4)
    grid = np.linspace(-12, 12, 24001)
    total = 0.0
    for lab_idx, x, y in zip(data.lab, data.x, data.y):
        a, b = params.alpha[lab_idx], params.beta[lab_idx]
        if x == 0.0 or params.sigma_eta == 0.0:
            total += stats.norm.logpdf(y, a + b * x, params.sigma_eps)
            continue

        def logf(u):
            return stats.norm.logpdf(y, a + b * x * np.exp(params.sigma_eta * u), params.sigma_eps) + stats.norm.logpdf(u)

        m = grid[np.argmax(logf(grid))]
        h = 1e-3
        curv = -(logf(m + h) - 2 * logf(m) + logf(m - h)) / h**2
        s = 1.0 / math.sqrt(curv) if curv > 0 else 1.0
        u = m + s * v
        lw = logf(u) - (stats.t.logpdf(v, df=4) - math.log(s))
        top = lw.max()
        total += top + math.log(np.mean(np.exp(lw - top)))
    return total


def init_pivots_by_hand(cells_y, cells_z):
    """cells_* map lab -> list of zero-level values."""
    ssy = ssz = 0.0
    for lab in cells_y:
        ys, zs = cells_y[lab], cells_z[lab]
        my, mz = sum(ys) / len(ys), sum(zs) / len(zs)
        ssy += sum((v - my) ** 2 for v in ys)
        ssz += sum((v - mz) ** 2 for v in zs)
    s = math.sqrt(ssy / ssz)
    alpha = {lab: sum(cells_y[lab]) / len(cells_y[lab]) - s * sum(cells_z[lab]) / len(cells_z[lab]) for lab in cells_y}
    return s, alpha


def beta_pivot_by_hand(rows, alpha_init, s_init, sig_hat):
    """rows: (x, y, z_eta, z_eps) for one lab over every level."""
    num = sum(y for _, y, _, _ in rows) - len(rows) * alpha_init - s_init * sum(ze for *_, ze in rows)
    den = sum(x * math.exp(sig_hat * zh) for x, _, zh, _ in rows)
    return num / den


def alpha_pivot_by_hand(rows, beta, s_init, sig_hat):
    rows = [r for r in rows if r[0] > 0]
    num = sum(y / x - beta * math.exp(sig_hat * zh) - s_init * ze / x for x, y, zh, ze in rows)
    den = sum(1.0 / x for x, *_ in rows)
    return num / den


def conc_pivot_by_hand(ys, alphas, betas, s_eta, s_eps, z_eta, z_eps):
    num = sum(ys) - sum(alphas) - s_eps * sum(z_eps)
    den = sum(b * math.exp(s_eta * z) for b, z in zip(betas, z_eta))
    return num / den


def variance_equations_by_hand(data, alpha, beta, s_eta, s_eps, z_eta, z_eps):
    """(E1, E2, LHS1, LHS2): raw differences RHS - LHS, by explicit loops over cells."""
    lab, level, x, y = data.lab, data.level, data.x, data.y
    obs = [(int(i), int(j), float(xx), float(yy), float(a), float(b)) for i, j, xx, yy, a, b in zip(lab, level, x, y, z_eta, z_eps)]

    def t_obs(o):
        i, j, xx, yy, _, _ = o
        return yy / xx if xx > 0 else yy

    def t_piv(o):
        i, j, xx, _, ze, zp = o
        if xx > 0:
            return alpha[i] / xx + beta[i] * math.exp(s_eta * ze) + s_eps * zp / xx
        return alpha[i] + s_eps * zp

    def ss(vals_by_group):
        # mean of cell means inside each group, then squared deviations
        tot = 0.0
        for cells in vals_by_group.values():
            centre = sum(sum(c) / len(c) for c in cells.values()) / len(cells)
            tot += sum((v - centre) ** 2 for c in cells.values() for v in c)
        return tot

    def grouped(f, by_lab, nonzero_only):
        g = {}
        for o in obs:
            if nonzero_only and o[2] == 0:
                continue
            key, cell = (o[0], o[1]) if by_lab else (o[1], o[0])
            g.setdefault(key, {}).setdefault(cell, []).append(f(o))
        return g

    lhs1, lhs2 = ss(grouped(t_obs, True, True)), ss(grouped(t_obs, False, False))
    return ss(grouped(t_piv, True, True)) - lhs1, ss(grouped(t_piv, False, False)) - lhs2, lhs1, lhs2
