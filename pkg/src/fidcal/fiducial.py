"""Fiducial pivots for the calibration model and for unknown concentrations.

A draw regenerates the auxiliary normals ``z_eta`` and ``z_eps`` for every
training observation and maps them, with the observed responses held fixed,
to pivots for the intercepts, slopes and the two error scales.  Concentration
pivots then invert the structural equation of the new measurements with fresh
auxiliaries.  Draws whose variance equations have no root are discarded and
counted.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from . import _fid_kernels as FK
from . import rng as _rng
from .errors import (
    ConfigurationError,
    DegenerateDrawError,
    InsufficientDataError,
    InsufficientSampleError,
    UndefinedPivotError,
)
from .model import CalibrationQuery, InterlabDataset

STATUS_NAMES = ("solved", "no_solution", "multiple_solutions_resolved")
SOLVED, NO_SOLUTION, MULTIPLE = FK.SOLVED, FK.NO_SOLUTION, FK.MULTIPLE

SOLVER_TOL = 1e-10
SOLVER_MAXIT = 200
DISTINCT_ROOTS = 1e-6
CHUNK = 1024
KDE_GRID = 512
MIN_SAMPLE = 100


# -- per-dataset layout ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Layout:
    """Flat arrays and observed-side sums used by every draw."""

    y: np.ndarray
    x: np.ndarray
    lab: np.ndarray
    level: np.ndarray
    zero: np.ndarray
    a: np.ndarray
    nz: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    q: int
    r: int
    lhs1: float
    lhs2: float
    s1: float
    s2: float


def _group_means(values, weights, groups, n_groups):
    return np.bincount(groups, weights=weights * values, minlength=n_groups)


def layout(data: InterlabDataset) -> _Layout:
    counts = data.counts
    if np.any(counts[:, 0] == 0):
        missing = [data.labs[i] for i in np.flatnonzero(counts[:, 0] == 0)]
        raise UndefinedPivotError(f"labs {missing} have no blank measurements")
    if data.r < 2 or np.any(counts[:, 1:].sum(axis=1) == 0):
        raise UndefinedPivotError("every lab needs measurements at a positive concentration")
    if np.sum(counts[:, 0] - 1) < 1:
        raise InsufficientDataError("blank replicates give no pooled within-lab degrees of freedom")
    y, x, lab, level = data.y, data.x, data.lab, data.level
    nz = x > 0
    a = np.where(nz, 1.0 / np.where(nz, x, 1.0), 1.0)
    t = y * a
    cell_n = counts[lab, level].astype(float)
    cells_per_lab = (counts[:, 1:] > 0).sum(axis=1)
    labs_per_level = (counts > 0).sum(axis=0)
    w1 = np.where(nz, 1.0 / (cells_per_lab[lab] * cell_n), 0.0)
    w2 = 1.0 / (labs_per_level[level] * cell_n)
    m1 = _group_means(t, w1, lab, data.q)
    m2 = _group_means(t, w2, level, data.r)
    lhs1 = float(np.sum((t - m1[lab])[nz] ** 2))
    lhs2 = float(np.sum((t - m2[level]) ** 2))
    floor = 1e-12 * max(float(np.sum(t**2)), 1e-300)
    return _Layout(
        y, x, lab, level, ~nz, a, nz, w1, w2, data.q, data.r, lhs1, lhs2, max(lhs1, floor), max(lhs2, floor)
    )


def _aux_shape_check(data, z):
    z = np.asarray(z, dtype=float)
    if z.shape != (data.n_obs,):
        raise ConfigurationError(f"auxiliary array must have shape ({data.n_obs},), got {z.shape}")
    return z


# -- single-draw pivots -------------------------------------------------------------


def init_pivots(data: InterlabDataset, z_eps) -> tuple[float, np.ndarray]:
    """Blank-level pivots ``(sigma_eps_init, alpha_init)``.

    ``z_eps`` is indexed like the flat observations of ``data``; only its
    blank-level entries are used.
    """
    lay = layout(data)
    z_eps = _aux_shape_check(data, z_eps)
    alpha = np.empty(data.q)
    s = FK.init_pivots(lay.y, lay.lab, lay.zero, z_eps, lay.q, alpha)
    if not np.isfinite(s):
        raise DegenerateDrawError("auxiliary blank draws have zero within-lab spread")
    return float(s), alpha


def beta_pivots(data, alpha_init, sigma_eps_init, sigma_eta_hat, z_eta, z_eps) -> np.ndarray:
    """Closed-form slope pivots from lab totals over every level."""
    z_eta, z_eps = _aux_shape_check(data, z_eta), _aux_shape_check(data, z_eps)
    out = np.empty(data.q)
    ok = FK.beta_pivots(
        data.y, data.x, data.lab, data.q, np.asarray(alpha_init, float), float(sigma_eps_init),
        float(sigma_eta_hat), z_eta, z_eps, out,
    )
    if not ok:
        raise UndefinedPivotError("a lab has only zero concentrations; its slope pivot is undefined")
    return out


def alpha_pivots_updated(data, beta_tilde, sigma_eps_init, sigma_eta_hat, z_eta, z_eps) -> np.ndarray:
    """Intercept pivots from the ``y/x`` form over positive concentrations."""
    z_eta, z_eps = _aux_shape_check(data, z_eta), _aux_shape_check(data, z_eps)
    out = np.empty(data.q)
    ok = FK.alpha_pivots(
        data.y, data.x, data.lab, data.q, np.asarray(beta_tilde, float), float(sigma_eps_init),
        float(sigma_eta_hat), z_eta, z_eps, out,
    )
    if not ok:
        raise UndefinedPivotError("a lab has no positive concentration; its intercept pivot is undefined")
    return out


def variance_residuals(data, alpha_tilde, beta_tilde, sigma_eta, sigma_eps, z_eta, z_eps) -> tuple[float, float]:
    """Scaled residuals of the two variance equations at a candidate point."""
    lay = layout(data)
    out = np.empty(6)
    FK._system(
        float(sigma_eta), float(sigma_eps), np.asarray(alpha_tilde, float), np.asarray(beta_tilde, float),
        lay.lab, lay.level, lay.a, lay.nz, lay.w1, lay.w2, lay.q, lay.r,
        _aux_shape_check(data, z_eta), _aux_shape_check(data, z_eps), lay.lhs1, lay.lhs2, 0, out, FK.workspace(lay.q, lay.r, lay.y.size),
    )
    return out[0] / lay.s1, out[1] / lay.s2


def _floors(lay: _Layout) -> tuple[float, float]:
    # start-grid bases when a plug-in is exactly zero
    spread = math.sqrt(lay.lhs2 / max(lay.y.size - 1, 1))
    return 0.05, max(1e-3 * spread, 1e-12)


def solve_variance_system(
    data, alpha_tilde, beta_tilde, z_eta, z_eps, sigma_eta_hat: float, sigma_eps_init: float
) -> tuple[float, float, str]:
    """Solve the two variance equations for ``(sigma_eta, sigma_eps)``.

    Damped Newton from a 3 x 3 grid of starts scaled around the plug-ins.
    Returns the status name as third element.
    """
    lay = layout(data)
    fe, fp = _floors(lay)
    res = np.empty(2)
    se, sp, st = FK.solve_variance(
        np.asarray(alpha_tilde, float), np.asarray(beta_tilde, float), lay.y, lay.x, lay.lab, lay.level,
        lay.a, lay.nz, lay.w1, lay.w2, lay.q, lay.r,
        _aux_shape_check(data, z_eta), _aux_shape_check(data, z_eps),
        lay.lhs1, lay.lhs2, lay.s1, lay.s2, max(sigma_eta_hat, fe), max(sigma_eps_init, fp),
        SOLVER_TOL, SOLVER_MAXIT, DISTINCT_ROOTS, res, FK.workspace(lay.q, lay.r, lay.y.size),
    )
    return float(se), float(sp), STATUS_NAMES[st]


# -- batches ----------------------------------------------------------------------------


@dataclass(frozen=True)
class FiducialDraw:
    alpha_tilde: np.ndarray
    beta_tilde: np.ndarray
    sigma_eta_tilde: float
    sigma_eps_tilde: float
    aux_z_eta: np.ndarray | None
    aux_z_eps: np.ndarray | None
    status: str

    @property
    def ok(self) -> bool:
        return self.status != "no_solution"


@dataclass(frozen=True, eq=False)
class FiducialDraws:
    """A batch of parameter draws stored column-wise.

    ``residuals`` holds the scaled variance-equation residuals at the
    returned root (NaN for failed draws).  Auxiliary arrays are kept only
    when requested.
    """

    labs: tuple[str, ...]
    alpha: np.ndarray
    beta: np.ndarray
    sigma_eta: np.ndarray
    sigma_eps: np.ndarray
    status: np.ndarray
    residuals: np.ndarray
    sigma_eta_hat: float
    z_eta: np.ndarray | None = None
    z_eps: np.ndarray | None = None

    def __len__(self) -> int:
        return self.status.size

    def __getitem__(self, d: int) -> FiducialDraw:
        return FiducialDraw(
            self.alpha[d].copy(),
            self.beta[d].copy(),
            float(self.sigma_eta[d]),
            float(self.sigma_eps[d]),
            None if self.z_eta is None else self.z_eta[d].copy(),
            None if self.z_eps is None else self.z_eps[d].copy(),
            STATUS_NAMES[self.status[d]],
        )

    def __iter__(self) -> Iterator[FiducialDraw]:
        return (self[d] for d in range(len(self)))

    @property
    def ok(self) -> np.ndarray:
        return self.status != NO_SOLUTION

    @property
    def n_failed(self) -> int:
        return int(np.sum(~self.ok))

    def status_counts(self) -> dict[str, int]:
        return {name: int(np.sum(self.status == k)) for k, name in enumerate(STATUS_NAMES)}


def draw_parameter_fiducials(
    data: InterlabDataset,
    sigma_eta_hat: float,
    n_draws: int,
    seed: int,
    keep_aux: bool = True,
) -> FiducialDraws:
    """Parameter pivots for ``n_draws`` independent auxiliary draws.

    Draw ``d`` uses chunk ``d // 1024`` of the keyed stream, so the batch is
    a pure function of ``(data, sigma_eta_hat, n_draws, seed)`` and a longer
    batch extends a shorter one.
    """
    if n_draws < 0:
        raise ConfigurationError("n_draws must be nonnegative")
    if not sigma_eta_hat >= 0:
        raise ConfigurationError("sigma_eta_hat must be a nonnegative number")
    lay = layout(data)
    n, q = data.n_obs, data.q
    alpha = np.full((n_draws, q), np.nan)
    beta = np.full((n_draws, q), np.nan)
    seta = np.full(n_draws, np.nan)
    seps = np.full(n_draws, np.nan)
    status = np.full(n_draws, NO_SOLUTION, dtype=np.int64)
    resid = np.full((n_draws, 2), np.nan)
    z_eta_all = np.empty((n_draws, n)) if keep_aux else None
    z_eps_all = np.empty((n_draws, n)) if keep_aux else None
    fe, fp = _floors(lay)
    for c, start in enumerate(range(0, n_draws, CHUNK)):
        m = min(CHUNK, n_draws - start)
        g = _rng.stream(seed, _rng.FIDUCIAL, c)
        z = g.standard_normal((2, CHUNK, n))[:, :m]
        ze, zp = np.ascontiguousarray(z[0]), np.ascontiguousarray(z[1])
        sl = slice(start, start + m)
        FK.draw_batch(
            lay.y, lay.x, lay.lab, lay.level, lay.zero, lay.a, lay.nz, lay.w1, lay.w2, lay.q, lay.r,
            lay.lhs1, lay.lhs2, lay.s1, lay.s2, float(sigma_eta_hat), fe, fp, ze, zp,
            SOLVER_TOL, SOLVER_MAXIT, DISTINCT_ROOTS,
            alpha[sl], beta[sl], seta[sl], seps[sl], status[sl], resid[sl],
        )
        if keep_aux:
            z_eta_all[sl] = ze
            z_eps_all[sl] = zp
    return FiducialDraws(data.labs, alpha, beta, seta, seps, status, resid, float(sigma_eta_hat), z_eta_all, z_eps_all)


# -- concentration pivots ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FiducialSample:
    """Concentration pivots for one unknown.

    ``values`` excludes failed parameter draws; ``draw_index`` maps each
    value back to its parameter draw.
    """

    values: np.ndarray
    n_requested: int
    n_failed: int
    truncated_at_zero: bool
    draw_index: np.ndarray | None = None
    unknown_id: str = ""

    def __post_init__(self):
        if self.values.size + self.n_failed != self.n_requested:
            raise ValueError("values and failures must account for every requested draw")

    @property
    def failure_rate(self) -> float:
        return self.n_failed / self.n_requested if self.n_requested else 0.0

    def to_csv(self, path, statuses: np.ndarray | None = None) -> None:
        """Write ``draw_index,value,status``; failed draws get an empty value."""
        idx = self.draw_index if self.draw_index is not None else np.arange(self.values.size)
        by_draw = dict(zip(idx.tolist(), self.values.tolist()))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["draw_index", "value", "status"])
            for d in range(self.n_requested):
                if d in by_draw:
                    st = STATUS_NAMES[statuses[d]] if statuses is not None else "solved"
                    w.writerow([d, repr(by_draw[d]), st])
                else:
                    w.writerow([d, "", "no_solution"])


def concentration_pivots(
    query: CalibrationQuery,
    draws: FiducialDraws,
    seed: int,
    truncate: bool = False,
) -> dict[str, FiducialSample]:
    """Concentration pivots for every unknown in ``query``.

    Fresh auxiliaries for unknown ``u`` come from its own keyed stream, in
    the same 1024-draw chunks as the parameter draws.  With ``truncate`` the
    values are floored at 0; by default they are kept as computed and
    nonnegativity is imposed on the summaries instead (see :func:`hdi`).
    """
    labs = list(draws.labs)
    query.check_labs(labs)
    ok = draws.ok
    out = {}
    n = len(draws)
    for u, uid in enumerate(query.unknowns):
        li, ys = query.observations(uid, labs)
        vals = np.empty(n)
        for c, start in enumerate(range(0, n, CHUNK)):
            m = min(CHUNK, n - start)
            g = _rng.stream(seed, _rng.CONC_PIVOT, u, c)
            z = g.standard_normal((2, CHUNK, ys.size))[:, :m]
            sl = slice(start, start + m)
            a = draws.alpha[sl][:, li]
            b = draws.beta[sl][:, li]
            se = draws.sigma_eta[sl, None]
            sp = draws.sigma_eps[sl, None]
            with np.errstate(invalid="ignore", divide="ignore"):
                num = ys.sum() - a.sum(axis=1) - (sp * z[1]).sum(axis=1)
                den = (b * np.exp(se * z[0])).sum(axis=1)
                vals[sl] = num / den
        good = ok & np.isfinite(vals)
        v = vals[good]
        if truncate:
            v = np.maximum(v, 0.0)
        out[uid] = FiducialSample(v, n, int(n - good.sum()), bool(truncate), np.flatnonzero(good), uid)
    return out


def concentration_pivot(y_star, alpha, beta, sigma_eta, sigma_eps, z_eta, z_eps) -> float:
    """Single evaluation of the concentration pivot for aligned arrays.

    ``alpha``/``beta`` are the draw's values for the lab of each new
    measurement.
    """
    y_star, alpha, beta = (np.asarray(v, dtype=float) for v in (y_star, alpha, beta))
    den = float(np.sum(beta * np.exp(sigma_eta * np.asarray(z_eta, float))))
    if den == 0:
        raise UndefinedPivotError("concentration pivot denominator is zero")
    return float((y_star.sum() - alpha.sum() - sigma_eps * np.sum(z_eps)) / den)


# -- density summaries -------------------------------------------------------------------


def _values(sample) -> tuple[np.ndarray, bool]:
    if isinstance(sample, FiducialSample):
        v, trunc = sample.values, sample.truncated_at_zero
    else:
        v, trunc = np.asarray(sample, dtype=float), False
    if v.size < MIN_SAMPLE:
        raise InsufficientSampleError(f"need at least {MIN_SAMPLE} values for a density estimate, got {v.size}")
    return v, trunc


def silverman_bandwidth(v: np.ndarray) -> float:
    """Silverman's rule of thumb, with the usual fallbacks for zero spread."""
    n = v.size
    sd = float(np.std(v, ddof=1))
    q75, q25 = np.percentile(v, [75, 25])
    spread = min(sd, (q75 - q25) / 1.349)
    if spread <= 0:
        spread = sd if sd > 0 else (abs(float(v[0])) if v[0] != 0 else 1.0)
    return 0.9 * spread * n ** (-0.2)


@dataclass(frozen=True, eq=False)
class Density:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    point_mass: float | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "density"])
            for x, d in zip(self.grid, self.density):
                w.writerow([repr(float(x)), repr(float(d))])


def kde(sample, n_grid: int = KDE_GRID) -> Density:
    """Gaussian KDE on a regular grid.

    The grid spans the sample range padded by three bandwidths.  For a
    sample truncated at zero the grid starts at 0 and the kernel mass that
    would fall below zero is reflected back.  A constant sample yields a
    ``point_mass`` at its value.
    """
    v, trunc = _values(sample)
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        grid = np.array([lo])
        return Density(grid, np.array([np.inf]), 0.0, lo)
    bw = silverman_bandwidth(v)
    glo, ghi = lo - 3 * bw, hi + 3 * bw
    if trunc:
        glo = max(glo, 0.0)
    grid = np.linspace(glo, ghi, n_grid)
    dens = _gauss_sum(grid, v, bw)
    if trunc:
        dens += _gauss_sum(grid, -v, bw)
    dens /= np.trapezoid(dens, grid)
    return Density(grid, dens, bw)


def _gauss_sum(grid, v, bw):
    pts, wts = v, np.ones(v.size)
    if v.size > 20000:
        # large samples: histogram with bins of bw/20, shifts are negligible
        nb = int(min(200000, max(64, math.ceil((v.max() - v.min()) / (bw / 20)))))
        counts, edges = np.histogram(v, bins=nb)
        sel = counts > 0
        pts, wts = 0.5 * (edges[:-1] + edges[1:])[sel], counts[sel].astype(float)
    out = np.zeros(grid.size)
    for s in range(0, pts.size, 4096):
        d = (grid[:, None] - pts[None, s : s + 4096]) / bw
        out += np.exp(-0.5 * d * d) @ wts[s : s + 4096]
    return out / (v.size * bw * math.sqrt(2 * math.pi))


def hdi(sample, level: float = 0.95, nonnegative: bool | None = None, method: str = "fiducial_hdi"):
    """Highest-density interval from the KDE.

    The density is integrated by the trapezoid rule on the KDE grid, and the
    cumulative mass is interpolated to find the shortest window holding
    ``level``.  For a sample truncated at zero the grid starts at 0, so the
    interval is one-sided when the density peaks there.

    With ``nonnegative`` (the default for :class:`FiducialSample`) the
    interval is intersected with ``[0, inf)``; plain arrays are summarized as
    they are.  The point estimate is the density mode.
    """
    from .calibrate import IntervalEstimate

    if not 0 < level < 1:
        raise ConfigurationError("level must lie in (0, 1)")
    if nonnegative is None:
        nonnegative = isinstance(sample, FiducialSample)
    dens = kde(sample)
    mode = _mode_from(dens)
    if dens.point_mass is not None:
        iv = IntervalEstimate(dens.point_mass, dens.point_mass, level, method, dens.point_mass)
    else:
        g, f = dens.grid, dens.density
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(g))])
        cdf /= cdf[-1]
        # for each lower tail mass, the upper end holding `level`
        p = np.linspace(0.0, 1.0 - level, 2001)
        lower = np.interp(p, cdf, g)
        upper = np.interp(p + level, cdf, g)
        k = int(np.argmin(upper - lower))
        iv = IntervalEstimate(lower[k], upper[k], level, method, mode)
    return iv.restricted_to_nonnegative() if nonnegative else iv


def _mode_from(dens: Density) -> float:
    if dens.point_mass is not None:
        return dens.point_mass
    g, f = dens.grid, dens.density
    k = int(np.argmax(f))
    if 0 < k < g.size - 1:
        # parabolic refinement through the three grid points
        den = f[k - 1] - 2 * f[k] + f[k + 1]
        if den < 0:
            shift = 0.5 * (f[k - 1] - f[k + 1]) / den
            return float(g[k] + shift * (g[1] - g[0]))
    return float(g[k])


def fiducial_mode(sample) -> float:
    """Argmax of the same density estimate used by :func:`hdi`."""
    return _mode_from(kde(sample))


def equal_tailed(sample, level: float = 0.95) -> tuple[float, float]:
    v, _ = _values(sample)
    a = (1 - level) / 2
    lo, hi = np.quantile(v, [a, 1 - a])
    return float(lo), float(hi)


def summarize(samples: Mapping[str, FiducialSample], level: float = 0.95) -> dict[str, dict]:
    out = {}
    for uid, s in samples.items():
        iv = hdi(s, level)
        out[uid] = {
            "mode": iv.point,
            "lower": iv.lower,
            "upper": iv.upper,
            "n_values": int(s.values.size),
            "n_failed": s.n_failed,
        }
    return out
