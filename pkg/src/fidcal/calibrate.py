"""Inverse estimation of unknown concentrations.

Comparators for the fiducial interval: the likelihood point estimate, Wald
intervals built on the likelihood or the moment fit, and the parametric
bootstrap.  Also decision rules built on interval limits: exceedance of a
regulatory threshold, detection and quantification limits.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from . import _kernels as K
from . import estimation as est
from . import fiducial as fid
from . import rng as _rng
from .errors import ConfigurationError, EstimationError, UnavailableSEError
from .model import CalibrationQuery, InterlabDataset, ModelParams, QueryDesign, draw_responses

METHODS = ("fiducial_hdi", "bootstrap", "wald_mle", "wald_mme")


@dataclass(frozen=True)
class IntervalEstimate:
    lower: float
    upper: float
    level: float
    method: str
    point: float
    n_failed: int = 0
    empty: bool = False

    def __post_init__(self):
        for name in ("lower", "upper", "level", "point"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method tag {self.method!r}")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def covers(self, x: float) -> bool:
        return not self.empty and self.lower <= x <= self.upper

    def restricted_to_nonnegative(self) -> "IntervalEstimate":
        """Intersection with ``[0, inf)``.

        An interval lying wholly below zero becomes empty (stored as
        ``[0, 0]`` with ``empty=True``); the point estimate is left as is.
        Intersecting with the parameter space keeps the coverage of the
        original interval at every admissible concentration.
        """
        if self.upper < 0:
            return replace(self, lower=0.0, upper=0.0, empty=True)
        return replace(self, lower=max(self.lower, 0.0))

    def to_dict(self) -> dict:
        return asdict(self)


def _check_level(level):
    if not 0 < level < 1:
        raise ConfigurationError(f"level must lie in (0, 1), got {level}")


def _params_of(fit) -> ModelParams:
    return fit.params if hasattr(fit, "params") else fit


def _mean_inversion(params: ModelParams, li, ys) -> float:
    g = math.exp(0.5 * params.sigma_eta**2)
    return float((ys.sum() - params.alpha[li].sum()) / (g * params.beta[li].sum()))


# -- likelihood point estimate --------------------------------------------------------


def mle_concentration(query: CalibrationQuery, fit, quad_order: int | None = None) -> dict[str, float]:
    """Maximizer over ``X >= 0`` of the likelihood of the new measurements.

    Model parameters are held at the fit.  With both error scales zero the
    answer is the noise-free inversion.
    """
    params = _params_of(fit)
    if getattr(fit, "converged", True) is False:
        raise EstimationError("calibration fit did not converge")
    if quad_order is None:
        quad_order = getattr(fit, "quad_order", est.DEFAULT_QUAD_ORDER)
    quad_order = est._check_quad_order(quad_order)
    t, logw = K.gh_rule(quad_order)
    out = {}
    for uid in query.unknowns:
        li, ys = query.observations(uid, params.labs)
        out[uid] = _invert(params, li, ys, t, logw)
    return out


def _invert(params, li, ys, t, logw) -> float:
    x0 = max(_mean_inversion(params, li, ys), 0.0)
    if params.sigma_eps == 0:
        if params.sigma_eta == 0:
            return x0
        raise EstimationError("likelihood inversion needs sigma_eps > 0 when sigma_eta > 0")
    X, _, ok = K.invert_concentration(
        ys, li, params.alpha, params.beta, params.sigma_eta, math.log(params.sigma_eps), t, logw, x0, 200
    )
    if not ok:
        raise EstimationError("concentration inversion did not converge")
    return float(X)


# -- Wald intervals ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MomentFit:
    """Moment estimates with a simulated covariance matrix.

    The covariance of ``(alpha, beta, sigma_eta, sigma_eps)`` is estimated by
    refitting the moment estimators on datasets simulated from the moment fit
    with the observed layout.
    """

    params: ModelParams
    covariance: np.ndarray
    n_mc: int


def moment_fit(data: InterlabDataset, n_mc: int = 200, seed: int = 0) -> MomentFit:
    params = est.fit_mme(data)
    g = _rng.stream(seed, _rng.MME_COV)
    a, b = params.alpha[data.lab], params.beta[data.lab]
    rows = []
    for _ in range(n_mc):
        z = g.standard_normal((2, data.n_obs))
        y = draw_responses(a, b, data.x, params.sigma_eta, params.sigma_eps, z[0], z[1])
        try:
            p = est.fit_mme(data.with_measurements(y))
        except Exception:
            continue
        rows.append(np.concatenate([p.alpha, p.beta, [p.sigma_eta, p.sigma_eps]]))
    if len(rows) < 2:
        raise UnavailableSEError("moment refits failed on simulated data")
    return MomentFit(params, np.cov(np.array(rows), rowvar=False), len(rows))


def _delta_var(params: ModelParams, cov: np.ndarray, li, X: float) -> float:
    q = params.q
    g = math.exp(0.5 * params.sigma_eta**2)
    n_i = np.bincount(li, minlength=q).astype(float)
    D = g * float(params.beta[li].sum())
    grad = np.zeros(2 * q + 2)
    grad[:q] = -n_i / D
    grad[q : 2 * q] = -X * g * n_i / D
    grad[2 * q] = -X * params.sigma_eta
    return float(grad @ cov @ grad)


def _response_var(params: ModelParams, li, X: float) -> np.ndarray:
    w = math.exp(params.sigma_eta**2)
    return params.beta[li] ** 2 * X**2 * (w - 1.0) * w + params.sigma_eps**2


def wald_ci_concentration(
    query: CalibrationQuery, fit, level: float = 0.95, estimator: str | None = None
) -> dict[str, IntervalEstimate]:
    """Delta-method intervals ``X_hat +/- z * se``, lower limit clamped at 0.

    ``estimator="mle"`` takes a :class:`FitResult`: the centre is the
    likelihood inversion and the parameter covariance is the inverse observed
    information; the new measurements contribute the variance of their total.
    ``estimator="mme"`` takes a :class:`MomentFit`: the centre is the moment
    inversion and the new-measurement term uses the variance of a single
    response, which makes the interval conservative.
    """
    _check_level(level)
    if estimator is None:
        estimator = "mme" if isinstance(fit, MomentFit) else "mle"
    z = stats.norm.ppf(0.5 + level / 2)
    params = _params_of(fit)
    if estimator == "mle":
        if not hasattr(fit, "covariance") or isinstance(fit, MomentFit):
            raise ConfigurationError("Wald-MLE needs a FitResult")
        cov = fit.covariance()
        centres = mle_concentration(query, fit)
        # the covariance is over (alpha, beta, sigma_eta, sigma_eps)
    elif estimator == "mme":
        if not isinstance(fit, MomentFit):
            raise ConfigurationError("Wald-MME needs a MomentFit")
        cov = fit.covariance
        centres = {
            uid: max(0.0, _mean_inversion(params, *query.observations(uid, params.labs))) for uid in query.unknowns
        }
    else:
        raise ConfigurationError(f"estimator must be 'mle' or 'mme', got {estimator!r}")
    method = "wald_" + estimator
    g = math.exp(0.5 * params.sigma_eta**2)
    out = {}
    for uid in query.unknowns:
        li, _ = query.observations(uid, params.labs)
        X = centres[uid]
        v_par = _delta_var(params, cov, li, X)
        rv = _response_var(params, li, X)
        if estimator == "mle":
            v_new = float(rv.sum()) / (g * float(params.beta[li].sum())) ** 2
        else:
            v_new = float(rv.mean()) / (g * float(params.beta[li].mean())) ** 2
        se = math.sqrt(max(v_par + v_new, 0.0))
        out[uid] = IntervalEstimate(max(0.0, X - z * se), X + z * se, level, method, X)
    return out


# -- parametric bootstrap ----------------------------------------------------------------


def bootstrap_ci_concentration(
    query: CalibrationQuery,
    fit,
    data: InterlabDataset,
    n_boot: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    quad_order: int | None = None,
    kind: str = "percentile",
) -> dict[str, IntervalEstimate]:
    """Parametric bootstrap intervals.

    Each replicate simulates a training set and new measurements at the
    point estimates from the fitted model, refits, and re-inverts.  Training
    refits are shared across unknowns.  Replicates whose refit fails are
    skipped and counted in ``n_failed``.
    """
    _check_level(level)
    if n_boot < 200:
        raise ConfigurationError("n_boot must be at least 200")
    if kind not in ("percentile", "basic", "normal"):
        raise ConfigurationError(f"unknown bootstrap interval kind {kind!r}")
    params = _params_of(fit)
    if quad_order is None:
        quad_order = getattr(fit, "quad_order", est.DEFAULT_QUAD_ORDER)
    t, logw = K.gh_rule(quad_order)
    centres = mle_concentration(query, fit, quad_order)
    obs = {uid: query.observations(uid, params.labs) for uid in query.unknowns}
    a, b = params.alpha[data.lab], params.beta[data.lab]
    boot = {uid: np.full(n_boot, np.nan) for uid in query.unknowns}
    failed = 0
    for rep in range(n_boot):
        g = _rng.stream(seed, _rng.BOOTSTRAP, rep)
        z = g.standard_normal((2, data.n_obs))
        y = draw_responses(a, b, data.x, params.sigma_eta, params.sigma_eps, z[0], z[1])
        refit, ok = est.refit_arrays(y, data, params, quad_order)
        if not ok:
            failed += 1
            continue
        for uid in query.unknowns:
            li, ys = obs[uid]
            zs = g.standard_normal((2, ys.size))
            ystar = draw_responses(
                params.alpha[li], params.beta[li], centres[uid], params.sigma_eta, params.sigma_eps, zs[0], zs[1]
            )
            try:
                boot[uid][rep] = _invert(refit, li, ystar, t, logw)
            except EstimationError:
                pass
    if failed > 0.05 * n_boot:
        warnings.warn(f"{failed} of {n_boot} bootstrap refits failed", RuntimeWarning, stacklevel=2)
    alpha = (1 - level) / 2
    out = {}
    for uid in query.unknowns:
        v = boot[uid][np.isfinite(boot[uid])]
        X = centres[uid]
        nf = n_boot - v.size
        if v.size < 2:
            raise EstimationError("every bootstrap replicate failed")
        if kind == "percentile":
            lo, hi = np.quantile(v, [alpha, 1 - alpha])
        elif kind == "basic":
            qlo, qhi = np.quantile(v, [alpha, 1 - alpha])
            lo, hi = 2 * X - qhi, 2 * X - qlo
        else:
            s = float(np.std(v, ddof=1)) * stats.norm.ppf(1 - alpha)
            lo, hi = X - s, X + s
        out[uid] = IntervalEstimate(max(0.0, float(lo)), float(hi), level, "bootstrap", X, nf)
    return out


# -- decisions ---------------------------------------------------------------------------


def assess_exceedance(interval: IntervalEstimate, rt: float) -> bool:
    """Exceedance is declared only when the lower limit is strictly above ``rt``."""
    return bool(interval.lower > rt)


@dataclass(frozen=True)
class LimitResult:
    """Outcome of a detection or quantification limit search."""

    value: float | None
    found: bool
    bracket: tuple[float, float]
    tol: float
    criterion: str
    evaluations: int = 0

    @property
    def unattainable(self) -> bool:
        return not self.found


class _BatchEvaluator:
    """Median fiducial interval summaries at a candidate concentration.

    Measurement batches use common random numbers across concentrations so
    the median curve is smooth in ``X``.
    """

    def __init__(self, draws, params, design: QueryDesign, level, n_batches, seed, truncate):
        self.draws, self.params, self.level = draws, params, level
        self.truncate = truncate
        self.labs = tuple(map(str, design.labs))
        self.li = np.concatenate([np.full(n, params.lab_index(l)) for l, n in zip(design.labs, design.counts())])
        self.z = [_rng.stream(seed, _rng.LIMITS, b).standard_normal((2, self.li.size)) for b in range(n_batches)]
        self.seed = seed
        self.evaluations = 0

    def intervals(self, X):
        self.evaluations += 1
        p = self.params
        res = []
        for b, z in enumerate(self.z):
            y = draw_responses(p.alpha[self.li], p.beta[self.li], X, p.sigma_eta, p.sigma_eps, z[0], z[1])
            cells = {}
            for lab in self.labs:
                sel = self.li == p.lab_index(lab)
                cells[(lab, "x")] = y[sel]
            q = CalibrationQuery(self.labs, ("x",), cells)
            s = fid.concentration_pivots(q, self.draws, _rng.child_seed(self.seed, b), self.truncate)["x"]
            res.append(fid.hdi(s, self.level))
        return res

    def median_lcl(self, X):
        return float(np.median([iv.lower for iv in self.intervals(X)]))

    def median_relative_width(self, X):
        r = []
        for iv in self.intervals(X):
            r.append(iv.width / iv.point if iv.point > 0 else np.inf)
        return float(np.median(r))


def _bisect(pred, lo, hi, tol):
    """Smallest point in [lo, hi] (to ``tol``) where ``pred`` holds, assuming monotonicity."""
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if pred(mid):
            hi = mid
        else:
            lo = mid
    return hi


def detection_limit(
    draws,
    params: ModelParams,
    design: QueryDesign,
    level: float = 0.95,
    bracket: tuple[float, float] = (0.0, 100.0),
    tol: float = 0.01,
    n_batches: int = 25,
    seed: int = 0,
    truncate: bool = False,
) -> LimitResult:
    """Smallest concentration whose median fiducial lower limit exceeds 0.

    ``draws`` are parameter draws for the calibration data and ``params``
    the fitted model used to simulate measurement batches.
    """
    _check_level(level)
    ev = _BatchEvaluator(draws, _params_of(params), design, level, n_batches, seed, truncate)
    lo, hi = bracket
    pred = lambda X: ev.median_lcl(X) > 0
    if not pred(hi):
        return LimitResult(None, False, bracket, tol, "lcl>0", ev.evaluations)
    if pred(lo):
        return LimitResult(lo, True, bracket, tol, "lcl>0", ev.evaluations)
    return LimitResult(_bisect(pred, lo, hi, tol), True, bracket, tol, "lcl>0", ev.evaluations)


def quantification_limit(
    draws,
    params: ModelParams,
    design: QueryDesign,
    level: float = 0.95,
    bracket: tuple[float, float] = (0.0, 100.0),
    tol: float = 0.01,
    n_batches: int = 25,
    seed: int = 0,
    truncate: bool = False,
    target: float = 0.10,
) -> LimitResult:
    """Smallest concentration whose median relative interval width is at most ``target``."""
    _check_level(level)
    ev = _BatchEvaluator(draws, _params_of(params), design, level, n_batches, seed, truncate)
    lo, hi = bracket
    pred = lambda X: X > 0 and ev.median_relative_width(X) <= target
    crit = f"width/point<={target:g}"
    if not pred(hi):
        return LimitResult(None, False, bracket, tol, crit, ev.evaluations)
    return LimitResult(_bisect(pred, lo, hi, tol), True, bracket, tol, crit, ev.evaluations)


# -- one-call calibration -------------------------------------------------------------------


@dataclass
class CalibrationReport:
    level: float
    sigma_eta_hat: float
    plug_in: str
    n_fiducial: int
    n_failed_draws: int
    status_counts: dict
    points: dict = field(default_factory=dict)
    intervals: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict, repr=False)
    draw_status: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "schema_version": est.SCHEMA_VERSION,
            "kind": "calibration",
            "level": self.level,
            "sigma_eta_hat": self.sigma_eta_hat,
            "plug_in": self.plug_in,
            "n_fiducial": self.n_fiducial,
            "n_failed_draws": self.n_failed_draws,
            "failure_rate": self.n_failed_draws / self.n_fiducial if self.n_fiducial else 0.0,
            "status_counts": self.status_counts,
            "unknowns": {
                uid: {
                    "point": self.points[uid],
                    "intervals": [iv.to_dict() for iv in self.intervals[uid]],
                }
                for uid in self.points
            },
            "timings": self.timings,
        }


def run_calibration(
    data: InterlabDataset,
    query: CalibrationQuery,
    methods=("fiducial_hdi",),
    level: float = 0.95,
    n_fiducial: int = 10000,
    n_boot: int = 1000,
    seed: int = 0,
    fit=None,
    plug_in: str = "mme",
    truncate: bool = False,
    n_mc_mme: int = 200,
) -> CalibrationReport:
    """Fiducial mode and HDI for each unknown, plus any requested comparators."""
    _check_level(level)
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ConfigurationError(f"unknown method {m!r}; choose from {METHODS}")
    query.check_labs(data.labs)
    timings = {}
    needs_mle = plug_in == "mle" or any(m in methods for m in ("bootstrap", "wald_mle"))
    if fit is None and needs_mle:
        t0 = time.perf_counter()
        fit = est.fit_mle(data)
        timings["fit_mle"] = time.perf_counter() - t0
    if plug_in == "mme":
        sigma_hat = est.fit_mme(data).sigma_eta
    elif plug_in == "mle":
        sigma_hat = fit.params.sigma_eta
    else:
        raise ConfigurationError("plug_in must be 'mme' or 'mle'")
    t0 = time.perf_counter()
    draws = fid.draw_parameter_fiducials(data, sigma_hat, n_fiducial, _rng.child_seed(seed, _rng.FIDUCIAL), keep_aux=False)
    samples = fid.concentration_pivots(query, draws, _rng.child_seed(seed, _rng.CONC_PIVOT), truncate)
    points, intervals = {}, {uid: [] for uid in query.unknowns}
    for uid, s in samples.items():
        iv = fid.hdi(s, level)
        iv = replace(iv, n_failed=s.n_failed)
        points[uid] = {"fiducial_mode": iv.point}
        intervals[uid].append(iv)
    timings["fiducial"] = time.perf_counter() - t0
    if fit is not None and getattr(fit, "converged", False):
        for uid, x in mle_concentration(query, fit).items():
            points[uid]["mle"] = x
    if "bootstrap" in methods:
        t0 = time.perf_counter()
        for uid, iv in bootstrap_ci_concentration(
            query, fit, data, n_boot, level, _rng.child_seed(seed, _rng.BOOTSTRAP)
        ).items():
            intervals[uid].append(iv)
        timings["bootstrap"] = time.perf_counter() - t0
    if "wald_mle" in methods:
        t0 = time.perf_counter()
        for uid, iv in wald_ci_concentration(query, fit, level, "mle").items():
            intervals[uid].append(iv)
        timings["wald_mle"] = time.perf_counter() - t0
    if "wald_mme" in methods:
        t0 = time.perf_counter()
        mf = moment_fit(data, n_mc_mme, _rng.child_seed(seed, _rng.MME_COV))
        for uid, iv in wald_ci_concentration(query, mf, level, "mme").items():
            intervals[uid].append(iv)
        timings["wald_mme"] = time.perf_counter() - t0
    return CalibrationReport(
        level, float(sigma_hat), plug_in, n_fiducial, draws.n_failed, draws.status_counts(),
        points, intervals, timings, samples, draws.status,
    )
