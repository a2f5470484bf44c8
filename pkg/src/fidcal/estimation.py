"""Point estimation for the calibration model.

Two routes are provided.  The moment route uses blank (zero-concentration)
replicates for the additive scale and intercepts, within-lab slopes, and
replicate variances at positive concentrations for the multiplicative scale.
The likelihood route maximizes the integrated likelihood, with the lognormal
random effect integrated out by adaptive Gauss-Hermite quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import ConfigurationError, InsufficientDataError
from .model import InterlabDataset, ModelParams

SCHEMA_VERSION = 1
DEFAULT_QUAD_ORDER = 20


def _check_quad_order(quad_order: int) -> int:
    if int(quad_order) != quad_order or quad_order < 5:
        raise ConfigurationError(f"quad_order must be an integer >= 5, got {quad_order}")
    return int(quad_order)


# -- moment estimators -----------------------------------------------------------


def mme_zero_level(data: InterlabDataset) -> tuple[float, np.ndarray]:
    """Pooled blank standard deviation and per-lab blank means.

    Returns ``(sigma_eps_hat, alpha_hat)``; ``alpha_hat`` is NaN for a lab
    without blank replicates.
    """
    ss = 0.0
    df = 0
    alpha = np.full(data.q, np.nan)
    for i, lab in enumerate(data.labs):
        blanks = data.cell(lab, 0)
        if blanks.size:
            alpha[i] = blanks.mean()
            ss += float(np.sum((blanks - alpha[i]) ** 2))
            df += blanks.size - 1
    if df < 1:
        raise InsufficientDataError("blank replicates give no pooled within-lab degrees of freedom")
    return math.sqrt(ss / df), alpha


def lab_slopes(data: InterlabDataset) -> np.ndarray:
    """Ordinary least-squares slope of y on x within each lab."""
    beta = np.empty(data.q)
    for i in range(data.q):
        sel = data.lab == i
        xs, ys = data.x[sel], data.y[sel]
        sxx = np.sum((xs - xs.mean()) ** 2)
        if sxx == 0:
            raise InsufficientDataError(f"lab {data.labs[i]} has no positive-concentration data")
        beta[i] = np.sum((xs - xs.mean()) * (ys - ys.mean())) / sxx
    return beta


def mme_sigma_eta(
    data: InterlabDataset, sigma_eps_hat: float, alpha_hat=None, beta_hat=None
) -> float:
    """Moment estimate of the multiplicative error scale.

    Each replicated cell at a positive concentration gives
    ``v = max(0, S^2 - sigma_eps^2) / (beta^2 x^2)``; solving ``w (w - 1) = v``
    for ``w = exp(sigma_eta^2)`` and averaging ``w`` over cells with weights
    ``N_ij`` gives ``sigma_eta = sqrt(log w)``.  ``alpha_hat`` is accepted for
    signature symmetry; the variance law does not involve it.
    """
    if beta_hat is None:
        beta_hat = lab_slopes(data)
    beta_hat = np.asarray(beta_hat, dtype=float)
    num = 0.0
    den = 0
    for i, lab in enumerate(data.labs):
        if beta_hat[i] == 0:
            continue
        for j in range(1, data.r):
            cell = data.cell(lab, j)
            if cell.size < 2:
                continue
            x = data.concentrations[j]
            v = max(0.0, float(np.var(cell, ddof=1)) - sigma_eps_hat**2) / (beta_hat[i] ** 2 * x**2)
            w = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * v))
            num += cell.size * w
            den += cell.size
    if den == 0:
        raise InsufficientDataError("no replicated cell at a positive concentration")
    return math.sqrt(max(0.0, math.log(num / den)))


def fit_mme(data: InterlabDataset, n_refine: int = 3) -> ModelParams:
    """All-moment fit.

    The within-lab least-squares slope estimates ``beta_i * exp(sigma_eta^2/2)``,
    so slopes and ``sigma_eta`` are refined jointly by a short fixed-point
    iteration.
    """
    sigma_eps, alpha = mme_zero_level(data)
    if np.any(np.isnan(alpha)):
        raise InsufficientDataError("every lab needs blank replicates for moment estimation")
    slopes = lab_slopes(data)
    beta = slopes.copy()
    sigma_eta = 0.0
    for _ in range(n_refine):
        sigma_eta = mme_sigma_eta(data, sigma_eps, alpha, beta)
        beta = slopes * math.exp(-0.5 * sigma_eta**2)
    return ModelParams(alpha, beta, sigma_eta, sigma_eps, labs=data.labs)


# -- integrated likelihood -------------------------------------------------------


def _theta(params: ModelParams) -> np.ndarray:
    sigma_eps = params.sigma_eps
    tau = math.log(sigma_eps) if sigma_eps > 0 else -np.inf
    return np.concatenate([params.alpha, params.beta, [params.sigma_eta, tau]])


def loglik(data: InterlabDataset, params: ModelParams, quad_order: int = DEFAULT_QUAD_ORDER) -> float:
    """Integrated log-likelihood.

    Returns ``-inf`` when ``sigma_eps = 0`` and some response is not exactly
    explained by the noise-free curve.
    """
    quad_order = _check_quad_order(quad_order)
    _check_params(data, params)
    if params.sigma_eps == 0:
        return _loglik_degenerate(data, params)
    t, logw = K.gh_rule(quad_order)
    n = 2 * data.q + 2
    return float(
        K.dataset_terms(
            _theta(params), data.y, data.x, data.lab, data.q, t, logw, 0, np.empty(n), np.empty((n, n))
        )
    )


def _loglik_degenerate(data, params):
    if params.sigma_eta == 0:
        fitted = params.alpha[data.lab] + params.beta[data.lab] * data.x
        return np.inf if np.array_equal(fitted, data.y) else -np.inf
    # pure lognormal part at positive x, point mass at x = 0
    if not np.array_equal(data.y[data.x == 0], params.alpha[data.lab][data.x == 0]):
        return -np.inf
    pos = data.x > 0
    scale = params.beta[data.lab][pos] * data.x[pos]
    resid = data.y[pos] - params.alpha[data.lab][pos]
    if np.any(resid / scale <= 0):
        return -np.inf
    z = np.log(resid / scale) / params.sigma_eta
    return float(np.sum(-0.5 * z**2 - 0.5 * np.log(2 * np.pi) - np.log(params.sigma_eta * resid)))


def loglik_derivatives(
    data: InterlabDataset, params: ModelParams, quad_order: int = DEFAULT_QUAD_ORDER, hessian: bool = False
):
    """Log-likelihood and its gradient in ``(alpha, beta, sigma_eta, sigma_eps)``.

    With ``hessian=True`` the analytic Hessian in the same coordinates is
    returned as a third element.
    """
    quad_order = _check_quad_order(quad_order)
    _check_params(data, params)
    if params.sigma_eps <= 0:
        raise ConfigurationError("derivatives need sigma_eps > 0")
    t, logw = K.gh_rule(quad_order)
    n = 2 * data.q + 2
    grad, hess = np.empty(n), np.empty((n, n))
    ll = K.dataset_terms(_theta(params), data.y, data.x, data.lab, data.q, t, logw, 2 if hessian else 1, grad, hess)
    # chain rule from tau = log(sigma_eps)
    s = params.sigma_eps
    g_tau = grad[-1]
    grad[-1] = g_tau / s
    if not hessian:
        return float(ll), grad
    hess[-1, :-1] /= s
    hess[:-1, -1] /= s
    hess[-1, -1] = (hess[-1, -1] - g_tau) / s**2
    return float(ll), grad, hess


def _check_params(data, params):
    if params.q != data.q:
        raise ConfigurationError(f"params describe {params.q} labs, data has {data.q}")


# -- maximum likelihood ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FitResult:
    """Maximum-likelihood fit.

    ``observed_info`` is the negative Hessian of the log-likelihood in
    ``(alpha_1..q, beta_1..q, sigma_eta, sigma_eps)`` at the optimum, computed
    by central differences of the analytic gradient.  It is ``None`` when the
    optimizer did not converge.
    """

    params: ModelParams
    loglik: float
    observed_info: np.ndarray | None
    converged: bool
    n_iter: int
    quad_order: int = DEFAULT_QUAD_ORDER
    sigma_eta_mme: float | None = None
    extra: dict = field(default_factory=dict)

    def covariance(self) -> np.ndarray:
        from .errors import UnavailableSEError

        if self.observed_info is None:
            raise UnavailableSEError("fit did not converge; no observed information")
        try:
            cov = np.linalg.inv(self.observed_info)
        except np.linalg.LinAlgError:
            raise UnavailableSEError("observed information is singular") from None
        if not np.all(np.isfinite(cov)) or np.any(np.diag(cov) < 0):
            raise UnavailableSEError("observed information is not positive definite")
        return cov

    def standard_errors(self) -> np.ndarray | None:
        try:
            return np.sqrt(np.diag(self.covariance()))
        except Exception:
            return None

    def param_names(self) -> list[str]:
        labs = self.params.labs
        return [f"alpha[{l}]" for l in labs] + [f"beta[{l}]" for l in labs] + ["sigma_eta", "sigma_eps"]

    def to_report(self) -> dict:
        se = self.standard_errors()
        est = _theta_natural(self.params)
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "fit",
            "params": self.params.to_dict(),
            "estimates": {
                name: {"value": float(v), "se": None if se is None else float(s)}
                for name, v, s in zip(self.param_names(), est, se if se is not None else est * np.nan)
            },
            "loglik": self.loglik,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "quad_order": self.quad_order,
            "sigma_eta_mme": self.sigma_eta_mme,
            "observed_info": None if self.observed_info is None else self.observed_info.tolist(),
            **self.extra,
        }

    @classmethod
    def from_report(cls, report: dict) -> "FitResult":
        info = report.get("observed_info")
        return cls(
            params=ModelParams.from_dict(report["params"]),
            loglik=float(report["loglik"]),
            observed_info=None if info is None else np.array(info, dtype=float),
            converged=bool(report["converged"]),
            n_iter=int(report["n_iter"]),
            quad_order=int(report.get("quad_order", DEFAULT_QUAD_ORDER)),
            sigma_eta_mme=report.get("sigma_eta_mme"),
        )


def _theta_natural(params: ModelParams) -> np.ndarray:
    return np.concatenate([params.alpha, params.beta, [params.sigma_eta, params.sigma_eps]])


def default_init(data: InterlabDataset) -> ModelParams:
    sigma_eps, alpha = mme_zero_level(data)
    if np.any(np.isnan(alpha)):
        raise InsufficientDataError("every lab needs blank replicates")
    beta = lab_slopes(data)
    sigma_eta = mme_sigma_eta(data, sigma_eps, alpha, beta)
    return ModelParams(alpha, beta, sigma_eta, sigma_eps, labs=data.labs)


def _tau_floor(data: InterlabDataset) -> float:
    scale = float(np.max(np.abs(data.y))) if data.n_obs else 1.0
    return math.log(max(scale, 1e-300) * 1e-9)


def fit_mle(
    data: InterlabDataset,
    init: ModelParams | None = None,
    quad_order: int = DEFAULT_QUAD_ORDER,
    maxit: int = 200,
    tol: float = 1e-12,
    info: bool = True,
) -> FitResult:
    """Maximize the integrated likelihood.

    The optimizer works on ``(alpha, beta, sigma_eta, log sigma_eps)``; the
    likelihood is even in ``sigma_eta`` so its sign is dropped at the end.
    A start exactly at ``sigma_eta = 0`` is a stationary point by symmetry,
    hence the small positive floor on the starting value.
    """
    quad_order = _check_quad_order(quad_order)
    if init is None:
        init = default_init(data)
    _check_params(data, init)
    t, logw = K.gh_rule(quad_order)
    tau_min = _tau_floor(data)
    theta0 = _theta(init)
    theta0[-2] = max(abs(theta0[-2]), 0.02)
    if not np.isfinite(theta0[-1]):
        theta0[-1] = tau_min
    theta, ll, converged, n_iter = K.newton_fit(theta0, data.y, data.x, data.lab, data.q, t, logw, tau_min, maxit, tol)
    params = ModelParams(
        theta[: data.q], theta[data.q : 2 * data.q], abs(theta[-2]), math.exp(theta[-1]), labs=data.labs
    )
    obs_info = observed_information(data, params, quad_order) if (converged and info) else None
    mme = float(init.sigma_eta)
    return FitResult(params, float(ll), obs_info, bool(converged), int(n_iter), quad_order, mme)


def observed_information(data: InterlabDataset, params: ModelParams, quad_order: int = DEFAULT_QUAD_ORDER) -> np.ndarray:
    """Negative Hessian by central differences of the analytic gradient."""
    theta = _theta_natural(params)
    n = theta.size
    info = np.empty((n, n))
    for k in range(n):
        h = 1e-4 * (1.0 + abs(theta[k]))
        if k == n - 1:
            h = min(h, 0.5 * theta[k])
        cols = []
        for sign in (1.0, -1.0):
            th = theta.copy()
            th[k] += sign * h
            p = ModelParams(th[: data.q], th[data.q : 2 * data.q], abs(th[-2]), th[-1], labs=params.labs)
            _, g = loglik_derivatives(data, p, quad_order)
            if k == n - 2 and th[-2] < 0:
                g[-2] = -g[-2]
            cols.append(g)
        info[:, k] = -(cols[0] - cols[1]) / (2 * h)
    return 0.5 * (info + info.T)


def refit_arrays(y, template: InterlabDataset, init: ModelParams, quad_order: int = DEFAULT_QUAD_ORDER, maxit: int = 100):
    """MLE on responses ``y`` laid out like ``template``; no information matrix.

    Returns ``(params, converged)``.  Used by resampling loops where building
    a dataset object per replicate would dominate the cost.
    """
    t, logw = K.gh_rule(quad_order)
    theta0 = _theta(init)
    theta0[-2] = max(abs(theta0[-2]), 0.02)
    tau_min = math.log(max(float(np.max(np.abs(y))), 1e-300) * 1e-9)
    theta0[-1] = max(theta0[-1], tau_min) if np.isfinite(theta0[-1]) else tau_min
    theta, _, converged, _ = K.newton_fit(
        theta0, np.ascontiguousarray(y, dtype=float), template.x, template.lab, template.q, t, logw, tau_min, maxit, 1e-12
    )
    q = template.q
    params = ModelParams(theta[:q], theta[q : 2 * q], abs(theta[-2]), math.exp(theta[-1]), labs=template.labs)
    return params, bool(converged)
