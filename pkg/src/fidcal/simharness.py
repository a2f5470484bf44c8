"""Monte Carlo coverage and point-estimation experiments.

A :class:`Scenario` fixes the generating model, the training and test
layouts, sample sizes, methods and the root seed.  :func:`run_scenario`
simulates independent replicates, computes every requested interval and
point estimate, and reduces them into a :class:`MetricsTable`.
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from . import calibrate as cal
from . import estimation as est
from . import fiducial as fid
from . import rng as _rng
from .errors import ConfigurationError, FidcalError
from .model import Design, ModelParams, QueryDesign, simulate_dataset, simulate_query

METHOD_TAGS = cal.METHODS
ESTIMATORS = ("fiducial_mode", "mle")


@dataclass(frozen=True)
class Scenario:
    name: str
    params: ModelParams
    design: Design
    query_design: QueryDesign
    concentrations: tuple[float, ...]
    n_datasets: int = 500
    n_fiducial: int = 2000
    n_boot: int = 1000
    methods: tuple[str, ...] = METHOD_TAGS
    seed: int = 0
    level: float = 0.95
    plug_in: str = "mme"
    truncate: bool = False
    n_mc_mme: int = 200

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHOD_TAGS]
        if bad:
            raise ConfigurationError(f"unknown methods {bad}; valid: {list(METHOD_TAGS)}")
        if self.n_datasets < 1:
            raise ConfigurationError("n_datasets must be positive")
        if "bootstrap" in self.methods and self.n_boot < 200:
            raise ConfigurationError("n_boot must be at least 200")
        if not 0 < self.level < 1:
            raise ConfigurationError("level must lie in (0, 1)")
        if self.plug_in not in ("mme", "mle"):
            raise ConfigurationError("plug_in must be 'mme' or 'mle'")
        if any(c < 0 for c in self.concentrations):
            raise ConfigurationError("true concentrations must be nonnegative")
        if self.design.n_labs != self.params.q:
            raise ConfigurationError("design and params disagree on the number of labs")
        _rng.check_seed(self.seed)

    def with_overrides(self, **kw) -> "Scenario":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        reps = self.design.replicates
        return {
            "name": self.name,
            "params": self.params.to_dict(),
            "design": {
                "concentrations": list(map(float, self.design.concentrations)),
                "replicates": reps if isinstance(reps, int) else [list(r) for r in reps],
            },
            "query_design": {
                "labs": list(self.query_design.labs),
                "replicates": self.query_design.replicates
                if isinstance(self.query_design.replicates, int)
                else list(self.query_design.replicates),
            },
            "concentrations": list(map(float, self.concentrations)),
            "n_datasets": self.n_datasets,
            "n_fiducial": self.n_fiducial,
            "n_boot": self.n_boot,
            "methods": list(self.methods),
            "seed": self.seed,
            "level": self.level,
            "plug_in": self.plug_in,
            "truncate": self.truncate,
            "n_mc_mme": self.n_mc_mme,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            params = ModelParams.from_dict(d["params"])
            dd = d["design"]
            reps = dd.get("replicates", 5)
            design = Design(
                tuple(dd["concentrations"]),
                reps if isinstance(reps, int) else tuple(map(tuple, reps)),
                labs=params.labs,
            )
            qd = d["query_design"]
            qreps = qd.get("replicates", 1)
            query_design = QueryDesign(tuple(map(str, qd["labs"])), qreps if isinstance(qreps, int) else tuple(qreps))
            rest = {k: d[k] for k in (
                "n_datasets", "n_fiducial", "n_boot", "seed", "level", "plug_in", "truncate", "n_mc_mme"
            ) if k in d}
            if "methods" in d:
                rest["methods"] = tuple(d["methods"])
            return cls(d.get("name", "custom"), params, design, query_design, tuple(d["concentrations"]), **rest)
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed scenario: {exc}") from None

    @classmethod
    def from_json(cls, path) -> "Scenario":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"scenario file is not valid JSON: {exc}") from None


def _preset(name: str) -> Scenario:
    small = name.endswith("A")
    if small:
        params = ModelParams.uniform(3, 1.0, 1.0, 0.1, 1.0)
        conc = (0.0, 10.0, 30.0)
        test = (5.0, 20.0, 50.0)
    else:
        params = ModelParams.uniform(10, 0.0, 1.0, 0.1, 1.0)
        conc = tuple(float(c) for c in range(0, 45, 5))
        test = tuple(float(c) for c in range(0, 45, 5)) + (50.0,)
    if name.startswith("1"):
        qd = QueryDesign(("1",), 5)
    elif small:
        qd = QueryDesign(("1", "2", "3"), 1)
    else:
        qd = QueryDesign(tuple(str(i) for i in range(1, 7)), 1)
    design = Design(conc, 5, labs=params.labs)
    return Scenario(name, params, design, qd, test)


PRESETS = ("1.A", "2.A", "1.B", "2.B")
COVER_TOL = 1e-9


def get_preset(name: str, **overrides) -> Scenario:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
    return _preset(name).with_overrides(**overrides) if overrides else _preset(name)


# -- metrics -------------------------------------------------------------------------------


def point_metrics(estimates, truth: float) -> tuple[float, float, float]:
    """Bias, absolute bias and RMSE, divided by ``truth`` when it is positive."""
    e = np.asarray(estimates, dtype=float)
    if e.size == 0:
        raise ConfigurationError("point_metrics needs at least one estimate")
    d = e - truth
    out = (float(d.mean()), float(np.abs(d).mean()), float(math.sqrt(np.mean(d * d))))
    if truth > 0:
        out = tuple(v / truth for v in out)
    return out


@dataclass
class MetricsTable:
    scenario: Scenario
    intervals: list[dict]
    points: list[dict]
    n_replicates: int
    n_failed_replicates: int
    fiducial_failure_rate: float
    timings: dict
    failures: list[str] = field(default_factory=list)

    def interval_row(self, conc: float, method: str) -> dict:
        for r in self.intervals:
            if r["concentration"] == conc and r["method"] == method:
                return r
        raise KeyError((conc, method))

    def point_row(self, conc: float, estimator: str) -> dict:
        for r in self.points:
            if r["concentration"] == conc and r["estimator"] == estimator:
                return r
        raise KeyError((conc, estimator))

    def write(self, out_dir) -> dict[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "intervals": os.path.join(out_dir, "intervals.csv"),
            "points": os.path.join(out_dir, "points.csv"),
            "manifest": os.path.join(out_dir, "manifest.json"),
        }
        _write_csv(paths["intervals"], self.intervals)
        _write_csv(paths["points"], self.points)
        with open(paths["manifest"], "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
        return paths

    def manifest(self) -> dict:
        import numba
        import scipy

        return {
            "schema_version": est.SCHEMA_VERSION,
            "kind": "simulation",
            "scenario": self.scenario.to_dict(),
            "seed": self.scenario.seed,
            "n_replicates": self.n_replicates,
            "n_failed_replicates": self.n_failed_replicates,
            "fiducial_failure_rate": self.fiducial_failure_rate,
            "timings": self.timings,
            "versions": {
                "fidcal": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "numba": numba.__version__,
            },
        }


def _write_csv(path, rows):
    cols = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# -- one replicate ----------------------------------------------------------------------------


def _limits(iv) -> tuple[float, float, float]:
    return (iv.lower, iv.upper, float(iv.empty))


def run_replicate(scenario: Scenario, index: int) -> dict:
    """All intervals and point estimates for replicate ``index``.

    The replicate seed is derived from the scenario seed and the index only,
    so results do not depend on how replicates are distributed.
    """
    sc = scenario
    seed = _rng.child_seed(sc.seed, _rng.REPLICATE, index)
    data = simulate_dataset(sc.params, sc.design, seed)
    query = simulate_query(sc.params, sc.query_design, sc.concentrations, seed)
    uids = query.unknowns
    timings = {}
    res = {"index": index, "intervals": {}, "points": {}, "timings": timings}

    # the likelihood fit is always needed for the MLE point estimate
    t0 = time.perf_counter()
    fit = est.fit_mle(data, info="wald_mle" in sc.methods)
    timings["fit_mle"] = time.perf_counter() - t0
    if not fit.converged:
        raise FidcalError("likelihood fit did not converge")
    res["points"]["mle"] = list(cal.mle_concentration(query, fit).values())

    if "fiducial_hdi" in sc.methods:
        t0 = time.perf_counter()
        sig = est.fit_mme(data).sigma_eta if sc.plug_in == "mme" else fit.params.sigma_eta
        draws = fid.draw_parameter_fiducials(data, sig, sc.n_fiducial, seed, keep_aux=False)
        samples = fid.concentration_pivots(query, draws, seed, sc.truncate)
        ivs = [fid.hdi(samples[u], sc.level) for u in uids]
        timings["fiducial_hdi"] = time.perf_counter() - t0
        res["intervals"]["fiducial_hdi"] = [_limits(iv) for iv in ivs]
        res["points"]["fiducial_mode"] = [iv.point for iv in ivs]
        res["fiducial_failed"] = draws.n_failed
    if "wald_mle" in sc.methods:
        t0 = time.perf_counter()
        w = cal.wald_ci_concentration(query, fit, sc.level, "mle")
        timings["wald_mle"] = time.perf_counter() - t0
        res["intervals"]["wald_mle"] = [_limits(w[u]) for u in uids]
    if "wald_mme" in sc.methods:
        t0 = time.perf_counter()
        mf = cal.moment_fit(data, sc.n_mc_mme, seed)
        w = cal.wald_ci_concentration(query, mf, sc.level, "mme")
        timings["wald_mme"] = time.perf_counter() - t0
        res["intervals"]["wald_mme"] = [_limits(w[u]) for u in uids]
    if "bootstrap" in sc.methods:
        t0 = time.perf_counter()
        b = cal.bootstrap_ci_concentration(query, fit, data, sc.n_boot, sc.level, seed)
        timings["bootstrap"] = time.perf_counter() - t0
        res["intervals"]["bootstrap"] = [_limits(b[u]) for u in uids]
    return res


def _safe_replicate(args):
    sc, i = args
    try:
        return run_replicate(sc, i)
    except (FidcalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return {"index": i, "error": f"{type(exc).__name__}: {exc}"}


def run_scenario(scenario: Scenario, n_jobs: int = 1, progress=None) -> MetricsTable:
    """Run every replicate and reduce to coverage, width and point metrics.

    Replicates that raise are excluded and counted; more than 20% failures
    aborts the run.
    """
    sc = scenario
    t_start = time.perf_counter()
    tasks = [(sc, i) for i in range(sc.n_datasets)]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            results = list(ex.map(_safe_replicate, tasks, chunksize=max(1, len(tasks) // (4 * n_jobs))))
    else:
        results = []
        for t in tasks:
            results.append(_safe_replicate(t))
            if progress is not None:
                progress(t[1] + 1, sc.n_datasets)
    results.sort(key=lambda r: r["index"])
    failed = [r for r in results if "error" in r]
    ok = [r for r in results if "error" not in r]
    if len(failed) > 0.2 * len(results):
        raise FidcalError(f"{len(failed)} of {len(results)} replicates failed; first: {failed[0]['error']}")
    return _reduce(sc, ok, failed, time.perf_counter() - t_start)


def _reduce(sc: Scenario, ok: list[dict], failed: list[dict], wall: float) -> MetricsTable:
    conc = list(sc.concentrations)
    rows, prows = [], []
    m = len(ok)
    for method in [mm for mm in METHOD_TAGS if mm in sc.methods]:
        lims = np.array([r["intervals"][method] for r in ok], dtype=float).reshape(m, len(conc), 3)
        for k, c in enumerate(conc):
            lo, hi, empty = lims[:, k, 0], lims[:, k, 1], lims[:, k, 2] > 0
            tol = COVER_TOL * max(1.0, abs(c))  # collapsed intervals can miss by an ulp
            cov = float(np.mean((lo - tol <= c) & (c <= hi + tol) & ~empty))
            rows.append({
                "concentration": c,
                "method": method,
                "avg_lower": float(lo.mean()),
                "avg_upper": float(hi.mean()),
                "avg_width": float((hi - lo).mean()),
                "coverage": cov,
                "coverage_se": math.sqrt(cov * (1 - cov) / m),
                "n_empty": int(empty.sum()),
                "n": m,
            })
    for estimator in ESTIMATORS:
        if not all(estimator in r["points"] for r in ok):
            continue
        vals = np.array([r["points"][estimator] for r in ok], dtype=float)
        for k, c in enumerate(conc):
            b, ab, rmse = point_metrics(vals[:, k], c)
            prows.append({
                "concentration": c,
                "estimator": estimator,
                "relative": c > 0,
                "bias": b,
                "abs_bias": ab,
                "rmse": rmse,
                "n": m,
            })
    timings = {"wall": wall}
    for r in ok:
        for k, v in r["timings"].items():
            timings[k] = timings.get(k, 0.0) + v
    nf = sum(r.get("fiducial_failed", 0) for r in ok)
    rate = nf / (m * sc.n_fiducial) if m and "fiducial_hdi" in sc.methods else 0.0
    return MetricsTable(sc, rows, prows, m, len(failed), rate, timings, [f["error"] for f in failed])
