"""``fidcal`` command-line front end.

Exit codes: 0 success, 2 input or validation error, 3 numerical failure,
4 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__
from . import calibrate as cal
from . import estimation as est
from . import fiducial as fid
from . import simharness as sim
from .errors import (
    ConfigurationError,
    DataError,
    DomainError,
    FidcalError,
    InsufficientDataError,
    QueryError,
    UndefinedPivotError,
)
from .model import CalibrationQuery, Design, InterlabDataset, ModelParams, calibration_band, simulate_dataset

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_CONFIG = 4

METHOD_FLAGS = {
    "fiducial": "fiducial_hdi",
    "bootstrap": "bootstrap",
    "wald-mle": "wald_mle",
    "wald-mme": "wald_mme",
}

_INPUT_ERRORS = (DataError, QueryError, DomainError, InsufficientDataError, UndefinedPivotError, OSError)


class _ConfigParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


class NumericalFailure(FidcalError):
    """The fit or solver did not converge."""


# -- helpers -------------------------------------------------------------------------------


def _level(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"level must be a number, got {text!r}") from None
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError("level must lie in (0, 1)")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return v


def parse_methods(values) -> tuple[str, ...]:
    """Map ``--method`` values (repeatable, comma separated, or ``all``)."""
    names = []
    for v in values or ["fiducial"]:
        names.extend(p.strip() for p in v.split(",") if p.strip())
    if "all" in names:
        return cal.METHODS
    out = []
    for n in names:
        if n not in METHOD_FLAGS:
            raise ConfigurationError(f"unknown method {n!r}; choose from {', '.join([*METHOD_FLAGS, 'all'])}")
        m = METHOD_FLAGS[n]
        if m not in out:
            out.append(m)
    if "fiducial_hdi" not in out:
        out.insert(0, "fiducial_hdi")
    return tuple(out)


def _stamp(report: dict) -> dict:
    report = dict(report)
    report["created"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    report["fidcal_version"] = __version__
    return report


def _write_json(path: str, obj: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _clean(obj):
    # JSON has no NaN/inf
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def safe_name(uid: str) -> str:
    """File-name-safe rendering of an identifier."""
    return re.sub(r"[^A-Za-z0-9._-]+", "_", str(uid)) or "_"


def _load_fit(path: str, data: InterlabDataset | None = None) -> est.FitResult:
    try:
        with open(path, encoding="utf-8") as fh:
            report = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a JSON fit report ({exc})") from None
    if report.get("kind") != "fit":
        raise DataError(f"{path}: not a fit report")
    if report.get("schema_version") != est.SCHEMA_VERSION:
        raise DataError(f"{path}: schema_version {report.get('schema_version')} != {est.SCHEMA_VERSION}")
    try:
        fit = est.FitResult.from_report(report)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed fit report ({exc})") from None
    if data is not None and tuple(fit.params.labs) != tuple(data.labs):
        raise DataError(f"fit report labs {list(fit.params.labs)} do not match data labs {list(data.labs)}")
    return fit


def _require_converged(fit: est.FitResult) -> None:
    if not fit.converged:
        raise NumericalFailure(f"maximum likelihood fit did not converge after {fit.n_iter} iterations")


# -- commands ------------------------------------------------------------------------------


def cmd_fit(args) -> int:
    data = InterlabDataset.from_csv(args.data)
    fit = est.fit_mle(data, quad_order=args.quad_order)
    os.makedirs(args.out, exist_ok=True)
    report = fit.to_report()
    report.update(
        q=data.q,
        r=data.r,
        n_obs=data.n_obs,
        concentrations=[float(c) for c in data.concentrations],
        sigma_eta_mme=report.get("sigma_eta_mme"),
    )
    path = os.path.join(args.out, "fit.json")
    _write_json(path, _stamp(_clean(report)))
    _require_converged(fit)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    methods = parse_methods(args.method)
    data = InterlabDataset.from_csv(args.data)
    query = CalibrationQuery.from_csv(args.query)
    query.check_labs(data.labs)
    fit = None
    if args.fit:
        fit = _load_fit(args.fit, data)
    elif args.plug_in == "mle" or any(m in methods for m in ("bootstrap", "wald_mle")):
        fit = est.fit_mle(data)
    if fit is not None:
        _require_converged(fit)
    report = cal.run_calibration(
        data, query, methods, level=args.level, n_fiducial=args.n_fiducial, n_boot=args.n_boot,
        seed=args.seed, fit=fit, plug_in=args.plug_in, truncate=args.truncate,
    )
    os.makedirs(args.out, exist_ok=True)
    out = report.to_dict()
    out["seed"] = args.seed
    out["truncate"] = args.truncate
    out["methods"] = list(methods)
    files = {}
    for uid, sample in report.samples.items():
        tag = safe_name(uid)
        dpath = os.path.join(args.out, f"density_{tag}.csv")
        spath = os.path.join(args.out, f"samples_{tag}.csv")
        fid.kde(sample).to_csv(dpath)
        sample.to_csv(spath, report.draw_status)
        files[uid] = {"density": os.path.basename(dpath), "samples": os.path.basename(spath)}
    out["files"] = files
    path = os.path.join(args.out, "calibration.json")
    _write_json(path, _stamp(_clean(out)))
    for uid in query.unknowns:
        ivs = ", ".join(
            f"{iv.method} [{iv.lower:.4g}, {iv.upper:.4g}]" for iv in report.intervals[uid]
        )
        print(f"{uid}: mode {report.points[uid]['fiducial_mode']:.4g}; {ivs}")
    print(f"wrote {path}")
    return EXIT_OK


def band_inside(data: InterlabDataset, params: ModelParams, level: float, n_mc: int, seed: int):
    """Per-lab fraction of observations inside the pointwise band."""
    inside, total = {}, 0
    hits = 0
    for i, lab in enumerate(data.labs):
        sel = data.lab == i
        x, y = data.x[sel], data.y[sel]
        lo, hi = calibration_band(params, lab, x, level, n_mc, seed)
        tol = 1e-9 * max(1.0, float(np.max(np.abs(y))))
        ok = (y >= lo - tol) & (y <= hi + tol)
        inside[lab] = float(ok.mean())
        hits += int(ok.sum())
        total += ok.size
    return inside, hits / total


def cmd_gof(args) -> int:
    data = InterlabDataset.from_csv(args.data)
    fit = _load_fit(args.fit, data)
    os.makedirs(args.out, exist_ok=True)
    grid = np.union1d(np.linspace(0.0, float(data.concentrations.max()), args.n_grid), data.concentrations)
    files = {}
    for lab in data.labs:
        lo, hi = calibration_band(fit.params, lab, grid, args.level, args.n_mc, args.seed)
        path = os.path.join(args.out, f"band_{safe_name(lab)}.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "lower", "upper"])
            for row in zip(grid, lo, hi):
                w.writerow([repr(float(v)) for v in row])
        files[lab] = os.path.basename(path)
    per_lab, overall = band_inside(data, fit.params, args.level, args.n_mc, args.seed)
    report = {
        "schema_version": est.SCHEMA_VERSION,
        "kind": "gof",
        "level": args.level,
        "seed": args.seed,
        "n_mc": args.n_mc,
        "inside_fraction": overall,
        "inside_fraction_by_lab": per_lab,
        "files": files,
    }
    path = os.path.join(args.out, "gof.json")
    _write_json(path, _stamp(report))
    print(f"inside fraction {overall:.3f}; wrote {path}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if bool(args.preset) == bool(args.scenario):
        raise ConfigurationError("give exactly one of --preset or --scenario")
    sc = sim.get_preset(args.preset) if args.preset else sim.Scenario.from_json(args.scenario)
    overrides = {"seed": args.seed}
    for key in ("n_datasets", "n_fiducial", "n_boot", "level"):
        v = getattr(args, key)
        if v is not None:
            overrides[key] = v
    if args.method:
        overrides["methods"] = parse_methods(args.method)
    if args.truncate:
        overrides["truncate"] = True
    if args.plug_in:
        overrides["plug_in"] = args.plug_in
    sc = sc.with_overrides(**overrides)

    def progress(done, total):
        if args.verbose:
            print(f"{done}/{total}", file=sys.stderr)

    table = sim.run_scenario(sc, n_jobs=args.jobs, progress=progress)
    paths = table.write(args.out)
    for row in table.intervals:
        print(
            f"{row['method']:>13} x={row['concentration']:<6g} coverage {row['coverage']:.3f} "
            f"width {row['avg_width']:.3f}"
        )
    print(f"wrote {paths['manifest']}")
    return EXIT_OK


# synthetic stand-ins for the two interlaboratory data layouts; values are invented
FIXTURES = {
    "cadmium": {
        "params": ModelParams(
            alpha=[0.4, -0.3, 0.8, 0.1, -0.6],
            beta=[1.02, 0.97, 1.05, 0.99, 0.94],
            sigma_eta=0.04,
            sigma_eps=1.1,
            labs=("1", "2", "3", "4", "5"),
        ),
        "concentrations": (0.0, 20.0, 100.0),
    },
    "copper": {
        "params": ModelParams(
            alpha=[0.3, -0.2, 0.5, 0.0, -0.4, 0.2, 0.6],
            beta=[0.98, 1.03, 0.95, 1.01, 1.04, 0.97, 1.0],
            sigma_eta=0.03,
            sigma_eps=0.6,
            labs=("1", "2", "3", "4", "5", "6", "7"),
        ),
        "concentrations": (0.0, 2.0, 10.0, 50.0, 200.0),
    },
}


def make_fixture(name: str, seed: int, replicates: int = 5):
    """Full dataset plus a train/query split holding out the last replicate.

    The query uses the concentration as ``unknown_id``.
    """
    if name not in FIXTURES:
        raise ConfigurationError(f"unknown fixture {name!r}; choose from {', '.join(FIXTURES)}")
    spec = FIXTURES[name]
    params = spec["params"]
    full = simulate_dataset(params, Design(spec["concentrations"], replicates, labs=params.labs), seed)
    train, query = [], []
    for lab, c, rep, y in full.to_records():
        if rep < replicates:
            train.append((lab, c, rep, y))
        else:
            query.append((lab, f"{c:g}", 1, y))
    return full, InterlabDataset.from_records(train), CalibrationQuery.from_records(query)


def cmd_fixture(args) -> int:
    full, train, query = make_fixture(args.name, args.seed)
    os.makedirs(args.out, exist_ok=True)
    paths = {
        "data": os.path.join(args.out, f"{args.name}.csv"),
        "train": os.path.join(args.out, f"{args.name}_train.csv"),
        "query": os.path.join(args.out, f"{args.name}_query.csv"),
    }
    full.to_csv(paths["data"])
    train.to_csv(paths["train"])
    query.to_csv(paths["query"])
    for p in paths.values():
        print(f"wrote {p}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _ConfigParser(prog="fidcal", description="Fiducial calibration for interlaboratory data.")
    p.add_argument("--version", action="version", version=f"fidcal {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_ConfigParser)

    f = sub.add_parser("fit", help="maximum likelihood fit of a calibration dataset")
    f.add_argument("data", help="CSV with lab,concentration,replicate,measurement")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--quad-order", type=_positive_int, default=est.DEFAULT_QUAD_ORDER)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("calibrate", help="intervals for unknown concentrations")
    c.add_argument("data", help="training CSV")
    c.add_argument("query", help="CSV with lab,unknown_id,replicate,measurement")
    c.add_argument("--fit", help="fit report from 'fidcal fit'; refitted when omitted and needed")
    c.add_argument("--method", action="append", help="fiducial|bootstrap|wald-mle|wald-mme|all")
    c.add_argument("--level", type=_level, default=0.95)
    c.add_argument("--n-fiducial", type=_positive_int, default=10000)
    c.add_argument("--n-boot", type=_positive_int, default=1000)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--plug-in", choices=("mme", "mle"), default="mme")
    _truncate_flags(c)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    g = sub.add_parser("gof", help="pointwise calibration bands and inside fraction")
    g.add_argument("data")
    g.add_argument("--fit", required=True)
    g.add_argument("--level", type=_level, default=0.95)
    g.add_argument("--n-grid", type=_positive_int, default=101)
    g.add_argument("--n-mc", type=_positive_int, default=20000)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gof)

    s = sub.add_parser("simulate", help="Monte Carlo coverage study")
    s.add_argument("--preset", help=f"one of {', '.join(sim.PRESETS)}")
    s.add_argument("--scenario", help="scenario JSON file")
    s.add_argument("--n-datasets", type=_positive_int)
    s.add_argument("--n-fiducial", type=_positive_int)
    s.add_argument("--n-boot", type=_positive_int)
    s.add_argument("--level", type=_level)
    s.add_argument("--method", action="append")
    s.add_argument("--plug-in", choices=("mme", "mle"))
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--jobs", type=_positive_int, default=1)
    s.add_argument("--verbose", action="store_true")
    _truncate_flags(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    x = sub.add_parser("fixture", help="write a synthetic cadmium- or copper-format dataset")
    x.add_argument("name", choices=tuple(FIXTURES))
    x.add_argument("--seed", type=int, required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_fixture)
    return p


def _truncate_flags(p):
    grp = p.add_mutually_exclusive_group()
    grp.add_argument(
        "--truncate", dest="truncate", action="store_true",
        help="truncate concentration pivots at zero",
    )
    grp.add_argument(
        "--no-truncate", dest="truncate", action="store_false",
        help="keep pivots untruncated and restrict the HDI to [0, inf) (default)",
    )
    p.set_defaults(truncate=False)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"fidcal: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _INPUT_ERRORS as exc:
        print(f"fidcal: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FidcalError as exc:
        print(f"fidcal: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FloatingPointError as exc:
        print(f"fidcal: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
