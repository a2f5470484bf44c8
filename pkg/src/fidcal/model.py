"""Interlaboratory data, the two-error calibration model and its moment laws.

A response from lab ``i`` at true concentration ``x`` is

    y = alpha_i + beta_i * x * exp(sigma_eta * z) + sigma_eps * z'

with ``z, z'`` independent standard normals.  The additive error dominates near
zero concentration and the lognormal multiplicative error dominates at high
concentration.
"""

from __future__ import annotations

import csv
import io
import math
import os
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import rng as _rng
from .errors import ConfigurationError, DataError, DomainError, QueryError

DATASET_COLUMNS = ("lab", "concentration", "replicate", "measurement")
QUERY_COLUMNS = ("lab", "unknown_id", "replicate", "measurement")


def _default_labs(q: int) -> tuple[str, ...]:
    return tuple(str(i + 1) for i in range(q))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Per-lab intercepts and slopes plus the shared error scales."""

    alpha: np.ndarray
    beta: np.ndarray
    sigma_eta: float
    sigma_eps: float
    labs: tuple[str, ...] | None = None

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float).reshape(-1)
        beta = np.array(self.beta, dtype=float).reshape(-1)
        if alpha.size < 1 or alpha.shape != beta.shape:
            raise ConfigurationError(
                f"alpha and beta must have the same length >= 1, got {alpha.size} and {beta.size}"
            )
        if not (self.sigma_eta >= 0 and self.sigma_eps >= 0):
            raise ConfigurationError("sigma_eta and sigma_eps must be >= 0")
        labs = _default_labs(alpha.size) if self.labs is None else tuple(str(l) for l in self.labs)
        if len(labs) != alpha.size:
            raise ConfigurationError("labs must name every intercept")
        alpha.flags.writeable = False
        beta.flags.writeable = False
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma_eta", float(self.sigma_eta))
        object.__setattr__(self, "sigma_eps", float(self.sigma_eps))
        object.__setattr__(self, "labs", labs)

    @property
    def q(self) -> int:
        return self.alpha.size

    def lab_index(self, lab: int | str) -> int:
        if isinstance(lab, (int, np.integer)):
            if not 0 <= lab < self.q:
                raise ConfigurationError(f"lab index {lab} out of range for q={self.q}")
            return int(lab)
        try:
            return self.labs.index(str(lab))
        except ValueError:
            raise QueryError(f"lab {lab!r} is not one of the calibrated labs {list(self.labs)}") from None

    def to_dict(self) -> dict:
        return {
            "labs": list(self.labs),
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "sigma_eta": self.sigma_eta,
            "sigma_eps": self.sigma_eps,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelParams":
        return cls(d["alpha"], d["beta"], d["sigma_eta"], d["sigma_eps"], labs=d.get("labs"))

    @classmethod
    def uniform(cls, q: int, alpha: float, beta: float, sigma_eta: float, sigma_eps: float) -> "ModelParams":
        return cls(np.full(q, alpha), np.full(q, beta), sigma_eta, sigma_eps)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.labs == other.labs
            and np.array_equal(self.alpha, other.alpha)
            and np.array_equal(self.beta, other.beta)
            and self.sigma_eta == other.sigma_eta
            and self.sigma_eps == other.sigma_eps
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class InterlabDataset:
    """Calibration measurements ``y[i, j, k]`` for lab i, level j, replicate k.

    ``measurements`` maps ``(lab, j)`` to the replicate values of that cell,
    where ``j`` indexes ``concentrations``.  Cells may be missing and replicate
    counts may differ between cells.  The lowest concentration must be 0.
    """

    labs: tuple[str, ...]
    concentrations: np.ndarray
    measurements: Mapping[tuple[str, int], np.ndarray]
    _flat: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        labs = tuple(str(l) for l in self.labs)
        if len(labs) < 1 or len(set(labs)) != len(labs):
            raise DataError("lab identifiers must be non-empty and distinct")
        conc = np.array(self.concentrations, dtype=float).reshape(-1)
        if conc.size < 1 or not np.all(np.isfinite(conc)):
            raise DataError("concentrations must be finite")
        if np.any(conc < 0):
            raise DataError("concentrations must be nonnegative")
        if np.any(np.diff(conc) <= 0):
            raise DataError("concentrations must be distinct and sorted ascending")
        if conc[0] != 0.0:
            raise DataError(
                "zero-concentration (blank) measurements are required: the lowest concentration level must be 0"
            )
        conc.flags.writeable = False

        cells = {}
        for (lab, j), values in self.measurements.items():
            lab = str(lab)
            if lab not in labs:
                raise DataError(f"measurement cell references unknown lab {lab!r}")
            if not 0 <= int(j) < conc.size:
                raise DataError(f"concentration index {j} out of range")
            arr = np.array(values, dtype=float).reshape(-1)
            if arr.size < 1:
                raise DataError(f"cell ({lab}, {conc[int(j)]:g}) has no replicates")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"cell ({lab}, {conc[int(j)]:g}) contains non-finite values")
            arr.flags.writeable = False
            cells[(lab, int(j))] = arr
        if not any(j == 0 for (_, j) in cells):
            raise DataError("zero-concentration (blank) measurements are required but none were supplied")

        lab_pos = {lab: i for i, lab in enumerate(labs)}
        keys = sorted(cells, key=lambda c: (lab_pos[c[0]], c[1]))
        lab_idx = np.concatenate([np.full(cells[c].size, lab_pos[c[0]]) for c in keys]).astype(np.int64)
        level_idx = np.concatenate([np.full(cells[c].size, c[1]) for c in keys]).astype(np.int64)
        y = np.concatenate([cells[c] for c in keys])
        counts = np.zeros((len(labs), conc.size), dtype=np.int64)
        for (lab, j), arr in cells.items():
            counts[lab_pos[lab], j] = arr.size
        flat = {"lab": lab_idx, "level": level_idx, "x": conc[level_idx], "y": y, "counts": counts}
        for a in flat.values():
            a.flags.writeable = False
        object.__setattr__(self, "labs", labs)
        object.__setattr__(self, "concentrations", conc)
        object.__setattr__(self, "measurements", cells)
        object.__setattr__(self, "_flat", flat)

    # flattened views, ordered by (lab, level, replicate)
    @property
    def lab(self) -> np.ndarray:
        return self._flat["lab"]

    @property
    def level(self) -> np.ndarray:
        return self._flat["level"]

    @property
    def x(self) -> np.ndarray:
        return self._flat["x"]

    @property
    def y(self) -> np.ndarray:
        return self._flat["y"]

    @property
    def counts(self) -> np.ndarray:
        """Replicate counts ``N[i, j]`` (0 for missing cells)."""
        return self._flat["counts"]

    @property
    def q(self) -> int:
        return len(self.labs)

    @property
    def r(self) -> int:
        return self.concentrations.size

    @property
    def n_obs(self) -> int:
        return self.y.size

    def cell(self, lab: str | int, j: int) -> np.ndarray:
        if isinstance(lab, (int, np.integer)):
            lab = self.labs[lab]
        return self.measurements.get((str(lab), j), np.empty(0))

    def with_measurements(self, y: np.ndarray) -> "InterlabDataset":
        """Same layout with the flattened responses replaced by ``y``."""
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise DataError("replacement responses must match the dataset layout")
        cells, pos = {}, 0
        for i, lab in enumerate(self.labs):
            for j in range(self.r):
                n = self.counts[i, j]
                if n:
                    cells[(lab, j)] = y[pos : pos + n]
                    pos += n
        return InterlabDataset(self.labs, self.concentrations, cells)

    def __eq__(self, other):
        if not isinstance(other, InterlabDataset):
            return NotImplemented
        return (
            self.labs == other.labs
            and np.array_equal(self.concentrations, other.concentrations)
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.y, other.y)
        )

    __hash__ = None

    # -- construction and I/O ------------------------------------------------

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, float, int, float]]) -> "InterlabDataset":
        """Build from ``(lab, concentration, replicate, measurement)`` rows."""
        rows = list(records)
        if not rows:
            raise DataError("dataset is empty")
        labs: list[str] = []
        seen = set()
        by_cell: dict[tuple[str, float], list[tuple[int, float]]] = {}
        for lab, conc, rep, value in rows:
            lab = str(lab)
            if lab not in labs:
                labs.append(lab)
            key = (lab, float(conc), int(rep))
            if key in seen:
                raise DataError(f"duplicate replicate {rep} for lab {lab} at concentration {conc}")
            seen.add(key)
            by_cell.setdefault((lab, float(conc)), []).append((int(rep), float(value)))
        conc = np.array(sorted({c for (_, c) in by_cell}), dtype=float)
        pos = {c: j for j, c in enumerate(conc)}
        cells = {(lab, pos[c]): np.array([v for _, v in sorted(reps)]) for (lab, c), reps in by_cell.items()}
        return cls(tuple(labs), conc, cells)

    @classmethod
    def from_csv(cls, source: str | os.PathLike | io.TextIOBase) -> "InterlabDataset":
        return cls.from_records(_read_rows(source, DATASET_COLUMNS, conc_float=True))

    def to_records(self) -> list[tuple[str, float, int, float]]:
        out = []
        for i, lab in enumerate(self.labs):
            for j in range(self.r):
                for k, v in enumerate(self.cell(lab, j)):
                    out.append((lab, float(self.concentrations[j]), k + 1, float(v)))
        return out

    def to_csv(self, path: str | os.PathLike | io.TextIOBase) -> None:
        _write_rows(path, DATASET_COLUMNS, self.to_records())


@dataclass(frozen=True, eq=False)
class CalibrationQuery:
    """New measurements of samples with unknown concentration.

    ``measurements`` maps ``(lab, unknown_id)`` to replicate responses.  Every
    lab must be one of the labs the calibration was fitted on.
    """

    labs: tuple[str, ...]
    unknowns: tuple[str, ...]
    measurements: Mapping[tuple[str, str], np.ndarray]

    def __post_init__(self):
        labs = tuple(str(l) for l in self.labs)
        unknowns = tuple(str(u) for u in self.unknowns)
        if not labs or not unknowns:
            raise DataError("a calibration query needs at least one lab and one unknown")
        cells = {}
        for (lab, uid), values in self.measurements.items():
            lab, uid = str(lab), str(uid)
            if lab not in labs or uid not in unknowns:
                raise DataError(f"query cell ({lab}, {uid}) is outside the declared labs/unknowns")
            arr = np.array(values, dtype=float).reshape(-1)
            if arr.size < 1 or not np.all(np.isfinite(arr)):
                raise DataError(f"query cell ({lab}, {uid}) must hold at least one finite value")
            arr.flags.writeable = False
            cells[(lab, uid)] = arr
        for uid in unknowns:
            if not any(u == uid for (_, u) in cells):
                raise DataError(f"unknown {uid!r} has no measurements")
        object.__setattr__(self, "labs", labs)
        object.__setattr__(self, "unknowns", unknowns)
        object.__setattr__(self, "measurements", cells)

    def observations(self, uid: str, train_labs: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """``(lab index into train_labs, y)`` arrays for one unknown."""
        self.check_labs(train_labs)
        pos = {lab: i for i, lab in enumerate(train_labs)}
        idx, ys = [], []
        for lab in self.labs:
            vals = self.measurements.get((lab, uid))
            if vals is not None:
                idx.append(np.full(vals.size, pos[lab], dtype=np.int64))
                ys.append(vals)
        return np.concatenate(idx), np.concatenate(ys)

    def check_labs(self, train_labs: Sequence[str]) -> None:
        missing = [lab for lab in self.labs if lab not in set(map(str, train_labs))]
        if missing:
            raise QueryError(f"labs {missing} are not among the calibration labs {list(train_labs)}")

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, str, int, float]]) -> "CalibrationQuery":
        rows = list(records)
        if not rows:
            raise DataError("query is empty")
        labs, unknowns, seen = [], [], set()
        cells: dict[tuple[str, str], list[tuple[int, float]]] = {}
        for lab, uid, rep, value in rows:
            lab, uid = str(lab), str(uid)
            if (lab, uid, int(rep)) in seen:
                raise DataError(f"duplicate replicate {rep} for lab {lab}, unknown {uid}")
            seen.add((lab, uid, int(rep)))
            if lab not in labs:
                labs.append(lab)
            if uid not in unknowns:
                unknowns.append(uid)
            cells.setdefault((lab, uid), []).append((int(rep), float(value)))
        return cls(
            tuple(labs),
            tuple(unknowns),
            {k: np.array([v for _, v in sorted(reps)]) for k, reps in cells.items()},
        )

    @classmethod
    def from_csv(cls, source) -> "CalibrationQuery":
        return cls.from_records(_read_rows(source, QUERY_COLUMNS, conc_float=False))

    def to_records(self) -> list[tuple[str, str, int, float]]:
        out = []
        for uid in self.unknowns:
            for lab in self.labs:
                for k, v in enumerate(self.measurements.get((lab, uid), ())):
                    out.append((lab, uid, k + 1, float(v)))
        return out

    def to_csv(self, path) -> None:
        _write_rows(path, QUERY_COLUMNS, self.to_records())


def _read_rows(source, columns, conc_float):
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="", encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = source.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("file is empty; expected header " + ",".join(columns)) from None
    if sorted(header) != sorted(columns):
        raise DataError(f"expected header {','.join(columns)}, got {','.join(header)}")
    col = {name: header.index(name) for name in columns}
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(columns):
            raise DataError(f"line {lineno}: expected {len(columns)} fields, got {len(row)}")
        try:
            second = row[col[columns[1]]].strip()
            rep = int(row[col["replicate"]])
            if rep < 1:
                raise ValueError("replicate numbers are 1-based")
            value = float(row[col["measurement"]])
            rows.append(
                (
                    row[col["lab"]].strip(),
                    float(second) if conc_float else second,
                    rep,
                    value,
                )
            )
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
        if not math.isfinite(value):
            raise DataError(f"line {lineno}: measurement must be finite")
    return rows


def _write_rows(target, columns, rows):
    def _dump(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])

    if isinstance(target, (str, os.PathLike)):
        with open(target, "w", newline="", encoding="utf-8") as fh:
            _dump(fh)
    else:
        _dump(target)


# -- designs and simulation ---------------------------------------------------


@dataclass(frozen=True)
class Design:
    """Training layout: labs, concentration grid and replicates per cell."""

    concentrations: tuple[float, ...]
    replicates: int | tuple[tuple[int, ...], ...] = 5
    labs: tuple[str, ...] | None = None
    q: int | None = None

    def counts(self) -> np.ndarray:
        q = self.n_labs
        if isinstance(self.replicates, (int, np.integer)):
            return np.full((q, len(self.concentrations)), int(self.replicates), dtype=np.int64)
        counts = np.array(self.replicates, dtype=np.int64)
        if counts.shape != (q, len(self.concentrations)):
            raise ConfigurationError(f"replicate table must be {q} x {len(self.concentrations)}")
        return counts

    @property
    def n_labs(self) -> int:
        if self.labs is not None:
            return len(self.labs)
        if self.q is None:
            raise ConfigurationError("a design needs either labs or q")
        return int(self.q)

    def lab_names(self) -> tuple[str, ...]:
        return tuple(self.labs) if self.labs is not None else _default_labs(self.n_labs)


@dataclass(frozen=True)
class QueryDesign:
    """Which labs measure each unknown sample and how many replicates each."""

    labs: tuple[str, ...]
    replicates: int | tuple[int, ...] = 1

    def counts(self) -> np.ndarray:
        if isinstance(self.replicates, (int, np.integer)):
            return np.full(len(self.labs), int(self.replicates), dtype=np.int64)
        counts = np.array(self.replicates, dtype=np.int64)
        if counts.shape != (len(self.labs),) or np.any(counts < 1):
            raise ConfigurationError("query replicate counts must be >= 1 for every lab")
        return counts


def draw_responses(alpha, beta, x, sigma_eta, sigma_eps, z_eta, z_eps):
    """The structural map from auxiliary normals to responses."""
    return alpha + beta * x * np.exp(sigma_eta * z_eta) + sigma_eps * z_eps


def simulate_dataset(params: ModelParams, design: Design, seed: int) -> InterlabDataset:
    """Simulate one calibration dataset.

    Each ``(lab, level)`` cell has its own random stream keyed by the cell
    position, so the result is a pure function of ``(params, design, seed)``.
    """
    counts = design.counts()
    q = counts.shape[0]
    if q != params.q:
        raise ConfigurationError(f"design has {q} labs but params describe {params.q}")
    conc = np.asarray(design.concentrations, dtype=float)
    labs = design.lab_names() if design.labs is not None else params.labs
    cells = {}
    for i in range(q):
        for j, x in enumerate(conc):
            n = counts[i, j]
            if n == 0:
                continue
            g = _rng.stream(seed, _rng.TRAIN, i, j)
            z = g.standard_normal((2, n))
            cells[(labs[i], j)] = draw_responses(
                params.alpha[i], params.beta[i], x, params.sigma_eta, params.sigma_eps, z[0], z[1]
            )
    return InterlabDataset(labs, conc, cells)


def simulate_query(
    params: ModelParams,
    design: QueryDesign,
    concentrations: Mapping[str, float] | Sequence[float],
    seed: int,
) -> CalibrationQuery:
    """Simulate new measurements at the given true concentrations."""
    if not isinstance(concentrations, Mapping):
        concentrations = {f"{c:g}": float(c) for c in concentrations}
    counts = design.counts()
    cells = {}
    for u, (uid, x) in enumerate(concentrations.items()):
        if x < 0:
            raise DomainError("true concentrations must be nonnegative")
        for k, lab in enumerate(design.labs):
            i = params.lab_index(lab)
            g = _rng.stream(seed, _rng.QUERY, u, k)
            z = g.standard_normal((2, counts[k]))
            cells[(str(lab), uid)] = draw_responses(
                params.alpha[i], params.beta[i], x, params.sigma_eta, params.sigma_eps, z[0], z[1]
            )
    return CalibrationQuery(tuple(map(str, design.labs)), tuple(concentrations), cells)


# -- moments and bands ---------------------------------------------------------


def response_moments(params: ModelParams, lab: int | str, x: float) -> tuple[float, float]:
    """Mean and variance of a single response from ``lab`` at concentration ``x``."""
    if x < 0:
        raise DomainError(f"concentration must be nonnegative, got {x}")
    i = params.lab_index(lab)
    w = math.exp(params.sigma_eta**2)
    mean = params.alpha[i] + params.beta[i] * x * math.sqrt(w)
    var = params.beta[i] ** 2 * x**2 * (w - 1.0) * w + params.sigma_eps**2
    return float(mean), float(var)


def calibration_band(
    params: ModelParams,
    lab: int | str,
    x_grid: Sequence[float],
    level: float = 0.95,
    n_mc: int = 20000,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise ``level`` prediction band for a single response.

    The band limits are the ``(1 -/+ level)/2`` empirical quantiles of ``n_mc``
    simulated responses at each grid point.  The same auxiliary draws are
    reused across the grid, so bands at different levels are nested.
    """
    if not 0 < level < 1:
        raise ConfigurationError("level must lie in (0, 1)")
    if n_mc < 1000:
        raise ConfigurationError("n_mc must be at least 1000")
    i = params.lab_index(lab)
    x = np.asarray(x_grid, dtype=float)
    if np.any(x < 0):
        raise DomainError("concentrations must be nonnegative")
    z = _rng.stream(seed, _rng.BAND, i).standard_normal((2, n_mc))
    sims = draw_responses(
        params.alpha[i], params.beta[i], x[:, None], params.sigma_eta, params.sigma_eps, z[0], z[1]
    )
    lo, hi = np.quantile(sims, [(1 - level) / 2, (1 + level) / 2], axis=1)
    return lo, hi
