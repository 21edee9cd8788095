"""Ingestion of daily count files, run configuration and result files."""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import io
import json
import os
import platform
import tempfile
import warnings
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .estimator import DataError, EstimateResult, ObservationSet, CovarianceEstimate
from .markov_core import AggregationMatrix
from .model_zoo import FRANCE_ESTIMATED, FRANCE_TABLE_ROWS, SIURD_LABELS, get_family

BUNDLED_FRANCE = "france_2020-03-16_04-06.csv"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def bundled_data_path(name: str = BUNDLED_FRANCE) -> Path:
    return Path(str(resources.files("latent_markov") / "data" / name))


@dataclass
class DailyCounts:
    """Parsed ``date,series,count`` file plus ``# key: value`` metadata."""

    series: dict
    metadata: dict

    @property
    def population(self) -> int | None:
        pop = self.metadata.get("population")
        return int(float(pop)) if pop is not None else None


def read_daily_counts(path) -> DailyCounts:
    text = Path(path).read_text(encoding="utf-8")
    meta = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            if key.strip():
                meta[key.strip()] = val.strip()
        elif line.strip():
            body.append(line)
    if not body:
        raise DataError(f"{path}: no data rows")
    reader = csv.DictReader(io.StringIO("\n".join(body)))
    if reader.fieldnames is None or not {"date", "series", "count"} <= set(reader.fieldnames):
        raise DataError(f"{path}: header must contain date,series,count")
    series = {}
    for n, row in enumerate(reader, start=2):
        try:
            day = dt.date.fromisoformat(row["date"].strip())
            count = int(float(row["count"]))
        except (ValueError, AttributeError) as exc:
            raise DataError(f"{path}:{n}: cannot parse row {row}") from exc
        if count < 0:
            raise DataError(f"{path}:{n}: negative count")
        name = row["series"].strip()
        if day in series.setdefault(name, {}):
            raise DataError(f"{path}:{n}: duplicate {name} on {day}")
        series[name][day] = count
    if not series:
        raise DataError(f"{path}: no data rows")
    return DailyCounts(series, meta)


@dataclass
class RunConfig:
    model: str = "siurd"
    covariate_scale: float = 1.0
    params: dict = field(default_factory=dict)
    fixed: list = field(default_factory=list)
    bounds: dict = field(default_factory=dict)
    mapping: dict = field(default_factory=lambda: {"hospitalized": "ID", "deceased_total": "D"})
    death_series: str = "total"
    flow_series: list = field(default_factory=list)
    cumulative_series: list = field(default_factory=lambda: ["deceased_total", "deceased_covid", "confirmed", "returned_home"])
    window: dict = field(default_factory=dict)
    population: int | None = None
    optimizer: dict = field(default_factory=dict)
    p1_guess: dict = field(default_factory=dict)
    output_dir: str | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    cfg = RunConfig(**data)
    if cfg.death_series not in ("total", "covid"):
        raise ConfigError("death_series must be 'total' or 'covid'")
    return cfg


def _effective_mapping(cfg: RunConfig) -> dict:
    mapping = dict(cfg.mapping)
    if cfg.death_series == "covid":
        mapping = {("deceased_covid" if k == "deceased_total" else k): v for k, v in mapping.items()}
    return mapping


def ingest(paths, config: RunConfig) -> ObservationSet:
    """Turn daily count files into observed frequencies and a selection matrix."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    series, meta = {}, {}
    for p in paths:
        dc = read_daily_counts(p)
        for name, vals in dc.series.items():
            if name in series:
                raise DataError(f"series {name!r} appears in more than one file")
            series[name] = vals
        meta.update(dc.metadata)
    population = config.population or (int(float(meta["population"])) if "population" in meta else None)
    if not population:
        raise ConfigError("population missing from data metadata and config")

    family = get_family(config.model, config.covariate_scale)
    labels = family.labels
    mapping = _effective_mapping(config)
    if not mapping:
        raise ConfigError("empty series mapping")
    states = list(mapping.values())
    for s in states:
        if s not in labels:
            raise ConfigError(f"mapped state {s!r} not in model states {labels}")
    if len(set(states)) != len(states):
        raise ConfigError("two series map to the same state")
    missing = [n for n in mapping if n not in series]
    if missing:
        raise DataError(f"series {missing} not found; have {sorted(series)}")

    all_days = sorted(set().union(*(series[n].keys() for n in mapping)))
    start = dt.date.fromisoformat(str(config.window["start"])) if config.window.get("start") else all_days[0]
    end = dt.date.fromisoformat(str(config.window["end"])) if config.window.get("end") else all_days[-1]
    if end < start:
        raise ConfigError("window end precedes start")
    days = [start + dt.timedelta(d) for d in range((end - start).days + 1)]

    order = sorted(mapping, key=lambda n: labels.index(mapping[n]))
    counts = np.zeros((len(days), len(order)))
    for k, name in enumerate(order):
        vals = series[name]
        gaps = [d.isoformat() for d in days if d not in vals]
        if gaps:
            raise DataError(f"series {name!r} missing dates: {', '.join(gaps)}")
        col = np.array([vals[d] for d in days], dtype=float)
        if name in config.flow_series:
            col = np.cumsum(col)
        elif name in config.cumulative_series and np.any(np.diff(col) < 0):
            warnings.warn(f"cumulative series {name!r} decreases somewhere", stacklevel=2)
        if np.any(col > population):
            bad = days[int(np.argmax(col > population))]
            raise DataError(f"series {name!r} exceeds the population on {bad}")
        counts[:, k] = col
    A = AggregationMatrix.selection(len(labels), [labels.index(mapping[n]) for n in order])
    return ObservationSet(
        A,
        counts / population,
        tuple(d.isoformat() for d in days),
        int(population),
        tuple(order),
    )


# --- atomic writers -----------------------------------------------------------------


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return atomic_write_text(path, buf.getvalue())


def read_table(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return [_jsonable(x) for x in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(x) for x in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _cov_to_dict(cov: CovarianceEstimate | None):
    if cov is None:
        return None
    notes = {k: v for k, v in cov.notes.items() if k not in ("draws", "jacobian")}
    return {
        "names": list(cov.names),
        "matrix": cov.matrix,
        "method": cov.method,
        "n": cov.n,
        "reliable": cov.reliable,
        "notes": notes,
    }


def save_result(path, result: EstimateResult, observations: ObservationSet | None = None, extra: dict | None = None) -> Path:
    doc = {
        "family": result.family,
        "param_names": list(result.param_names),
        "free_names": list(result.free_names),
        "theta_hat": result.theta_hat,
        "p_hat": result.p_hat,
        "objective": result.objective,
        "converged": result.converged,
        "n_starts_used": result.n_starts_used,
        "residuals": result.residuals,
        "labels": list(result.labels),
        "dates": list(result.dates),
        "start_objectives": [float(x) for x in result.start_objectives],
        "n_distinct_optima": result.n_distinct_optima,
        "message": result.message,
        "metadata": result.metadata,
        "covariance": _cov_to_dict(result.covariance),
    }
    if observations is not None:
        doc["observations"] = {
            "A": observations.A.rows,
            "a_hat": observations.a_hat,
            "dates": list(observations.dates),
            "population": observations.population,
            "series_names": list(observations.series_names),
        }
    if extra:
        doc["extra"] = extra
    return write_json(path, doc)


def _floats(x):
    return np.array([[float(v) for v in row] for row in x]) if len(x) and isinstance(x[0], list) else np.array([float(v) for v in x])


def load_result(path, check_tol: float = 1e-10):
    """Load an estimate file; constraints and simplex membership are re-checked."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    cov = None
    if doc.get("covariance"):
        c = doc["covariance"]
        cov = CovarianceEstimate(tuple(c["names"]), _floats(c["matrix"]), c["method"], c["n"], c["reliable"], c.get("notes", {}))
    result = EstimateResult(
        family=doc["family"],
        param_names=tuple(doc["param_names"]),
        free_names=tuple(doc["free_names"]),
        theta_hat=_floats(doc["theta_hat"]),
        p_hat=_floats(doc["p_hat"]),
        objective=float(doc["objective"]),
        converged=bool(doc["converged"]),
        n_starts_used=int(doc["n_starts_used"]),
        residuals=_floats(doc["residuals"]),
        labels=tuple(doc["labels"]),
        dates=tuple(doc["dates"]),
        start_objectives=tuple(float(x) for x in doc["start_objectives"]),
        n_distinct_optima=int(doc["n_distinct_optima"]),
        message=doc.get("message", ""),
        covariance=cov,
        metadata=doc.get("metadata", {}),
    )
    obs = None
    if doc.get("observations"):
        o = doc["observations"]
        obs = ObservationSet(
            AggregationMatrix(_floats(o["A"])), _floats(o["a_hat"]), tuple(o["dates"]), int(o["population"]), tuple(o["series_names"])
        )
        gap = np.max(np.abs(result.p_hat @ obs.A.rows.T - obs.a_hat))
        if gap > check_tol:
            raise DataError(f"{path}: fitted marginals violate the observation constraints by {gap:.3g}")
    p = result.p_hat
    if np.any(p < -1e-12) or np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-12:
        raise DataError(f"{path}: fitted marginals are not on the simplex")
    return result, obs, doc.get("extra", {})


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    import scipy

    from . import __version__
    from .kernels import BACKEND

    return {
        "latent_markov": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "kernel_backend": BACKEND,
    }


# --- comparison with the published French fit --------------------------------------

PUBLISHED_LOGITS = {k: getattr(FRANCE_ESTIMATED, k) for k in ("a1", "a2", "b1", "b2", "c1", "c2")}
PUBLISHED_P15 = FRANCE_ESTIMATED.p15


def france_comparison(result: EstimateResult, population: int) -> dict:
    """Side-by-side of an SIURD fit with the published coefficients and rows.

    Transition rows are those of the last fitted day; the zero pattern and
    row sums are checked on every fitted day.
    """
    if tuple(result.labels) != SIURD_LABELS:
        raise ValueError("comparison needs an SIURD estimate")
    family = get_family("siurd", result.metadata.get("covariate_scale", 1.0))
    model = family.build(result.theta_hat)
    Ps = model.matrix(result.p_hat)
    P = Ps[-1]
    params = result.params
    coef = {}
    for k, pub in PUBLISHED_LOGITS.items():
        est = params[k]
        coef[k] = {
            "estimated": est,
            "published": pub,
            "sign_agrees": bool(np.sign(est) == np.sign(pub)),
            "ratio": est / pub,
        }
    p15 = params["p15"]
    rows = {}
    for i, lab in enumerate(("IU", "ID", "R")):
        rows[lab] = {"estimated": P[i + 1], "published": FRANCE_TABLE_ROWS[i]}
    zero_ok = bool(np.all(Ps[:, model.zero_pattern] == 0.0))
    return {
        "logit_coefficients": coef,
        "all_signs_agree": all(v["sign_agrees"] for v in coef.values()),
        "p15": {"estimated": p15, "published": PUBLISHED_P15, "ratio": p15 / PUBLISHED_P15},
        "p15_within_factor_10": bool(0.1 <= p15 / PUBLISHED_P15 <= 10.0),
        "transition_rows": rows,
        "zero_pattern_exact": zero_ok,
        "max_row_sum_error": float(np.max(np.abs(Ps.sum(axis=-1) - 1.0))),
        "last_day_counts": {
            "IU": {"estimated": float(result.p_hat[-1, 1] * population), "published": 94461},
            "R": {"estimated": float(result.p_hat[-1, 3] * population), "published": 107640},
        },
    }
