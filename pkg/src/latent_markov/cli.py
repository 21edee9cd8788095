"""Command-line entry point ``latent-markov``."""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import yaml

from . import cli_io
from .cli_io import ConfigError, RunConfig, load_config, write_json, write_table
from .estimator import (
    DataError,
    EstimationError,
    EstimationProblem,
    bootstrap_covariance,
    delta_method_covariance,
    estimate,
)
from .identification import IdentificationError, check_conditions, sid_coefficients, sid_reduced_form
from .markov_core import ModelDomainError, SimplexError, propagate, simulate_panel
from .model_zoo import (
    SCENARIOS,
    SIURD_LABELS,
    Homog3Params,
    SidParams,
    SiurdParams,
    baseline_scenario,
    build_homog3,
    build_sid,
    get_family,
)
from .projection import Scenario, compare_panels, project, sensitivity_scan

OUT_ENV = "LATENT_MARKOV_OUT"
DEFAULT_OUT = "latent_markov_out"

EXIT_OK = 0
EXIT_DATA = 2
EXIT_CONVERGENCE = 3
EXIT_CONFIG = 4

# neutral starting values for fitting the SIURD family to data
SIURD_DEFAULT_INIT = SiurdParams(
    a1=math.log(1e-4),
    a2=math.log(1e-5),
    b1=1.0,
    b2=1.0,
    c1=1.0,
    c2=1.0,
    p15=1e-5,
    p23=0.02,
    p24=0.05,
    p25=0.002,
    p34=0.05,
    p35=0.01,
    p45=1e-5,
)

# real counts never fit exactly; a relative tolerance of 1e-10 ends the flat ridge search
DATA_FIT_DEFAULTS = {"tol": 1e-10}

# reference figures quoted for the French projection
FRANCE_REFERENCE = {"iu_peak_day": 98, "iu_peak_count_min": 300_000, "new_deaths_day60": 3000}


class CliError(Exception):
    def __init__(self, code: str, exit_code: int, detail: str):
        super().__init__(detail)
        self.code = code
        self.exit_code = exit_code
        self.detail = detail


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def _config(args) -> RunConfig:
    overrides = {"seed": args.seed, "model": getattr(args, "model_override", None)}
    return load_config(args.config, overrides)


def _marginal_rows(proj):
    return [[t, *proj.marginals[t]] for t in range(proj.marginals.shape[0])]


def _write_projection(out: Path, proj, prefix: str = "") -> list[Path]:
    files = [write_table(out / f"{prefix}marginals.csv", ["day", *proj.labels], _marginal_rows(proj))]
    if proj.new_counts:
        states = list(proj.new_counts)
        rows = [[t + 1, *(proj.new_counts[s][t] for s in states)] for t in range(proj.horizon)]
        files.append(write_table(out / f"{prefix}new_counts.csv", ["day", *states], rows))
    tidy = [[t, lab, proj.marginals[t, j], proj.label] for t in range(proj.marginals.shape[0]) for j, lab in enumerate(proj.labels)]
    files.append(write_table(out / f"{prefix}marginals_tidy.csv", ["day", "state", "value", "scenario"], tidy))
    files.append(write_json(out / f"{prefix}peaks.json", {"label": proj.label, "population": proj.population, "peaks": proj.peaks}))
    return files


# --- subcommands ----------------------------------------------------------------------


def cmd_simulate(args, cfg: RunConfig, out: Path) -> dict:
    model, p0, population = baseline_scenario(args.scenario, args.covariate_scale or cfg.covariate_scale)
    base = Scenario(model, p0, population, args.horizon, label=args.scenario)
    proj = project(base)
    files = _write_projection(out, proj)
    summary = {"scenario": args.scenario, "horizon": args.horizon, "peaks": proj.peaks}
    if args.scan:
        factors = [float(x) for x in args.scan.split(",")]
        names = tuple(model.metadata.get("propagation_params", ()))
        rows = []
        for f, sp in zip(factors, sensitivity_scan(base, factors, names)):
            rows += [[f, t, *sp.marginals[t]] for t in range(sp.marginals.shape[0])]
        files.append(write_table(out / "sensitivity.csv", ["factor", "day", *proj.labels], rows))
    if args.panel_size:
        panel = simulate_panel(model, p0, args.panel_size, args.horizon + 1, cfg.seed, num_threads=args.threads)
        cmp_ = compare_panels(proj, panel)
        f = proj.marginals + cmp_.gaps
        files.append(write_table(out / "panel_frequencies.csv", ["day", *proj.labels], [[t, *f[t]] for t in range(f.shape[0])]))
        summary["panel"] = {"N": args.panel_size, "max_abs_gap": cmp_.max_abs_gap, "max_abs_normalized_gap": cmp_.max_abs_normalized}
    files.append(write_json(out / "summary.json", summary))
    return {"files": files}


def _theta_init(cfg: RunConfig, family):
    if family.name == "siurd":
        base = SIURD_DEFAULT_INIT.to_dict()
    else:
        base = {}
    base.update(cfg.params)
    missing = [n for n in family.param_names if n not in base]
    if missing:
        raise ConfigError(f"initial values missing for {missing}")
    extra = set(base) - set(family.param_names)
    if extra:
        raise ConfigError(f"unknown parameters {sorted(extra)} for {family.name}")
    return np.array([float(base[n]) for n in family.param_names])


def _p1_guess(cfg: RunConfig, obs, labels):
    if cfg.p1_guess:
        v = np.array([float(cfg.p1_guess.get(s, 0.0)) for s in labels])
        return v / v.sum()
    if tuple(labels) == SIURD_LABELS:
        # unobserved infectious and recovered start as multiples of the observed infected
        a0 = obs.A.rows.T @ obs.a_hat[0]
        v = a0.copy()
        v[1] = max(v[1], 3.0 * a0[2])
        v[3] = max(v[3], a0[2])
        v[0] = 1.0 - v[1:].sum()
        return v
    return None


def _problem(cfg: RunConfig, data_paths, args=None) -> EstimationProblem:
    obs = cli_io.ingest(data_paths, cfg)
    family = get_family(cfg.model, cfg.covariate_scale)
    opt = {**DATA_FIT_DEFAULTS, **cfg.optimizer}
    known = {"n_starts", "jitter", "max_nfev", "tol", "weighting", "latent_init", "penalty"}
    if set(opt) - known:
        raise ConfigError(f"unknown optimizer keys {sorted(set(opt) - known)}")
    if args is not None and getattr(args, "starts", None):
        opt["n_starts"] = args.starts
    bounds = {k: tuple(v) for k, v in cfg.bounds.items()}
    try:
        return EstimationProblem(
            family,
            obs,
            _theta_init(cfg, family),
            fixed=tuple(cfg.fixed),
            p1_guess=_p1_guess(cfg, obs, family.labels),
            seed=cfg.seed,
            bounds=bounds,
            **opt,
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _data_paths(args):
    return args.data or [str(cli_io.bundled_data_path())]


def _fitted_rows(result, obs):
    rows = []
    for t, date in enumerate(result.dates):
        counts = result.p_hat[t] * obs.population
        rows.append([date, *result.p_hat[t], *counts])
    return rows


def cmd_estimate(args, cfg: RunConfig, out: Path) -> dict:
    problem = _problem(cfg, _data_paths(args), args)
    result = estimate(problem)
    if not result.converged:
        raise CliError("convergence_failure", EXIT_CONVERGENCE, f"best start stopped without converging: {result.message}")
    if args.covariance == "delta":
        result.covariance = delta_method_covariance(problem, result)
    obs = problem.observations
    labels = result.labels
    files = [
        cli_io.save_result(out / "estimate.json", result, obs, extra={"config": cfg.to_dict()}),
        write_table(
            out / "fitted_marginals.csv",
            ["date", *labels, *(f"{s}_count" for s in labels)],
            _fitted_rows(result, obs),
        ),
        write_table(out / "parameters.csv", ["name", "estimate", "free"], [[n, v, n in result.free_names] for n, v in result.params.items()]),
    ]
    if result.covariance is not None:
        cov = result.covariance
        files.append(write_table(out / "std_errors.csv", ["name", "std_error"], list(zip(cov.names, cov.std_errors))))
    if tuple(labels) == SIURD_LABELS:
        files.append(write_json(out / "comparison.json", cli_io.france_comparison(result, obs.population)))
    return {"files": files, "objective": result.objective}


def _load_params(path, cls, fallback: dict):
    source = path or "config params"
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) if path else fallback
        return cls(**(raw or {}))
    except (OSError, yaml.YAMLError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot read {cls.__name__} from {source}: {exc}") from exc


def cmd_identify(args, cfg: RunConfig, out: Path) -> dict:
    T = args.T
    if args.model == "homog3":
        params = _load_params(args.params, Homog3Params, cfg.params)
        model = build_homog3(params)
        p0 = np.array(args.p0 or [1.0, 0.0, 0.0])
        x = propagate(model, p0 / p0.sum(), T - 1)[:, 2]
        rep = check_conditions(params.matrix(), x)
        doc = {"model": "homog3", "params": params.to_dict(), "report": rep.to_dict()}
    elif args.model == "sid":
        params = _load_params(args.params, SidParams, cfg.params)
        model = build_sid(params)
        p0 = np.array(args.p0 or [1.0, 0.0, 0.0])
        x = propagate(model, p0 / p0.sum(), T - 1)[:, 2]
        fit = sid_reduced_form(params, x)
        doc = {
            "model": "sid",
            "params": params.to_dict(),
            "implied_coefficients": sid_coefficients(params),
            "fitted_coefficients": fit.coefficients,
            "rmse": fit.rmse,
            "implied_rmse": fit.implied_rmse,
            "overid_order": fit.overid_order,
        }
    else:
        raise ConfigError(f"identify supports homog3 and sid, not {args.model!r}")
    write_table(out / "p3_series.csv", ["day", "p3"], [[t, v] for t, v in enumerate(x)])
    return {"files": [write_json(out / "identification.json", doc), out / "p3_series.csv"]}


def cmd_project(args, cfg: RunConfig, out: Path) -> dict:
    if args.estimate:
        if args.start is None:
            raise ConfigError("--start is required with --estimate (last-fitted or first-fitted)")
        result, _, extra = cli_io.load_result(args.estimate)
        scale = result.metadata.get("covariate_scale", 1.0)
        model = get_family(result.family, scale).build(result.theta_hat)
        p_start = result.p_hat[-1] if args.start == "last-fitted" else result.p_hat[0]
        population = int(extra.get("config", {}).get("population") or 0) or cli_io.read_daily_counts(cli_io.bundled_data_path()).population
        if args.population:
            population = args.population
        label = f"estimate:{args.start}"
    else:
        model, p_start, population = baseline_scenario(args.scenario, args.covariate_scale or cfg.covariate_scale)
        label = args.scenario
    proj = project(Scenario(model, p_start, population, args.horizon, label=label))
    files = _write_projection(out, proj)
    if label == "france-estimated" or args.estimate:
        files.append(write_json(out / "reference_comparison.json", _france_reference(proj)))
    return {"files": files}


def _france_reference(proj) -> dict:
    iu = proj.peaks.get("IU", {})
    deaths = proj.new_counts.get("D")
    day60 = float(deaths[59]) if deaths is not None and len(deaths) >= 60 else None
    return {
        "iu_peak_day": {"projected": iu.get("day"), "reference": FRANCE_REFERENCE["iu_peak_day"]},
        "iu_peak_count": {
            "projected": iu.get("value", 0.0) * proj.population,
            "reference_at_least": FRANCE_REFERENCE["iu_peak_count_min"],
        },
        "new_deaths_day60": {"projected": day60, "reference": FRANCE_REFERENCE["new_deaths_day60"]},
    }


def cmd_bootstrap(args, cfg: RunConfig, out: Path) -> dict:
    if not args.estimate:
        raise ConfigError("bootstrap needs --estimate FILE")
    result, _, extra = cli_io.load_result(args.estimate)
    if args.config is None and extra.get("config"):
        cfg = load_config(None, {**extra["config"], "seed": args.seed if args.seed is not None else extra["config"].get("seed", 0)})
    problem = _problem(cfg, _data_paths(args))
    cov = bootstrap_covariance(problem, result, args.replicates, cfg.seed, N=args.panel_size, num_threads=args.threads)
    files = [
        write_table(out / "bootstrap_covariance.csv", ["name", *cov.names], [[n, *row] for n, row in zip(cov.names, cov.matrix)]),
        write_table(out / "bootstrap_draws.csv", list(cov.names), cov.notes["draws"].tolist()),
        write_json(
            out / "bootstrap.json",
            {"replicates": args.replicates, "failures": cov.notes["failures"], "reliable": cov.reliable, "N": cov.n, "std_errors": dict(zip(cov.names, cov.std_errors))},
        ),
    ]
    if not cov.reliable:
        raise CliError("convergence_failure", EXIT_CONVERGENCE, f"{cov.notes['failures']} of {args.replicates} bootstrap refits failed")
    return {"files": files}


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "identify": cmd_identify,
    "project": cmd_project,
    "bootstrap": cmd_bootstrap,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--threads", type=int, default=1, help="threads for panel simulation")

    parser = _Parser(prog="latent-markov", description="Partially observed Markov chain models for epidemic counts.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory for the re-run")

    p = sub.add_parser("simulate", parents=[common], help="deterministic projection of a reference scenario")
    p.add_argument("--scenario", default="sim-baseline", choices=SCENARIOS)
    p.add_argument("--horizon", type=int, default=60)
    p.add_argument("--covariate-scale", type=float, default=None)
    p.add_argument("--scan", help="comma-separated factors applied to the propagation parameters")
    p.add_argument("--panel-size", type=int, default=0, help="also simulate a panel of this many individuals")

    p = sub.add_parser("estimate", parents=[common], help="fit a model to daily counts")
    p.add_argument("--data", nargs="+", help="count files (default: bundled French series)")
    p.add_argument("--model", dest="model_override", help="model family (overrides the config)")
    p.add_argument("--starts", type=int, default=None)
    p.add_argument("--covariance", choices=("none", "delta"), default="none")

    p = sub.add_parser("identify", parents=[common], help="identification diagnostics for 3-state chains")
    p.add_argument("--model", choices=("homog3", "sid"), default="homog3")
    p.add_argument("--params", help="YAML file with model parameters")
    p.add_argument("--T", type=int, default=20)
    p.add_argument("--p0", type=float, nargs=3)

    p = sub.add_parser("project", parents=[common], help="project a scenario or a fitted model")
    p.add_argument("--scenario", default="france-estimated", choices=SCENARIOS)
    p.add_argument("--estimate", help="estimate.json from a previous fit")
    p.add_argument("--start", choices=("last-fitted", "first-fitted"))
    p.add_argument("--horizon", type=int, default=365)
    p.add_argument("--population", type=int, default=None)
    p.add_argument("--covariate-scale", type=float, default=None)

    p = sub.add_parser("bootstrap", parents=[common], help="parametric bootstrap of a fitted model")
    p.add_argument("--estimate", help="estimate.json from a previous fit")
    p.add_argument("--data", nargs="+")
    p.add_argument("--model", dest="model_override", help="model family (overrides the config)")
    p.add_argument("--replicates", "-B", type=int, default=200)
    p.add_argument("--panel-size", type=int, default=None, help="panel size N (default: population)")
    return parser


def _error_line(code: str, exit_code: int, detail: str) -> str:
    detail = " ".join(str(detail).split())
    return f"latent-markov: error code={code} exit={exit_code} detail={json.dumps(detail)}"


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(_error_line("usage", EXIT_CONFIG, exc), file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "replay":
        try:
            manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
            replay_argv = list(manifest["argv"])
        except (OSError, ValueError, KeyError) as exc:
            print(_error_line("config_error", EXIT_CONFIG, f"unreadable manifest: {exc}"), file=sys.stderr)
            return EXIT_CONFIG
        if args.out:
            replay_argv += ["--out", args.out]
        return run(replay_argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print(_error_line("usage", EXIT_CONFIG, "no subcommand given"), file=sys.stderr)
        return EXIT_CONFIG

    t0 = time.perf_counter()
    try:
        cfg = _config(args)
        out = _out_dir(args, cfg)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            info = COMMANDS[args.command](args, cfg, out)
        for w in caught:
            print(f"latent-markov: warning {' '.join(str(w.message).split())}", file=sys.stderr)
        files = [Path(f) for f in info.pop("files")]
        manifest = {
            "command": args.command,
            "argv": list(argv),
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "versions": cli_io.versions(),
            "timings": {"total_seconds": time.perf_counter() - t0},
            "outputs": {f.name: cli_io.file_digest(f) for f in files},
            "warnings": [str(w.message) for w in caught],
        }
        write_json(out / "manifest.json", manifest)
    except CliError as exc:
        print(_error_line(exc.code, exc.exit_code, exc.detail), file=sys.stderr)
        return exc.exit_code
    except (ConfigError, KeyError) as exc:
        print(_error_line("config_error", EXIT_CONFIG, exc.args[0] if exc.args else exc), file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SimplexError, IdentificationError, ModelDomainError) as exc:
        print(_error_line("data_error", EXIT_DATA, exc), file=sys.stderr)
        return EXIT_DATA
    except EstimationError as exc:
        print(_error_line("convergence_failure", EXIT_CONVERGENCE, exc), file=sys.stderr)
        return EXIT_CONVERGENCE
    except OSError as exc:
        print(_error_line("data_error", EXIT_DATA, exc), file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main(argv=None) -> int:
    code = run(sys.argv[1:] if argv is None else list(argv))
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
