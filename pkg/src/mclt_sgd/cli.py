"""Command-line entry point: ``mclt-sgd <subcommand> ...``.

Exit codes: 0 success, 1 configuration or runtime error, 2 some certification
row failed. CSV values use 17 significant digits and every file is written
atomically, so reruns with the same config and seed are byte-identical.
Runtimes go to a ``<output>.meta.json`` sidecar.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
from pathlib import Path
import sys
import tempfile
import time

import numpy as np

from . import __version__
from . import bounds as bnd
from . import linalg
from .errors import BoundViolated, ConfigInvalid, MCLTError
from .martingale import make_model
from .montecarlo import (BOUND_NAMES, ExperimentSpec, empirical_discrepancy, enumerated_discrepancy,
                         loglog_slope)
from .sgd_engine import (PROBLEMS, NoiseModel, StepSchedule, catalog_problem, logcosh_ridge_problem,
                         quadratic_problem, run_batch)
from .test_functions import catalog_function, list_functions, stein_factor_bound, stein_factor_estimate, stein_solve

SCHEMA_PATH = Path(__file__).with_name("config_schema.json")
SWEEP_AXES = ("horizon", "dim", "reps", "eta0", "c3")
EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2
FULL_RECORD_MAX_ROWS = 2_000_000


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c, math.nan)) for c in columns])
    return buf.getvalue()


def json_text(columns, rows, meta) -> str:
    def clean(v):
        if isinstance(v, (bool, np.bool_)):
            return bool(v)
        if isinstance(v, (int, np.integer)):
            return int(v)
        if isinstance(v, (float, np.floating)):
            return fmt(v) if not math.isfinite(v) else float(fmt(v))
        return v

    doc = {"meta": meta, "rows": [{c: clean(r.get(c, math.nan)) for c in columns} for r in rows]}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_artifact(path, columns, rows, meta, runtime: float, fmt_name: str = "csv"):
    """Data file (deterministic) plus a sidecar with the wall-clock runtime."""
    text = csv_text(columns, rows) if fmt_name == "csv" else json_text(columns, rows, meta)
    atomic_write(path, text)
    side = dict(meta, runtime_seconds=round(runtime, 3))
    atomic_write(str(path) + ".meta.json", json.dumps(side, indent=2, sort_keys=True) + "\n")


def config_hash(cfg) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def resolve_threads(flag):
    env = os.environ.get("MCLT_SGD_THREADS")
    if env:
        return max(1, int(env))
    return flag


# --------------------------------------------------------------------------
# configs
# --------------------------------------------------------------------------

def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    import jsonschema

    schema = json.loads(SCHEMA_PATH.read_text())
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        where = ".".join(str(p) for p in e.path) or "<root>"
        hint = " (constraint: c3 in (0, 1))" if where == "schedule.c3" else ""
        raise ConfigInvalid(f"config invalid at {where}: {e.message}{hint}")
    engine = cfg["engine"]
    if engine == "martingale" and "martingale" not in cfg:
        raise ConfigInvalid("martingale engine needs a 'martingale' section")
    if engine != "martingale":
        for key in ("problem", "schedule"):
            if key not in cfg:
                raise ConfigInvalid(f"{engine} engine needs a '{key}' section")
    if cfg.get("method") == "enumerate" and engine != "martingale":
        raise ConfigInvalid("method 'enumerate' applies only to the martingale engine")
    dim = cfg["martingale"]["dim"] if engine == "martingale" else None
    for name in cfg["functions"]:
        try:
            catalog_function(name, dim or 1)
        except MCLTError as exc:
            raise ConfigInvalid(f"functions: {exc}") from exc


def build_problem(spec):
    if isinstance(spec, str):
        if spec not in PROBLEMS:
            raise ConfigInvalid(f"unknown problem {spec!r}")
        return catalog_problem(spec)
    noise = NoiseModel(spec["noise"]["kind"], np.array(spec["noise"]["cov"], dtype=float))
    if spec["kind"] == "quadratic":
        A = np.array(spec["A"], dtype=float)
        return quadratic_problem(A, spec.get("b", [0.0] * A.shape[0]), noise)
    return logcosh_ridge_problem(spec["design"], spec["targets"], spec["ridge"], noise)


def load_problem(arg):
    """A catalog name or a JSON file holding a problem object (or a full config)."""
    if arg in PROBLEMS:
        return catalog_problem(arg)
    try:
        with open(arg) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read problem {arg}: {exc}") from exc
    if isinstance(doc, dict) and "schema_version" in doc:
        validate_config(doc)
        doc = doc.get("problem")
    if doc is None:
        raise ConfigInvalid(f"{arg} holds no problem")
    return build_problem(doc)


def experiment_specs(cfg):
    engine = cfg["engine"]
    bounds = tuple(cfg.get("bounds", ()))
    out = []
    if engine == "martingale":
        mc = cfg["martingale"]
        for n in cfg["horizons"]:
            model = make_model(mc["kind"], mc["dim"], n, profile=mc.get("profile"))
            for f in cfg["functions"]:
                out.append(ExperimentSpec(cfg["experiment"], engine, f, n, model=model, bounds=bounds,
                                          bound_reps=cfg.get("bound_reps", 0)))
        return out
    problem = build_problem(cfg["problem"])
    sched = StepSchedule(cfg["schedule"]["eta0"], cfg["schedule"]["c3"])
    theta0 = np.array(cfg["theta0"], dtype=float) if "theta0" in cfg else None
    consts = None
    if set(bounds) & {"thm3", "cor4", "thm4"}:
        consts = bnd.spectral_constants(problem.hessian_at_min, sched)
    for t in cfg["horizons"]:
        for f in cfg["functions"]:
            out.append(ExperimentSpec(cfg["experiment"], engine, f, t, problem=problem, schedule=sched,
                                      theta0=theta0, bounds=bounds, bound_reps=cfg.get("bound_reps", 0),
                                      constants=consts, cor4_horizons=tuple(cfg["horizons"])))
    return out


DISCREPANCY_COLUMNS = ["experiment", "engine", "d", "t_or_n", "function", "empirical_mean",
                       "reference_mean", "gap", "gap_stderr", *BOUND_NAMES, "coupled_gap",
                       "certified", "reps", "seed", "config_sha256", "version"]


def run_config(cfg, threads=None):
    """Rows for every (horizon, function) cell of a config; cell i uses seed + i
    so certification runs never share noise."""
    rows = []
    seed = cfg["seed"]
    for i, spec in enumerate(experiment_specs(cfg)):
        if cfg.get("method") == "enumerate":
            rep = enumerated_discrepancy(spec)
        else:
            rep = empirical_discrepancy(spec, cfg["reps"], seed + i, threads)
        row = {"experiment": rep.experiment, "engine": rep.engine, "d": rep.dim, "t_or_n": rep.horizon,
               "function": rep.function, "empirical_mean": rep.empirical_mean,
               "reference_mean": rep.reference_mean, "gap": rep.gap, "gap_stderr": rep.gap_stderr,
               "coupled_gap": rep.coupled_gap, "certified": rep.certified, "reps": rep.reps,
               "seed": seed + i}
        for name in BOUND_NAMES:
            row[name] = rep.bound_values.get(name, math.nan)
        rows.append(row)
    return rows


def output_target(cfg, out_arg):
    fmt_name = cfg.get("output", {}).get("format", "csv")
    path = out_arg or cfg.get("output", {}).get("path") or f"{cfg['experiment']}.{fmt_name}"
    return Path(path), fmt_name


def finish(rows, columns, path, fmt_name, meta, start) -> int:
    for r in rows:
        r.setdefault("config_sha256", meta["config_sha256"])
        r.setdefault("version", __version__)
    write_artifact(path, columns, rows, meta, time.perf_counter() - start, fmt_name)
    if any(r.get("certified") is False for r in rows):
        print(f"bound violation: see {path}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def _meta(cfg, seed):
    return {"config_sha256": config_hash(cfg), "seed": seed, "version": __version__}


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_run(args) -> int:
    start = time.perf_counter()
    cfg = load_config(args.config)
    if getattr(args, "reps", None) is not None:
        cfg["reps"] = args.reps
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    validate_config(cfg)
    rows = run_config(cfg, resolve_threads(args.threads))
    path, fmt_name = output_target(cfg, args.out)
    return finish(rows, DISCREPANCY_COLUMNS, path, fmt_name, _meta(cfg, cfg["seed"]), start)


def cmd_discrepancy(args) -> int:
    args.config = args.experiment
    return cmd_run(args)


def cmd_sweep(args) -> int:
    start = time.perf_counter()
    base = load_config(args.config)
    values = [float(v) for v in args.values.split(",")]
    rows = []
    for v in values:
        cfg = copy.deepcopy(base)
        if args.axis == "horizon":
            cfg["horizons"] = [int(v)]
        elif args.axis == "dim":
            if cfg["engine"] != "martingale":
                raise ConfigInvalid("the dim axis applies to martingale configs")
            cfg["martingale"]["dim"] = int(v)
        elif args.axis == "reps":
            cfg["reps"] = int(v)
        else:
            if "schedule" not in cfg:
                raise ConfigInvalid(f"axis {args.axis} needs a schedule")
            cfg["schedule"][args.axis] = v
        validate_config(cfg)
        for r in run_config(cfg, resolve_threads(args.threads)):
            r["axis"], r["value"] = args.axis, v
            rows.append(r)
    path, fmt_name = output_target(base, args.out)
    cols = ["axis", "value", *DISCREPANCY_COLUMNS]
    slope_rows = []
    for f in base["functions"]:
        sel = [r for r in rows if r["function"] == f]
        for col in ("gap", "gap_stderr", *BOUND_NAMES):
            pts = [(r["value"], r[col]) for r in sel if math.isfinite(r[col]) and r[col] > 0]
            if len(pts) < 2 or len(pts) < len(sel):
                continue
            s, se = loglog_slope(*zip(*pts))
            slope_rows.append({"axis": args.axis, "function": f, "column": col, "slope": s,
                               "slope_stderr": se, "points": len(pts)})
    meta = _meta(base, base["seed"])
    meta["sweep"] = {"axis": args.axis, "values": values}
    slope_path = path.with_name(path.stem + ".slopes.csv")
    write_artifact(slope_path, ["axis", "function", "column", "slope", "slope_stderr", "points"],
                   slope_rows, meta, time.perf_counter() - start)
    return finish(rows, cols, path, fmt_name, meta, start)


MCLT_COLUMNS = ["model", "d", "n", "function", "empirical_gap", "gap_stderr", "thm1", "cor1", "cor2",
                "p1_dev", "seed", "certified", "config_sha256", "version"]


def cmd_mclt(args) -> int:
    start = time.perf_counter()
    model = make_model(args.model, args.dim, args.horizon)
    spec = ExperimentSpec("mclt", "martingale", args.function, args.horizon, model=model,
                          bounds=("thm1", "cor1", "cor2"), bound_reps=args.bound_reps)
    rep = empirical_discrepancy(spec, args.reps, args.seed, resolve_threads(args.threads))
    row = {"model": args.model, "d": args.dim, "n": args.horizon, "function": args.function,
           "empirical_gap": rep.gap, "gap_stderr": rep.gap_stderr,
           "p1_dev": rep.extra["p1_deviation"], "seed": args.seed, "certified": rep.certified}
    for name in ("thm1", "cor1", "cor2"):
        row[name] = rep.bound_values.get(name, math.nan)
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "out", "threads")}
    return finish([row], MCLT_COLUMNS, Path(args.out), "csv", _meta(cfg, args.seed), start)


def _schedule_arg(eta0, c3) -> StepSchedule:
    if not 0.0 < c3 < 1.0:
        raise ConfigInvalid(f"c3 = {c3} violates the constraint c3 in (0, 1)")
    return StepSchedule(eta0, c3)


def _simulate(args, linear: bool) -> int:
    start = time.perf_counter()
    problem = load_problem(args.problem)
    if linear and problem.kind != "quadratic":
        raise ConfigInvalid("simulate-linear needs a quadratic problem")
    sched = _schedule_arg(args.eta0, args.c3)
    t = args.horizon
    if args.record == "full":
        if args.reps * t > FULL_RECORD_MAX_ROWS:
            raise ConfigInvalid(f"--record full would emit {args.reps * t} rows (cap {FULL_RECORD_MAX_ROWS})")
        cps = range(1, t + 1)
    else:
        cps = sorted({10**k for k in range(int(math.log10(t)) + 1) if 10**k <= t} | {t})
    theta0 = problem.theta_star if args.theta0 is None else np.array(args.theta0, dtype=float)
    batch = run_batch(problem, sched, theta0, t, args.reps, args.seed, cps, resolve_threads(args.threads))
    nd = np.linalg.norm(batch.delta_at, axis=2)
    nb = np.linalg.norm(batch.delta_bar_at, axis=2)
    rows = [{"rep": r, "t": int(c), "norm_delta": nd[r, i], "norm_delta_bar": nb[r, i]}
            for r in range(args.reps) for i, c in enumerate(batch.checkpoints)]
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "out", "threads")}
    cols = ["rep", "t", "norm_delta", "norm_delta_bar", "config_sha256", "version"]
    return finish(rows, cols, Path(args.out), "csv", _meta(cfg, args.seed), start)


def cmd_simulate_linear(args) -> int:
    return _simulate(args, True)


def cmd_simulate_sgd(args) -> int:
    return _simulate(args, False)


def cmd_bounds(args) -> int:
    start = time.perf_counter()
    problem = load_problem(args.problem)
    sched = _schedule_arg(args.eta0, args.c3)
    H = problem.hessian_at_min
    if args.constants == "file":
        if not args.constants_file:
            raise ConfigInvalid("--constants file needs --constants-file")
        raw = json.loads(Path(args.constants_file).read_text())
        consts = bnd.user_constants(**raw)
    else:
        consts = bnd.spectral_constants(H, sched)
    grid = [int(float(x)) for x in args.horizon_grid.split(",")]
    h = catalog_function(args.function, problem.dim)
    moments = (0.0, 0.0)
    if args.theta0 is not None:
        d0 = np.array(args.theta0, dtype=float) - problem.theta_star
        moments = (float(np.linalg.norm(d0)), float(d0 @ d0))
    rows, term_cols = [], []
    for t in grid:
        row = {"which": args.which, "t": t, "function": args.function}
        if args.which == "rho":
            row["rho_outer"] = bnd.rho(sched, t, consts, "outer")
            row["rho_inner"] = bnd.rho(sched, t, consts, "inner")
            exact, major = bnd.majorant_check(H, sched, t, consts)
            row.update(mean_sq_w=exact, majorant=major, total=row["rho_outer"])
            term_cols = ["rho_outer", "rho_inner", "mean_sq_w", "majorant"]
        else:
            if args.which == "thm3":
                if problem.kind != "quadratic":
                    raise ConfigInvalid("thm3 needs a quadratic problem")
                b = bnd.thm3_bound(H, problem.noise, sched, t, h, moments, consts)
            elif args.which == "cor4":
                alpha, beta, gamma = bnd.cor4_moments(H, problem.noise)
                k4, k5, _ = bnd.fit_cor4_constants(H, problem.noise, sched, grid, h, moments, consts)
                b = bnd.cor4_bound(alpha, beta, gamma, problem.dim, t, h, k4, k5)
            else:
                b = bnd.thm4_bound(problem, sched, t, h, consts=consts, delta0_moments=moments)
            row.update(b.terms)
            row["total"] = b.total
            term_cols = list(b.terms)
        rows.append(row)
    cols = ["which", "t", "function", *term_cols, "total", "config_sha256", "version"]
    meta = _meta({k: v for k, v in vars(args).items() if k not in ("func", "out")}, None)
    meta["constants"] = {"K": consts.K, "K2": consts.K2, "Cprime": consts.Cprime, "c1": consts.c1,
                         "c2": consts.c2, "lambda": consts.lam, "provenance": consts.provenance}
    return finish(rows, cols, Path(args.out), "csv", meta, start)


def cmd_stein_check(args) -> int:
    rows = []
    for scale in (float(s) for s in args.sigma_scale.split(",")):
        h = catalog_function(args.function, args.dim)
        sigma = scale * np.eye(args.dim)
        sol = stein_solve(h, np.zeros(args.dim), sigma)
        est = stein_factor_estimate(sol, probe_box=(-args.box, args.box), grid_step=args.step)
        bound = stein_factor_bound(h, sigma)
        ok = sol.max_residual <= 1e-4 and est <= 1.01 * bound
        rows.append({"function": args.function, "d": args.dim, "sigma_scale": scale,
                     "max_residual": sol.max_residual, "m3_estimate": est, "m3_bound": bound,
                     "certified": ok})
    cols = ["function", "d", "sigma_scale", "max_residual", "m3_estimate", "m3_bound", "certified"]
    sys.stdout.write(csv_text(cols, rows))
    return EXIT_OK if all(r["certified"] for r in rows) else EXIT_VIOLATION


def cmd_list_functions(args) -> int:
    sys.stdout.write(csv_text(["name", "family", "dim", "m1", "m2"], list_functions(args.dim)))
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mclt-sgd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def threads(sp):
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: all cores; MCLT_SGD_THREADS overrides)")

    sp = sub.add_parser("run", help="run a config end to end")
    sp.add_argument("config")
    sp.add_argument("--out")
    threads(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("discrepancy", help="gap vs bounds for an experiment config")
    sp.add_argument("--experiment", required=True)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    threads(sp)
    sp.set_defaults(func=cmd_discrepancy)

    sp = sub.add_parser("sweep", help="rerun a config along one axis and fit log-log slopes")
    sp.add_argument("--config", required=True)
    sp.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sp.add_argument("--values", required=True, help="comma-separated")
    sp.add_argument("--out")
    threads(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("mclt", help="martingale CLT gap and bounds")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dim", type=int, default=1)
    sp.add_argument("--horizon", type=int, required=True)
    sp.add_argument("--function", default="cos")
    sp.add_argument("--reps", type=int, default=100_000)
    sp.add_argument("--bound-reps", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    threads(sp)
    sp.set_defaults(func=cmd_mclt)

    for name, fn in (("simulate-linear", cmd_simulate_linear), ("simulate-sgd", cmd_simulate_sgd)):
        sp = sub.add_parser(name, help="trajectory summaries")
        sp.add_argument("--problem", required=True, help=f"catalog name {PROBLEMS} or JSON file")
        sp.add_argument("--eta0", type=float, default=0.5)
        sp.add_argument("--c3", type=float, default=0.6)
        sp.add_argument("--horizon", type=int, required=True)
        sp.add_argument("--reps", type=int, default=1)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--theta0", type=float, nargs="+")
        sp.add_argument("--record", choices=("full", "summary"), default="summary")
        sp.add_argument("--out", required=True)
        threads(sp)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("bounds", help="itemized bound terms over a horizon grid")
    sp.add_argument("--which", required=True, choices=("rho", "thm3", "cor4", "thm4"))
    sp.add_argument("--problem", required=True)
    sp.add_argument("--horizon-grid", required=True, help="comma-separated")
    sp.add_argument("--constants", choices=("spectral", "file"), default="spectral")
    sp.add_argument("--constants-file")
    sp.add_argument("--function", default="cos")
    sp.add_argument("--eta0", type=float, default=0.5)
    sp.add_argument("--c3", type=float, default=0.6)
    sp.add_argument("--theta0", type=float, nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bounds)

    sp = sub.add_parser("stein-check", help="Stein solution residual and factor estimate")
    sp.add_argument("--function", default="cos")
    sp.add_argument("--dim", type=int, default=1)
    sp.add_argument("--sigma-scale", default="1,4", help="comma-separated multiples of I")
    sp.add_argument("--box", type=float, default=3.0)
    sp.add_argument("--step", type=float, default=0.1)
    sp.set_defaults(func=cmd_stein_check)

    sp = sub.add_parser("list-functions", help="test-function catalog")
    sp.add_argument("--dim", type=int, default=1)
    sp.set_defaults(func=cmd_list_functions)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BoundViolated as exc:
        print(f"bound violation: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except MCLTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
