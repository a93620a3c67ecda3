"""Command-line entry point.

Subcommands: ``simulate``, ``filter``, ``smooth`` and ``bench``.  Options
may come from a flat JSON file (``--config``) whose keys are the long flag
names with dashes replaced by underscores; flags given on the command line
override it.  Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import importlib.util
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import TurboSmoothError
from .evaluation import ALGORITHMS, BenchmarkConfig, benchmark, rmse, run_algorithm, write_metrics_csv, write_metrics_json
from .forward import dump_forward_records
from .model import (
    AgentMotionParams,
    CLGModelSpec,
    agent_clg_spec,
    read_trajectory_csv,
    simulate,
    simulate_spec,
    write_trajectory_csv,
)

log = logging.getLogger("turbosmooth")

MODEL_FIELDS = [f.name for f in dataclasses.fields(AgentMotionParams)]
VECTOR_FIELDS = ("v0", "p0")


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _vector(text: str):
    try:
        return tuple(float(v) for v in str(text).split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("agent model")
    for name in MODEL_FIELDS:
        kind = _vector if name in VECTOR_FIELDS else float
        g.add_argument(f"--{name}", type=kind, default=None)
    g.add_argument("--model", default=None, help="Python file defining build_spec() -> CLGModelSpec")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON file with default option values")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_estimation_flags(p: argparse.ArgumentParser, algos) -> None:
    p.add_argument("-i", "--input", default=None, help="trajectory CSV (t, x.., y..)")
    p.add_argument("--algo", choices=algos, default=None)
    p.add_argument("--np", dest="np", type=int, default=None, help="number of particles")
    p.add_argument("-o", "--output", default=None, help="estimates CSV")
    p.add_argument("--metrics", default=None, help="metrics JSON")
    p.add_argument("--dump-forward", default=None, help="directory for the forward-record CSV bundle")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="turbosmooth", description="Turbo smoothing for conditionally linear Gaussian models")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", help="simulate a trajectory")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("-o", "--output", default=None)

    p = sub.add_parser("filter", help="run a forward filter")
    _add_common(p)
    _add_model_flags(p)
    _add_estimation_flags(p, ("mpf", "tf"))

    p = sub.add_parser("smooth", help="run a smoother")
    _add_common(p)
    _add_model_flags(p)
    _add_estimation_flags(p, ("stsa", "tsa"))
    p.add_argument("--nit", type=int, default=None, help="turbo iterations per backward step")
    p.add_argument("--M", type=int, default=None, help="backward passes (tsa)")
    p.add_argument("--weight-reuse", action="store_const", const=True, default=None)
    p.add_argument("--sample-linear", action="store_const", const=True, default=None)
    p.add_argument("--no-exchange", action="store_const", const=True, default=None)
    p.add_argument("--diagnostics", default=None, help="per-step diagnostics as JSON lines (stsa)")

    p = sub.add_parser("bench", help="Monte Carlo benchmark on the agent model")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--algos", default=None, help=f"comma-separated subset of {','.join(ALGORITHMS)}")
    p.add_argument("--np", dest="np", type=_int_list, default=None, help="comma-separated particle counts")
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--nit", type=int, default=None)
    p.add_argument("--M", type=int, default=None)
    p.add_argument("--weight-reuse", action="store_const", const=True, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("-o", "--output", default=None, help="metrics CSV")
    p.add_argument("--json", default=None, help="metrics JSON")
    return parser


DEFAULTS = {
    "seed": 0,
    "T": 200,
    "np": 100,
    "nit": 1,
    "M": 10,
    "runs": 50,
    "weight_reuse": False,
    "sample_linear": False,
    "no_exchange": False,
    "workers": 1,
}


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the JSON config file and command-line flags."""
    opts = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ValidationError("config file must hold a JSON object")
        opts.update({k.replace("-", "_"): v for k, v in loaded.items()})
    opts.update({k: v for k, v in vars(args).items() if v is not None and k != "config"})
    for key in ("np", "nit", "M", "runs", "T", "workers"):
        value = opts.get(key)
        if key == "np" and args.command == "bench":
            value = _int_list(value) if isinstance(value, str) else list(np.atleast_1d(value))
            if not value or min(value) < 1:
                raise ValidationError("--np values must be >= 1")
            opts[key] = [int(v) for v in value]
            continue
        if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
            raise ValidationError(f"{key} must be an integer")
        floor = 0 if key == "nit" else 1
        if value < floor:
            raise ValidationError(f"{key} must be >= {floor}")
    return opts


def model_params(opts: dict) -> AgentMotionParams:
    values = {k: opts[k] for k in MODEL_FIELDS if k in opts}
    for k in VECTOR_FIELDS:
        if k in values:
            values[k] = tuple(float(v) for v in np.atleast_1d(values[k]))
    try:
        params = AgentMotionParams(**values)
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    if not params.rho < 1.0:
        raise ValidationError("rho must lie in (0, 1)")
    return params


def load_model_file(path) -> CLGModelSpec:
    spec_obj = importlib.util.spec_from_file_location("turbosmooth_user_model", path)
    if spec_obj is None or spec_obj.loader is None:
        raise ValidationError(f"cannot load model file {path}")
    module = importlib.util.module_from_spec(spec_obj)
    try:
        spec_obj.loader.exec_module(module)
    except OSError as exc:
        raise ValidationError(f"cannot load model file {path}: {exc}") from exc
    if not hasattr(module, "build_spec"):
        raise ValidationError(f"{path} does not define build_spec()")
    spec = module.build_spec()
    if not isinstance(spec, CLGModelSpec):
        raise ValidationError("build_spec() must return a CLGModelSpec")
    return spec


def _model(opts: dict):
    if opts.get("model"):
        return None, load_model_file(opts["model"])
    params = model_params(opts)
    return params, agent_clg_spec(params)


def _require(opts: dict, key: str, flag: str):
    if not opts.get(key):
        raise ValidationError(f"{flag} is required")
    return opts[key]


def write_estimates_csv(est_l: np.ndarray, est_n: np.ndarray, path) -> None:
    """Columns ``t, xl0.., xn0..`` with one row per step."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"xl{i}" for i in range(est_l.shape[1])] + [f"xn{i}" for i in range(est_n.shape[1])])
        for t, (a, b) in enumerate(zip(est_l, est_n), start=1):
            writer.writerow([t] + [repr(float(v)) for v in a] + [repr(float(v)) for v in b])


def cmd_simulate(opts: dict) -> str:
    params, spec = _model(opts)
    out = _require(opts, "output", "-o/--output")
    traj = simulate(params, opts["T"], opts["seed"]) if params is not None else simulate_spec(spec, opts["T"], opts["seed"])
    write_trajectory_csv(traj, out)
    return f"simulate: T={traj.T} seed={opts['seed']} -> {out}"


def _load_trajectory(opts: dict, spec: CLGModelSpec):
    path = _require(opts, "input", "-i/--input")
    try:
        traj = read_trajectory_csv(path)
    except (OSError, ValueError, IndexError) as exc:
        raise ValidationError(f"cannot read trajectory {path}: {exc}") from exc
    if traj.measurements.shape[1] != spec.dim_y:
        raise ValidationError(f"{path} has {traj.measurements.shape[1]} measurement columns, model expects {spec.dim_y}")
    return traj


def cmd_estimate(opts: dict, command: str) -> str:
    _, spec = _model(opts)
    traj = _load_trajectory(opts, spec)
    algo = opts.get("algo") or ("mpf" if command == "filter" else "stsa")
    if command == "filter" and algo not in ("mpf", "tf"):
        raise ValidationError("filter supports --algo mpf or tf")
    if command == "smooth" and algo not in ("stsa", "tsa"):
        raise ValidationError("smooth supports --algo stsa or tsa")
    est_l, est_n, secs, extra = run_algorithm(
        algo,
        spec,
        traj.measurements,
        n_particles=opts["np"],
        n_iter=opts["nit"],
        M=opts["M"],
        weight_reuse=bool(opts["weight_reuse"]),
        sample_linear=bool(opts["sample_linear"]),
        exchange=not opts["no_exchange"],
        seed=opts["seed"],
    )
    metrics = {
        "algorithm": algo,
        "N_p": opts["np"],
        "N_it": opts["nit"] if command == "smooth" else None,
        "M": opts["M"] if algo == "tsa" else 1,
        "T": traj.T,
        "seed": opts["seed"],
        "ctb_s": secs,
    }
    if traj.states.shape[1] == spec.dim:
        metrics["rmse_l"] = rmse(est_l, traj.states[:, : spec.dim_l])
        metrics["rmse_n"] = rmse(est_n, traj.states[:, spec.dim_l :])
    if opts.get("output"):
        write_estimates_csv(est_l, est_n, opts["output"])
    if opts.get("metrics"):
        Path(opts["metrics"]).write_text(json.dumps(metrics, indent=2) + "\n")
    if opts.get("dump_forward"):
        dump_forward_records(extra["records"], opts["dump_forward"])
    if opts.get("diagnostics") and "smoothed" in extra:
        with open(opts["diagnostics"], "w") as fh:
            for item in extra["smoothed"].diagnostics:
                fh.write(json.dumps(item) + "\n")
    score = ""
    if "rmse_l" in metrics:
        score = f" rmse_l={metrics['rmse_l']:.6g} rmse_n={metrics['rmse_n']:.6g}"
    return f"{command}: algo={algo} N_p={opts['np']} T={traj.T}{score} ctb={secs:.3f}s"


def cmd_bench(opts: dict) -> str:
    if opts.get("model"):
        raise ValidationError("bench runs on the agent model only")
    algos = opts.get("algos") or ",".join(ALGORITHMS)
    if isinstance(algos, str):
        algos = [a.strip() for a in algos.split(",") if a.strip()]
    try:
        config = BenchmarkConfig(
            algorithms=tuple(algos),
            n_particles=tuple(opts["np"]),
            runs=opts["runs"],
            T=opts["T"],
            seed=opts["seed"],
            n_iter=opts["nit"],
            M=opts["M"],
            weight_reuse=bool(opts["weight_reuse"]),
            params=model_params(opts),
            workers=opts["workers"],
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    rows = benchmark(config)
    if opts.get("output"):
        write_metrics_csv(rows, opts["output"])
    if opts.get("json"):
        write_metrics_json(rows, opts["json"])
    for r in rows:
        print(f"bench: alg={r.algorithm} N_p={r.n_particles} rmse_l={r.rmse_l:.6g} rmse_n={r.rmse_n:.6g} ctb={r.ctb_s:.3f}s")
    return f"bench: {len(rows)} rows, runs={config.runs}"


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        opts = resolve_options(args)
        if args.command == "simulate":
            summary = cmd_simulate(opts)
        elif args.command == "bench":
            summary = cmd_bench(opts)
        else:
            summary = cmd_estimate(opts, args.command)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TurboSmoothError, OSError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
