"""Monte Carlo harness: RMSE and computation time per block (CTB).

RMSE of a component group (linear or nonlinear) is the square root of the
squared Euclidean error averaged over time steps and runs.  CTB is the
wall-clock time of the filter/smoother call on one T-step measurement
block; it is summarized as the median of per-group means over runs.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import LengthMismatch, TurboSmoothError
from .forward import ForwardConfig, forward_estimates, run_forward
from .model import AgentMotionParams, CLGModelSpec, agent_clg_spec, simulate
from .smoothers import run_stsa, run_tsa, tsa_estimates

log = logging.getLogger(__name__)

ALGORITHMS = ("mpf", "tf", "tsa", "stsa")
CSV_COLUMNS = ("alg", "N_p", "N_it", "M", "runs", "rmse_l", "rmse_n", "ctb_s")
CTB_GROUP = 5


@dataclass
class RunMetrics:
    algorithm: str
    n_particles: int
    n_iter: int
    M: int
    rmse_l: float
    rmse_n: float
    ctb_s: float
    runs: int
    seed: Optional[int] = None
    failed: bool = False
    mse_l_runs: List[float] = field(default_factory=list, repr=False)
    mse_n_runs: List[float] = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {
            "alg": self.algorithm,
            "N_p": self.n_particles,
            "N_it": self.n_iter,
            "M": self.M,
            "runs": self.runs,
            "rmse_l": self.rmse_l,
            "rmse_n": self.rmse_n,
            "ctb_s": self.ctb_s,
        }


def mean_squared_error(estimates, truth) -> float:
    """Time-averaged squared Euclidean error of a sequence of vectors."""
    est = np.asarray(estimates, dtype=float)
    ref = np.asarray(truth, dtype=float)
    if est.shape[0] != ref.shape[0]:
        raise LengthMismatch(f"{est.shape[0]} estimates for {ref.shape[0]} true states")
    if est.shape != ref.shape:
        raise LengthMismatch(f"estimate shape {est.shape} does not match truth shape {ref.shape}")
    if est.shape[0] == 0:
        raise LengthMismatch("empty sequences")
    diff = (est - ref).reshape(est.shape[0], -1)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def rmse(estimates, truth) -> float:
    return float(np.sqrt(mean_squared_error(estimates, truth)))


def median_of_means(values: Sequence[float], group: int = CTB_GROUP) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return float("nan")
    means = [values[i : i + group].mean() for i in range(0, values.size, group)]
    return float(np.median(means))


def split_seed(seed: Optional[int]) -> Tuple[Optional[int], Optional[int]]:
    """(forward seed, backward seed) derived from one algorithm seed."""
    if seed is None:
        return None, None
    fwd, bwd = np.random.SeedSequence(seed).generate_state(2)
    return int(fwd), int(bwd)


def run_algorithm(
    algorithm: str,
    spec: CLGModelSpec,
    ys,
    *,
    n_particles: int = 100,
    n_iter: int = 1,
    M: int = 10,
    weight_reuse: bool = False,
    sample_linear: bool = False,
    exchange: bool = True,
    seed: Optional[int] = None,
    records=None,
):
    """Point estimates of one algorithm on one measurement block.

    Returns ``(est_l, est_n, seconds, extra)``.  ``records`` may carry a
    precomputed turbo forward pass; its time is then not included.
    ``extra`` holds the forward records and smoother output for callers
    that dump them.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    fwd_seed, bwd_seed = split_seed(seed)
    start = time.perf_counter()
    if algorithm == "mpf":
        records = run_forward(spec, ys, ForwardConfig(n_particles, "mpf", 1, fwd_seed))
        est_l, est_n = forward_estimates(records, spec.dim_l)
        return est_l, est_n, time.perf_counter() - start, {"records": records}
    if records is None:
        records = run_forward(spec, ys, ForwardConfig(n_particles, "turbo", 1, fwd_seed))
    extra = {"records": records}
    if algorithm == "tf":
        est_l, est_n = forward_estimates(records, spec.dim_l)
    elif algorithm == "stsa":
        out = run_stsa(records, ys, spec, n_iter=n_iter, weight_reuse=weight_reuse, seed=bwd_seed, exchange=exchange)
        est_l, est_n = out.est_l, out.est_n
        extra["smoothed"] = out
    else:
        trajs = run_tsa(
            records,
            ys,
            spec,
            M=M,
            n_iter=n_iter,
            weight_reuse=weight_reuse,
            seed=bwd_seed,
            sample_linear=sample_linear,
            exchange=exchange,
        )
        est_l, est_n = tsa_estimates(trajs)
        extra["trajectories"] = trajs
    return est_l, est_n, time.perf_counter() - start, extra


@dataclass(frozen=True)
class BenchmarkConfig:
    algorithms: Tuple[str, ...] = ALGORITHMS
    n_particles: Tuple[int, ...] = (100,)
    runs: int = 50
    T: int = 200
    seed: int = 0
    n_iter: int = 1
    M: int = 10
    weight_reuse: bool = False
    params: AgentMotionParams = field(default_factory=AgentMotionParams)
    workers: int = 1

    def __post_init__(self):
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise ValueError(f"unknown algorithms {bad}")
        if self.runs < 1 or self.T < 1 or self.M < 1 or self.n_iter < 0:
            raise ValueError("runs, T and M must be >= 1 and n_iter >= 0")
        if any(n < 1 for n in self.n_particles):
            raise ValueError("particle counts must be >= 1")


def run_seeds(seed: int, run: int) -> Tuple[int, int]:
    """(simulation seed, algorithm seed) for one Monte Carlo run."""
    sim, alg = np.random.SeedSequence([seed, run]).generate_state(2)
    return int(sim), int(alg)


def _one_run(config: BenchmarkConfig, run: int) -> Dict[Tuple[str, int], tuple]:
    """All cells of one Monte Carlo run: {(alg, N_p): (mse_l, mse_n, seconds) or None}."""
    sim_seed, alg_seed = run_seeds(config.seed, run)
    spec = agent_clg_spec(config.params)
    traj = simulate(config.params, config.T, sim_seed)
    ys = traj.measurements
    truth_l, truth_n = traj.states[:, : spec.dim_l], traj.states[:, spec.dim_l :]
    fwd_seed, _ = split_seed(alg_seed)
    out = {}
    for n_p in config.n_particles:
        records, fwd_time = None, 0.0
        if any(a != "mpf" for a in config.algorithms):
            start = time.perf_counter()
            try:
                records = run_forward(spec, ys, ForwardConfig(n_p, "turbo", 1, fwd_seed))
            except (TurboSmoothError, np.linalg.LinAlgError) as exc:
                log.warning("run %d, forward pass with N_p=%d failed: %s", run, n_p, exc)
            fwd_time = time.perf_counter() - start
        for alg in config.algorithms:
            if alg != "mpf" and records is None:
                out[(alg, n_p)] = None
                continue
            try:
                est_l, est_n, secs, _ = run_algorithm(
                    alg,
                    spec,
                    ys,
                    n_particles=n_p,
                    n_iter=config.n_iter,
                    M=config.M,
                    weight_reuse=config.weight_reuse,
                    seed=alg_seed,
                    records=None if alg == "mpf" else records,
                )
            except (TurboSmoothError, np.linalg.LinAlgError) as exc:
                log.warning("run %d, %s with N_p=%d failed: %s", run, alg, n_p, exc)
                out[(alg, n_p)] = None
                continue
            if alg != "mpf":
                secs += fwd_time
            out[(alg, n_p)] = (mean_squared_error(est_l, truth_l), mean_squared_error(est_n, truth_n), secs)
    return out


def benchmark(config: BenchmarkConfig) -> List[RunMetrics]:
    """Monte Carlo comparison on the agent model.

    Every algorithm sees the same simulated trajectories; the smoothers
    share one turbo forward pass per run, and its time is added to their CTB.
    """
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            per_run = list(pool.map(_one_run, [config] * config.runs, range(config.runs)))
    else:
        per_run = [_one_run(config, r) for r in range(config.runs)]
    rows = []
    for n_p in config.n_particles:
        for alg in config.algorithms:
            cells = [run[(alg, n_p)] for run in per_run]
            failed = any(c is None for c in cells)
            good = [c for c in cells if c is not None]
            mse_l = [c[0] for c in good]
            mse_n = [c[1] for c in good]
            rows.append(
                RunMetrics(
                    algorithm=alg,
                    n_particles=n_p,
                    n_iter=config.n_iter,
                    M=config.M if alg == "tsa" else 1,
                    rmse_l=float(np.sqrt(np.mean(mse_l))) if good else float("nan"),
                    rmse_n=float(np.sqrt(np.mean(mse_n))) if good else float("nan"),
                    ctb_s=median_of_means([c[2] for c in good]),
                    runs=len(good),
                    seed=config.seed,
                    failed=failed,
                    mse_l_runs=mse_l,
                    mse_n_runs=mse_n,
                )
            )
    return rows


def write_metrics_csv(rows: Sequence[RunMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.row().items()})


def write_metrics_json(rows: Sequence[RunMetrics], path) -> None:
    payload = []
    for r in rows:
        item = asdict(r)
        item.pop("mse_l_runs")
        item.pop("mse_n_runs")
        payload.append(item)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
