"""Turbo smoothers built on the forward records and backward passes.

``run_tsa`` runs ``M`` independent backward passes, each producing one
realization of the whole state trajectory.  ``run_stsa`` runs a single pass
and returns the per-step marginal smoothed densities and point estimates.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .backward import BackwardConfig, BackwardResult, run_backward
from .errors import BackwardPassError
from .forward import ForwardRecord
from .gaussian import GaussianMessage, marginalize, product
from .model import CLGModelSpec

log = logging.getLogger(__name__)

THREADS_ENV = "TURBOSMOOTH_THREADS"


def fuse_marginal(fwd: GaussianMessage, bwd: GaussianMessage) -> GaussianMessage:
    """Combine a forward estimate with a backward likelihood (canonical product)."""
    return product(fwd, bwd)


@dataclass(frozen=True)
class SmoothedTrajectory:
    x_n: np.ndarray  # (T, D_N)
    x_l: np.ndarray  # (T, D_L)
    seed: Optional[int] = None
    pass_index: int = 0
    chosen: Optional[np.ndarray] = None  # (T,) selected particle index per step

    @property
    def T(self) -> int:
        return len(self.x_n)


@dataclass
class MarginalSmoothedSet:
    smoothed: List[GaussianMessage]  # full-state smoothed Gaussian per step
    linear: List[GaussianMessage]  # its leading D_L marginal
    particles: List[np.ndarray]  # forward particle sets S_fp,l
    log_weights: List[np.ndarray]  # normalized smoothed weights
    est_l: np.ndarray  # (T, D_L)
    est_n: np.ndarray  # (T, D_N)
    diagnostics: List[dict] = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.smoothed)


def _thread_count(threads: Optional[int]) -> int:
    if threads is not None:
        return max(1, int(threads))
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _trajectory(
    result: BackwardResult, dim_l: int, seed, pass_index: int, rng: Optional[np.random.Generator] = None
) -> SmoothedTrajectory:
    x_n = np.array([s.be_particle for s in result.states])
    chosen = np.array([-1 if s.chosen_index is None else s.chosen_index for s in result.states])
    if rng is None:
        x_l = np.array([g.mean[:dim_l] for g in result.smoothed])
    else:
        rows = []
        for g in result.smoothed:
            lin = marginalize(g, dim_l)
            rows.append(rng.multivariate_normal(lin.mean, lin.cov, method="cholesky"))
        x_l = np.array(rows)
    return SmoothedTrajectory(x_n=x_n, x_l=x_l, seed=seed, pass_index=pass_index, chosen=chosen)


def run_tsa(
    records: Sequence[ForwardRecord],
    ys,
    spec: CLGModelSpec,
    *,
    M: int = 10,
    n_iter: int = 1,
    weight_reuse: bool = False,
    seed: Optional[int] = None,
    sample_linear: bool = False,
    exchange: bool = True,
    threads: Optional[int] = None,
) -> List[SmoothedTrajectory]:
    """M seeded backward passes in trajectory-sampling mode.

    Each pass draws its randomness from its own child of ``SeedSequence(seed)``
    so the output does not depend on execution order or thread count.  A
    failed pass is logged and left out; if every pass fails the last error is
    raised.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    children = np.random.SeedSequence(seed).spawn(M)
    config = BackwardConfig(n_iter=n_iter, mode="tsa", weight_reuse=weight_reuse, exchange=exchange)

    def one_pass(m: int):
        rng = np.random.default_rng(children[m])
        try:
            result = run_backward(records, ys, spec, config, rng)
        except BackwardPassError as exc:
            log.warning("backward pass %d failed: %s", m, exc)
            return exc
        extra = rng if sample_linear else None
        return _trajectory(result, spec.dim_l, seed, m, extra)

    workers = _thread_count(threads)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(one_pass, range(M)))
    else:
        outputs = [one_pass(m) for m in range(M)]
    trajectories = [o for o in outputs if isinstance(o, SmoothedTrajectory)]
    if not trajectories:
        raise outputs[-1]
    return trajectories


def tsa_estimates(trajectories: Sequence[SmoothedTrajectory]):
    """Point estimates from TSA: the average over the trajectory realizations."""
    est_l = np.mean([t.x_l for t in trajectories], axis=0)
    est_n = np.mean([t.x_n for t in trajectories], axis=0)
    return est_l, est_n


def run_stsa(
    records: Sequence[ForwardRecord],
    ys,
    spec: CLGModelSpec,
    *,
    n_iter: int = 1,
    weight_reuse: bool = False,
    seed: Optional[int] = None,
    exchange: bool = True,
    terminal: str = "forward",
) -> MarginalSmoothedSet:
    """Single backward pass in marginal mode.

    The linear estimate at each step is the leading block of the smoothed
    full-state Gaussian; the nonlinear estimate is the smoothed-weight mean
    of the forward particles.
    """
    config = BackwardConfig(
        n_iter=n_iter, mode="stsa", weight_reuse=weight_reuse, exchange=exchange, terminal=terminal, seed=seed
    )
    result = run_backward(records, ys, spec, config)
    linear = [marginalize(g, spec.dim_l) for g in result.smoothed]
    particles = [r.cloud.particles for r in records]
    est_l = np.array([g.mean for g in linear])
    est_n = np.array([np.exp(w) @ x for w, x in zip(result.smoothed_log_weights, particles)])
    return MarginalSmoothedSet(
        smoothed=result.smoothed,
        linear=linear,
        particles=particles,
        log_weights=result.smoothed_log_weights,
        est_l=est_l,
        est_n=est_n,
        diagnostics=result.diagnostics,
    )


__all__ = [
    "MarginalSmoothedSet",
    "SmoothedTrajectory",
    "fuse_marginal",
    "run_stsa",
    "run_tsa",
    "tsa_estimates",
]
