"""Forward pass: an EKF over the whole state running alongside a SIR particle
filter over the nonlinear component.

In ``turbo`` mode the two filters exchange information every step: the
particle filter turns its propagated cloud into a Gaussian
pseudo-measurement that refines the EKF estimate before prediction, and
particles are weighted against the EKF's linear marginal.  In ``mpf`` mode
only the second direction is used, which gives a marginalized particle
filter driven by a single Kalman filter.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import AllWeightsZero, DimensionMismatch, SingularPrecision
from .gaussian import (
    Diagnostics,
    GaussianMessage,
    batch_log_gaussian,
    marginalize,
    normalize_log_weights,
    product,
    project_pairs,
    spd_inverse,
)
from .model import CLGModelSpec, LinearizedModel, full_drift, linearize

log = logging.getLogger(__name__)

WEIGHT_KEYS = ("fe", "sm", "bp", "pm", "be1", "ms")


@dataclass(frozen=True)
class ParticleCloud:
    particles: np.ndarray  # (N_p, D_N)
    log_weights: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.particles)

    def with_weights(self, key: str, log_w: np.ndarray) -> "ParticleCloud":
        weights = dict(self.log_weights)
        weights[key] = np.asarray(log_w, dtype=float)
        return replace(self, log_weights=weights)

    def weights(self, key: str = "fe") -> np.ndarray:
        """Normalized linear-domain weights for ``key`` (uniform if absent)."""
        if key not in self.log_weights:
            return np.full(self.size, 1.0 / self.size)
        return np.exp(normalize_log_weights(self.log_weights[key]))


@dataclass(frozen=True)
class ForwardRecord:
    step: int
    ekf_prediction: GaussianMessage
    ekf_estimate: GaussianMessage
    cloud: ParticleCloud
    linearization: LinearizedModel


@dataclass(frozen=True)
class ForwardConfig:
    n_particles: int = 100
    mode: str = "turbo"  # "turbo" or "mpf"
    n_iter: int = 1
    seed: Optional[int] = None

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.mode not in ("turbo", "mpf"):
            raise ValueError(f"unknown forward mode {self.mode!r}")
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")


def ekf_predict(estimate: GaussianMessage, lin: LinearizedModel, spec: CLGModelSpec) -> GaussianMessage:
    est = estimate.to_moment()
    mean = full_drift(spec, est.mean)
    cov = lin.F @ est.cov @ lin.F.T + spec.cov_w
    return GaussianMessage.from_moments(mean, 0.5 * (cov + cov.T))


def ekf_update(
    prediction: GaussianMessage, y: np.ndarray, lin: LinearizedModel, cov_e: np.ndarray
) -> GaussianMessage:
    """Measurement update in information form; returns both forms."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if lin.H.shape != (prediction.dim, y.size):
        raise DimensionMismatch(f"H has shape {lin.H.shape}, expected ({prediction.dim}, {y.size})")
    pred = prediction.to_canonical()
    W_e = spd_inverse(cov_e)
    HWe = lin.H @ W_e
    W = HWe @ lin.H.T + pred.W
    w = HWe @ (y - lin.v) + pred.w
    return GaussianMessage.from_canonical(0.5 * (W + W.T), w).to_moment()


def systematic_resample(log_w: np.ndarray, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    """Indices drawn by systematic resampling; ties go to the lowest index."""
    p = np.exp(normalize_log_weights(log_w))
    n = len(p) if n is None else n
    cdf = np.cumsum(p)
    cdf /= cdf[-1]
    positions = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, positions, side="right"), len(p) - 1)


def categorical_draw(log_w: np.ndarray, rng: np.random.Generator) -> int:
    p = np.exp(normalize_log_weights(log_w))
    cdf = np.cumsum(p)
    cdf /= cdf[-1]
    return int(min(np.searchsorted(cdf, rng.random(), side="right"), len(p) - 1))


def _batched_sqrt(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]


def propagate_particles(
    parents: np.ndarray, linear_belief: GaussianMessage, spec: CLGModelSpec, rng: np.random.Generator
) -> np.ndarray:
    """Draw x_N' from the transition kernel marginalized over the linear belief."""
    belief = linear_belief.to_moment()
    A = spec.trans_n(parents)
    mean = A @ belief.mean + spec.drift_n(parents)
    cov = A @ belief.cov @ np.swapaxes(A, 1, 2) + spec.cov_w_n
    noise = rng.standard_normal(parents.shape)
    return mean + (_batched_sqrt(cov) @ noise[..., None])[..., 0]


def pf_propagate(
    cloud: ParticleCloud,
    linear_belief: GaussianMessage,
    spec: CLGModelSpec,
    rng: np.random.Generator,
    diag: Optional[Diagnostics] = None,
) -> ParticleCloud:
    """Resample on the ``fe`` weights, then propagate; children carry uniform weights."""
    log_w = cloud.log_weights.get("fe", np.zeros(cloud.size))
    try:
        idx = systematic_resample(log_w, rng)
    except AllWeightsZero:
        log.warning("all forward weights vanished; resampling uniformly")
        if diag is not None:
            diag.degenerate_weights += 1
        idx = systematic_resample(np.zeros(cloud.size), rng)
    children = propagate_particles(cloud.particles[idx], linear_belief, spec, rng)
    return ParticleCloud(children, {"fe": np.full(cloud.size, -np.log(cloud.size))})


def measurement_log_likelihood(
    particles: np.ndarray, y: np.ndarray, linear_belief: GaussianMessage, spec: CLGModelSpec, relative: bool = False
) -> np.ndarray:
    """log N(y; B_j eta + g_j, B_j C B_j^T + C_e) for every particle.

    With ``relative`` the particle-independent part is dropped (see
    :func:`~turbosmooth.gaussian.batch_log_gaussian`).
    """
    belief = linear_belief.to_moment()
    B = spec.meas_gain(particles)
    resid = np.asarray(y, dtype=float) - (B @ belief.mean + spec.meas_offset(particles))
    cov = B @ belief.cov @ np.swapaxes(B, 1, 2) + spec.cov_e
    return batch_log_gaussian(resid, cov, drop_common=relative)


def pf_weight_update(
    cloud: ParticleCloud, y: np.ndarray, linear_belief: GaussianMessage, spec: CLGModelSpec
) -> ParticleCloud:
    """Multiply the ``fe`` weights by the marginalized measurement likelihood."""
    prior = cloud.log_weights.get("fe", np.zeros(cloud.size))
    log_lik = measurement_log_likelihood(cloud.particles, y, linear_belief, spec, relative=True)
    # A uniform prior is a common constant; leaving it out keeps these weights
    # bit-identical to the ones recomputed in the backward pass.
    log_w = log_lik if np.all(prior == prior[0]) else prior + log_lik
    return cloud.with_weights("fe", normalize_log_weights(log_w))


def linear_pseudo_measurements(points_n: np.ndarray, targets_n: np.ndarray, spec: CLGModelSpec):
    """Gaussian messages on x_L implied by observing ``x_N' = targets_n``.

    For each particle ``x_j`` the residual ``z_j = x_N' - f_N(x_j)`` equals
    ``A_N(x_j) x_L + w_N``, giving precision ``A^T W_wN A`` and transformed
    mean ``A^T W_wN z_j``.  Returns ``(mean, cov, valid)``; rows whose
    precision is singular carry no information and are marked invalid.
    """
    A = spec.trans_n(points_n)
    z = targets_n - spec.drift_n(points_n)
    W_wn = spd_inverse(spec.cov_w_n)
    At_W = np.swapaxes(A, 1, 2) @ W_wn
    prec = At_W @ A
    info = (At_W @ z[..., None])[..., 0]
    n, d_l = info.shape
    mean = np.zeros((n, d_l))
    cov = np.zeros((n, d_l, d_l))
    valid = np.ones(n, dtype=bool)
    try:
        cov[:] = spd_inverse(prec, error=SingularPrecision)
    except SingularPrecision:
        for j in range(n):
            try:
                cov[j] = spd_inverse(prec[j], error=SingularPrecision)
            except SingularPrecision:
                valid[j] = False
    mean[valid] = (cov[valid] @ info[valid][..., None])[..., 0]
    return mean, cov, valid


def combine_pseudo_measurements(
    weights: np.ndarray,
    mean_l: np.ndarray,
    cov_l: np.ndarray,
    valid: np.ndarray,
    points_n: np.ndarray,
    diag: Optional[Diagnostics] = None,
) -> GaussianMessage:
    """Project the weighted (Gaussian in x_L, point in x_N) pairs onto one
    full-state Gaussian.  Particles without linear information are dropped;
    if none remain the result is flat."""
    d = mean_l.shape[1] + points_n.shape[1]
    keep = valid & (weights > 0)
    if not np.any(keep):
        if diag is not None:
            diag.vacuous_pm += 1
        return GaussianMessage.flat(d)
    g = project_pairs(weights[keep], mean_l[keep], cov_l[keep], points_n[keep], diag)
    return g.to_canonical(diag)


def run_forward(spec: CLGModelSpec, ys: Sequence[np.ndarray], config: ForwardConfig) -> List[ForwardRecord]:
    """Run the forward filter over ``ys`` and archive one record per step."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if len(ys) < 1:
        raise ValueError("need at least one measurement")
    rng = np.random.default_rng(config.seed)
    n = config.n_particles
    n_iter = config.n_iter if config.mode == "turbo" else 1
    sl = slice(0, spec.dim_l)

    prediction = spec.prior.to_moment()
    prior_n = marginalize(prediction, slice(spec.dim_l, spec.dim))
    first = prior_n.mean + (_batched_sqrt(prior_n.cov) @ rng.standard_normal((n, spec.dim_n, 1)))[..., 0]
    cloud = ParticleCloud(first, {"fe": np.full(n, -np.log(n))})

    records = []
    for step, y in enumerate(ys):
        meas_lin = linearize(spec, prediction.mean, prediction.mean)
        estimate = ekf_update(prediction, y, meas_lin, spec.cov_e)
        belief = estimate
        for _ in range(n_iter):
            weighted = pf_weight_update(cloud, y, marginalize(belief, sl), spec)
            idx = systematic_resample(weighted.log_weights["fe"], rng)
            parents = weighted.particles[idx]
            children = propagate_particles(parents, marginalize(belief, sl), spec, rng)
            if config.mode == "turbo":
                mean_l, cov_l, valid = linear_pseudo_measurements(parents, children, spec)
                pm = combine_pseudo_measurements(np.full(n, 1.0 / n), mean_l, cov_l, valid, parents)
                belief = product(estimate, pm).to_moment()
        lin = linearize(spec, belief.mean, prediction.mean)
        records.append(
            ForwardRecord(
                step=step,
                ekf_prediction=prediction,
                ekf_estimate=estimate,
                cloud=weighted,
                linearization=lin,
            )
        )
        prediction = ekf_predict(belief, lin, spec)
        cloud = ParticleCloud(children, {"fe": np.full(n, -np.log(n))})
    return records


def forward_estimates(records: Sequence[ForwardRecord], dim_l: int):
    """Filtered point estimates: EKF linear mean and weighted particle mean."""
    est_l = np.array([r.ekf_estimate.to_moment().mean[:dim_l] for r in records])
    est_n = np.array([r.cloud.weights("fe") @ r.cloud.particles for r in records])
    return est_l, est_n


def dump_forward_records(records: Sequence[ForwardRecord], directory) -> None:
    """Write records as a bundle of CSV files, one per field class.

    ``prediction.csv``: step, mean_*, cov_* (row-major);
    ``estimate.csv``: step, W_* (row-major), w_*;
    ``particles.csv``: step, j, x_*, log_w_fe;
    ``linearization.csv``: step, F_*, u_*, H_*, v_*.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)

    def _write(name, header, rows):
        with open(out / name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)

    def _num(a):
        return [repr(float(v)) for v in np.ravel(a)]

    def _names(prefix, a):
        return [f"{prefix}_{i}" for i in range(np.size(a))]

    r0 = records[0]
    pred0 = r0.ekf_prediction.to_moment()
    _write(
        "prediction.csv",
        ["step"] + _names("mean", pred0.mean) + _names("cov", pred0.cov),
        ([r.step] + _num(r.ekf_prediction.to_moment().mean) + _num(r.ekf_prediction.to_moment().cov) for r in records),
    )
    est0 = r0.ekf_estimate.to_canonical()
    _write(
        "estimate.csv",
        ["step"] + _names("W", est0.W) + _names("w", est0.w),
        ([r.step] + _num(r.ekf_estimate.to_canonical().W) + _num(r.ekf_estimate.to_canonical().w) for r in records),
    )
    _write(
        "particles.csv",
        ["step", "j"] + _names("x", r0.cloud.particles[0]) + ["log_w_fe"],
        (
            [r.step, j] + _num(x) + [repr(float(lw))]
            for r in records
            for j, (x, lw) in enumerate(zip(r.cloud.particles, r.cloud.log_weights["fe"]))
        ),
    )
    lin0 = r0.linearization
    _write(
        "linearization.csv",
        ["step"] + _names("F", lin0.F) + _names("u", lin0.u) + _names("H", lin0.H) + _names("v", lin0.v),
        (
            [r.step] + _num(r.linearization.F) + _num(r.linearization.u) + _num(r.linearization.H) + _num(r.linearization.v)
            for r in records
        ),
    )
