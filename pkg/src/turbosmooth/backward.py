"""Backward information turbo filtering.

One backward pass walks the forward records from ``T`` down to 1.  Two
backward filters run side by side at each step: an information filter over
the whole state, paired with the forward EKF, and a particle re-weighting
filter over the nonlinear component, paired with the forward particle
filter.  They exchange pseudo-measurements for ``n_iter`` iterations, after
which the step emits

* a Gaussian backward estimate of the full state, and
* a backward estimate of the nonlinear component: one particle drawn from
  the smoothed weights (``tsa``) or their weighted mean (``stsa``).

The per-step smoothed information (full-state Gaussian and particle
weights) is kept for the smoothers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import AllWeightsZero, BackwardPassError, SingularPrecision, TurboSmoothError
from .forward import (
    ForwardRecord,
    ParticleCloud,
    categorical_draw,
    combine_pseudo_measurements,
    linear_pseudo_measurements,
    measurement_log_likelihood,
)
from .gaussian import (
    Diagnostics,
    GaussianMessage,
    backward_predict,
    batch_log_gaussian,
    effective_sample_size,
    marginalize,
    normalize_log_weights,
    product,
    psd_clamp,
    spd_inverse,
)
from .model import CLGModelSpec, LinearizedModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackwardConfig:
    n_iter: int = 1
    mode: str = "stsa"  # "tsa" samples one particle per step, "stsa" takes the weighted mean
    weight_reuse: bool = False
    exchange: bool = True
    terminal: str = "forward"  # "forward": start from the EKF estimate at T; "measurement": from y_T only
    seed: Optional[int] = None

    def __post_init__(self):
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        if self.mode not in ("tsa", "stsa"):
            raise ValueError(f"unknown backward mode {self.mode!r}")
        if self.terminal not in ("forward", "measurement"):
            raise ValueError(f"unknown terminal initialization {self.terminal!r}")


@dataclass(frozen=True)
class BackwardState:
    step: int
    be_gauss: GaussianMessage
    be_particle: np.ndarray
    chosen_index: Optional[int] = None


@dataclass(frozen=True)
class PseudoMeasurementL:
    """Per-particle Gaussian messages on x_L built from the next backward particle."""

    z: np.ndarray  # (N_p, D_N)
    mean: np.ndarray  # (N_p, D_L)
    cov: np.ndarray  # (N_p, D_L, D_L)
    valid: np.ndarray  # (N_p,) False where the message is flat

    @property
    def precision(self) -> np.ndarray:
        out = np.zeros_like(self.cov)
        out[self.valid] = spd_inverse(self.cov[self.valid])
        return out


@dataclass
class IterationScratch:
    """Quantities carried between Phase II iterations (all weights in log domain)."""

    k: int
    log_w_fe1: np.ndarray
    log_w_be1: np.ndarray
    log_w_sm: Optional[np.ndarray] = None
    log_w_pm: Optional[np.ndarray] = None
    log_w_bp: Optional[np.ndarray] = None
    pm: Optional[GaussianMessage] = None
    be1: Optional[GaussianMessage] = None
    sm: Optional[GaussianMessage] = None
    sm_l: Optional[GaussianMessage] = None
    z_mean: Optional[np.ndarray] = None
    z_cov: Optional[np.ndarray] = None


@dataclass
class BackwardResult:
    states: List[BackwardState]
    smoothed_log_weights: List[np.ndarray]
    smoothed: List[GaussianMessage]
    be1: List[GaussianMessage]
    diagnostics: List[dict] = field(default_factory=list)


def measurement_message(lin: LinearizedModel, y: np.ndarray, cov_e: np.ndarray) -> GaussianMessage:
    """Canonical likelihood of the linearized measurement: ``H W_e H^T``, ``H W_e (y - v)``."""
    W_e = spd_inverse(cov_e)
    HWe = lin.H @ W_e
    W = HWe @ lin.H.T
    return GaussianMessage.from_canonical(0.5 * (W + W.T), HWe @ (np.asarray(y, float) - lin.v))


def _with_moments(g: GaussianMessage, diag=None) -> GaussianMessage:
    try:
        return g.to_moment(diag)
    except SingularPrecision:
        return g


def init_terminal(
    record: ForwardRecord,
    rng: np.random.Generator,
    mode: str = "tsa",
    *,
    terminal: str = "forward",
    spec: Optional[CLGModelSpec] = None,
    y: Optional[np.ndarray] = None,
) -> BackwardState:
    """Backward messages entering the first recursion.

    The Gaussian part copies the EKF estimate at ``T`` (``terminal="forward"``)
    or, for an exact backward information filter, uses the measurement
    likelihood at ``T`` alone (``terminal="measurement"``, needs ``spec``
    and ``y``).
    """
    if terminal == "forward":
        est = record.ekf_estimate.to_canonical()
        be = GaussianMessage.from_canonical(est.W, est.w)
    else:
        be = measurement_message(record.linearization, y, spec.cov_e)
    be = _with_moments(be)
    cloud = record.cloud
    if mode == "tsa":
        j = categorical_draw(cloud.log_weights["fe"], rng)
        return BackwardState(record.step, be, cloud.particles[j].copy(), j)
    return BackwardState(record.step, be, cloud.weights("fe") @ cloud.particles, None)


def phase1(be_next: BackwardState, record: ForwardRecord, spec: CLGModelSpec, diag: Optional[Diagnostics] = None):
    """Backward prediction, linear marginal of the next backward estimate and
    the per-particle pseudo-measurements on x_L.

    Returns ``(bp, be_l_next, pm_l)``; ``be_l_next`` is None when the next
    backward estimate has no moment form.
    """
    lin = record.linearization
    bp = backward_predict(be_next.be_gauss, lin.F, lin.u, spec.cov_w, diag)
    try:
        be_l_next = marginalize(be_next.be_gauss, spec.dim_l, diag)
    except SingularPrecision:
        be_l_next = None
    points = record.cloud.particles
    targets = np.broadcast_to(be_next.be_particle, points.shape)
    mean, cov, valid = linear_pseudo_measurements(points, targets, spec)
    z = targets - spec.drift_n(points)
    return bp, be_l_next, PseudoMeasurementL(z=z, mean=mean, cov=cov, valid=valid)


def phase2_step1(
    pm_l: PseudoMeasurementL,
    cloud: ParticleCloud,
    log_w_fe1: np.ndarray,
    log_w_be1: np.ndarray,
    diag: Optional[Diagnostics] = None,
    exchange: bool = True,
):
    """Smoothed particle weights and the moment-matched full-state pseudo-measurement.

    Returns ``(log_W_sm, pm)`` where ``log_W_sm`` is normalized.
    """
    try:
        log_W = normalize_log_weights(log_w_fe1 + log_w_be1)
    except AllWeightsZero:
        log.warning("smoothed weights vanished; falling back to forward weights")
        if diag is not None:
            diag.degenerate_weights += 1
        log_W = normalize_log_weights(cloud.log_weights["fe"])
    dim = pm_l.mean.shape[1] + cloud.particles.shape[1]
    if not exchange:
        return log_W, GaussianMessage.flat(dim)
    pm = combine_pseudo_measurements(np.exp(log_W), pm_l.mean, pm_l.cov, pm_l.valid, cloud.particles, diag)
    return log_W, pm


def phase2_step2(
    bp: GaussianMessage, pm: GaussianMessage, ekf_estimate: GaussianMessage, dim_l: int, diag=None
):
    """``be1 = bp * pm``, ``sm = fe1 * be1`` and the linear marginal of ``sm``."""
    be1 = product(bp, pm)
    sm = product(ekf_estimate, be1).to_moment(diag)
    return be1, sm, marginalize(sm, dim_l)


def phase2_step3(
    be_l_next: Optional[GaussianMessage],
    sm_l: GaussianMessage,
    cloud: ParticleCloud,
    spec: CLGModelSpec,
    diag: Optional[Diagnostics] = None,
    return_z: bool = False,
):
    """Pseudo-measurement weights for the particles from the linear dynamics.

    ``z = x_L' - A_L(x_j) x_L`` is Gaussian with mean ``eta_be' - A_L eta_sm``
    and covariance ``C_be' - A_L C_sm A_L^T`` (clamped to PSD); the weight is
    its convolution with ``N(f_L(x_j), C_wL)``, i.e.
    ``N(eta_z - f_L(x_j); 0, C_z + C_wL)``.
    """
    n = cloud.size
    if be_l_next is None:
        out = np.zeros(n)
        return (out, None, None) if return_z else out
    x = cloud.particles
    A = spec.trans_l(x)
    z_mean = be_l_next.mean - A @ sm_l.mean
    z_cov = be_l_next.cov - A @ sm_l.cov @ np.swapaxes(A, 1, 2)
    # the difference of two covariances may be indefinite; it is only ever
    # added to the process noise, so lifting it to PSD (possibly zero) suffices
    z_cov = psd_clamp(z_cov, diag, allow_zero=True)
    log_w = batch_log_gaussian(z_mean - spec.drift_l(x), z_cov + spec.cov_w_l, diag=diag)
    return (log_w, z_mean, z_cov) if return_z else log_w


def phase2_step4(
    be_particle_next: np.ndarray,
    sm_l: GaussianMessage,
    cloud: ParticleCloud,
    spec: CLGModelSpec,
    log_w_pm: np.ndarray,
    diag: Optional[Diagnostics] = None,
):
    """Backward weights ``N(x_be' ; A_N eta_sm + f_N, A_N C_sm A_N^T + C_wN)``.

    Returns ``(log_w_bp, log_w_be1)`` with ``w_be1 = w_bp * w_pm``.
    """
    x = cloud.particles
    A = spec.trans_n(x)
    mean = A @ sm_l.mean + spec.drift_n(x)
    cov = A @ sm_l.cov @ np.swapaxes(A, 1, 2) + spec.cov_w_n
    log_w_bp = batch_log_gaussian(be_particle_next - mean, cov, diag=diag)
    return log_w_bp, log_w_bp + log_w_pm


def phase2_step5(y: np.ndarray, sm_l: GaussianMessage, cloud: ParticleCloud, spec: CLGModelSpec) -> np.ndarray:
    """Measurement weights against the smoothed linear marginal (normalized, log domain)."""
    return normalize_log_weights(measurement_log_likelihood(cloud.particles, y, sm_l, spec, relative=True))


def phase3(
    scratch: IterationScratch,
    bp: GaussianMessage,
    pm_l: PseudoMeasurementL,
    record: ForwardRecord,
    y: np.ndarray,
    spec: CLGModelSpec,
    rng: Optional[np.random.Generator],
    mode: str,
    exchange: bool = True,
    diag: Optional[Diagnostics] = None,
):
    """Final weights, particle selection and the Gaussian backward estimate.

    Returns ``(state, log_W_sm, sm, be1)``.
    """
    cloud = record.cloud
    log_W, pm = phase2_step1(pm_l, cloud, scratch.log_w_fe1, scratch.log_w_be1, diag, exchange)
    W = np.exp(log_W)
    if mode == "tsa":
        j = categorical_draw(log_W, rng)
        particle, chosen = cloud.particles[j].copy(), j
    else:
        particle, chosen = W @ cloud.particles, None
    be1, sm, _ = phase2_step2(bp, pm, record.ekf_estimate, spec.dim_l, diag)
    ms = measurement_message(record.linearization, y, spec.cov_e)
    be2 = _with_moments(product(be1, ms), diag)
    return BackwardState(record.step, be2, particle, chosen), log_W, sm, be1


def backward_step(
    be_next: BackwardState,
    record: ForwardRecord,
    y: np.ndarray,
    spec: CLGModelSpec,
    config: BackwardConfig,
    rng: Optional[np.random.Generator],
    diag: Optional[Diagnostics] = None,
):
    """One full recursion: Phase I, ``n_iter`` Phase II iterations, Phase III."""
    bp, be_l_next, pm_l = phase1(be_next, record, spec, diag)
    forward_w = record.cloud.log_weights["fe"]
    scratch = IterationScratch(k=0, log_w_fe1=forward_w, log_w_be1=np.zeros(record.cloud.size))
    for k in range(1, config.n_iter + 1):
        log_W, pm = phase2_step1(pm_l, record.cloud, scratch.log_w_fe1, scratch.log_w_be1, diag, config.exchange)
        be1, sm, sm_l = phase2_step2(bp, pm, record.ekf_estimate, spec.dim_l, diag)
        log_w_pm, z_mean, z_cov = phase2_step3(be_l_next, sm_l, record.cloud, spec, diag, return_z=True)
        log_w_bp, log_w_be1 = phase2_step4(be_next.be_particle, sm_l, record.cloud, spec, log_w_pm, diag)
        if config.weight_reuse:
            log_w_fe1 = forward_w
        else:
            log_w_fe1 = phase2_step5(y, sm_l, record.cloud, spec)
        scratch = IterationScratch(
            k=k,
            log_w_fe1=log_w_fe1,
            log_w_be1=log_w_be1,
            log_w_sm=log_W,
            log_w_pm=log_w_pm,
            log_w_bp=log_w_bp,
            pm=pm,
            be1=be1,
            sm=sm,
            sm_l=sm_l,
            z_mean=z_mean,
            z_cov=z_cov,
        )
    return phase3(scratch, bp, pm_l, record, y, spec, rng, config.mode, config.exchange, diag)


def run_backward(
    records: Sequence[ForwardRecord],
    ys,
    spec: CLGModelSpec,
    config: BackwardConfig,
    rng: Optional[np.random.Generator] = None,
) -> BackwardResult:
    """Run one backward pass over the forward records.

    Outputs are indexed by step (0-based, same order as ``records``).  At the
    last step the smoothed quantities are the forward ones.
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    T = len(records)
    if len(ys) != T:
        raise ValueError(f"{len(ys)} measurements for {T} forward records")
    if rng is None:
        rng = np.random.default_rng(config.seed)

    last = records[-1]
    state = init_terminal(last, rng, config.mode, terminal=config.terminal, spec=spec, y=ys[-1])
    states = [None] * T
    weights = [None] * T
    smoothed = [None] * T
    be1s = [None] * T
    diagnostics = [None] * T
    states[-1] = state
    weights[-1] = normalize_log_weights(last.cloud.log_weights["fe"])
    smoothed[-1] = last.ekf_estimate.to_moment()
    be1s[-1] = GaussianMessage.flat(spec.dim)
    diagnostics[-1] = {"step": T - 1, **Diagnostics().snapshot(), "ess": effective_sample_size(weights[-1])}

    for l in range(T - 2, -1, -1):
        diag = Diagnostics()
        try:
            state, log_W, sm, be1 = backward_step(state, records[l], ys[l], spec, config, rng, diag)
        except (TurboSmoothError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise BackwardPassError(l, exc) from exc
        states[l] = state
        weights[l] = log_W
        smoothed[l] = sm
        be1s[l] = be1
        diagnostics[l] = {"step": l, **diag.snapshot(), "ess": effective_sample_size(log_W)}
    return BackwardResult(states, weights, smoothed, be1s, diagnostics)
