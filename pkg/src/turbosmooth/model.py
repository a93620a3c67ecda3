"""Conditionally linear Gaussian state-space models.

The state is split as ``x = [x_L; x_N]``.  Given the nonlinear part ``x_N``
the model is linear-Gaussian in ``x_L``::

    x_L' = A_L(x_N) x_L + f_L(x_N) + w_L
    x_N' = A_N(x_N) x_L + f_N(x_N) + w_N
    y    = B(x_N) x_L + g(x_N) + e

The model callables are batched: they take an ``(n, D_N)`` array of
nonlinear states and return stacked matrices/vectors with a leading ``n``
axis.  This lets the particle code evaluate all particles at once.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.linalg import block_diag

from .errors import DimensionMismatch, NonFiniteJacobian
from .gaussian import GaussianMessage

BatchFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CLGModelSpec:
    dim_l: int
    dim_n: int
    dim_y: int
    trans_l: BatchFn  # A_L: (n, D_N) -> (n, D_L, D_L)
    trans_n: BatchFn  # A_N: (n, D_N) -> (n, D_N, D_L)
    drift_l: BatchFn  # f_L: (n, D_N) -> (n, D_L)
    drift_n: BatchFn  # f_N: (n, D_N) -> (n, D_N)
    meas_offset: BatchFn  # g: (n, D_N) -> (n, P)
    meas_gain: BatchFn  # B: (n, D_N) -> (n, P, D_L)
    cov_w_l: np.ndarray
    cov_w_n: np.ndarray
    cov_e: np.ndarray
    prior: GaussianMessage
    drift_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)
    meas_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.dim_l + self.dim_n

    @property
    def cov_w(self) -> np.ndarray:
        return block_diag(self.cov_w_l, self.cov_w_n)

    def split(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        return x[..., : self.dim_l], x[..., self.dim_l :]


@dataclass(frozen=True)
class LinearizedModel:
    """Affine approximation ``x' = F x + u`` and ``y = H^T x + v``."""

    F: np.ndarray
    u: np.ndarray
    H: np.ndarray  # (D, P)
    v: np.ndarray


def full_drift(spec: CLGModelSpec, x: np.ndarray) -> np.ndarray:
    """Deterministic one-step map of the full state."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.dim,):
        raise DimensionMismatch(f"state of shape {x.shape}, expected ({spec.dim},)")
    xl, xn = spec.split(x)
    xn = xn[None]
    new_l = spec.trans_l(xn)[0] @ xl + spec.drift_l(xn)[0]
    new_n = spec.trans_n(xn)[0] @ xl + spec.drift_n(xn)[0]
    return np.concatenate([new_l, new_n])


def measurement_mean(spec: CLGModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    xl, xn = spec.split(x)
    xn = xn[None]
    return spec.meas_gain(xn)[0] @ xl + spec.meas_offset(xn)[0]


def finite_difference_jacobian(fn, x: np.ndarray) -> np.ndarray:
    """Central differences with step ``1e-6 * (1 + |x_i|)``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        h = 1e-6 * (1.0 + abs(x[i]))
        step = np.zeros_like(x)
        step[i] = h
        cols.append((fn(x + step) - fn(x - step)) / (2.0 * h))
    return np.stack(cols, axis=1)


def linearize(spec: CLGModelSpec, x_fe: np.ndarray, x_fp: np.ndarray) -> LinearizedModel:
    """Linearize the drift at ``x_fe`` and the measurement map at ``x_fp``."""
    x_fe = np.asarray(x_fe, dtype=float)
    x_fp = np.asarray(x_fp, dtype=float)
    if spec.drift_jacobian is not None:
        F = np.asarray(spec.drift_jacobian(x_fe), dtype=float)
    else:
        F = finite_difference_jacobian(lambda z: full_drift(spec, z), x_fe)
    if spec.meas_jacobian is not None:
        Ht = np.asarray(spec.meas_jacobian(x_fp), dtype=float)
    else:
        Ht = finite_difference_jacobian(lambda z: measurement_mean(spec, z), x_fp)
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(Ht))):
        raise NonFiniteJacobian("model Jacobian has non-finite entries")
    u = full_drift(spec, x_fe) - F @ x_fe
    v = measurement_mean(spec, x_fp) - Ht @ x_fp
    return LinearizedModel(F=F, u=u, H=Ht.T.copy(), v=v)


# --- agent motion benchmark -------------------------------------------------


@dataclass(frozen=True)
class AgentMotionParams:
    """Planar agent pulled towards the origin.

    Defaults are the benchmark values; ``v0`` and ``p0`` are the initial
    velocity (m/s) and position (m).  ``init_std_v`` / ``init_std_p`` set the
    spread of the Gaussian prior on the first state.
    """

    rho: float = 0.995
    Ts: float = 0.01
    sigma_p: float = 5e-3
    sigma_ev: float = 2e-2
    sigma_ep: float = 2e-2
    a0: float = 0.5
    d0: float = 5e-3
    v0: tuple = (0.01, 0.01)
    p0: tuple = (0.01, 0.01)
    init_std_v: float = 1e-2
    init_std_p: float = 1e-2

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        if min(self.sigma_p, self.sigma_ev, self.sigma_ep, self.init_std_v, self.init_std_p) < 0:
            raise ValueError("standard deviations must be nonnegative")
        if self.Ts <= 0 or self.d0 <= 0:
            raise ValueError("Ts and d0 must be positive")


def acceleration(params: AgentMotionParams, p: np.ndarray) -> np.ndarray:
    """Central-force acceleration; accepts (2,) or (n, 2).  Zero at the origin."""
    p = np.asarray(p, dtype=float)
    r = np.linalg.norm(p, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = -params.a0 * p / (r * (1.0 + (r / params.d0) ** 2))
    return np.where(r > 0.0, acc, 0.0)


def acceleration_jacobian(params: AgentMotionParams, p: np.ndarray) -> np.ndarray:
    """d a / d p for a single position; zero matrix at the origin."""
    p = np.asarray(p, dtype=float)
    r = float(np.linalg.norm(p))
    if r == 0.0:
        return np.zeros((2, 2))
    q = r + r**3 / params.d0**2
    s = 1.0 / q
    ds = -(1.0 + 3.0 * r**2 / params.d0**2) / q**2
    return -params.a0 * (s * np.eye(2) + ds * np.outer(p, p) / r)


def agent_clg_spec(params: AgentMotionParams) -> CLGModelSpec:
    """CLG form of the agent model with velocity as x_L and position as x_N."""
    rho, Ts = params.rho, params.Ts
    eye2 = np.eye(2)

    def trans_l(xn):
        return np.broadcast_to(rho * eye2, (len(xn), 2, 2))

    def trans_n(xn):
        return np.broadcast_to(Ts * eye2, (len(xn), 2, 2))

    def drift_l(xn):
        return Ts * acceleration(params, xn)

    def drift_n(xn):
        return xn + 0.5 * Ts**2 * acceleration(params, xn)

    def meas_offset(xn):
        return np.concatenate([np.zeros_like(xn), xn], axis=1)

    def meas_gain(xn):
        return np.broadcast_to(np.vstack([eye2, np.zeros((2, 2))]), (len(xn), 4, 2))

    def drift_jacobian(x):
        J = acceleration_jacobian(params, x[2:])
        return np.block([[rho * eye2, Ts * J], [Ts * eye2, eye2 + 0.5 * Ts**2 * J]])

    def meas_jacobian(x):
        return np.eye(4)

    prior = GaussianMessage.from_moments(
        np.concatenate([params.v0, params.p0]),
        np.diag([params.init_std_v**2] * 2 + [params.init_std_p**2] * 2),
    )
    return CLGModelSpec(
        dim_l=2,
        dim_n=2,
        dim_y=4,
        trans_l=trans_l,
        trans_n=trans_n,
        drift_l=drift_l,
        drift_n=drift_n,
        meas_offset=meas_offset,
        meas_gain=meas_gain,
        cov_w_l=(1.0 - rho) ** 2 * eye2,
        cov_w_n=params.sigma_p**2 * eye2,
        cov_e=np.diag([params.sigma_ev**2] * 2 + [params.sigma_ep**2] * 2),
        prior=prior,
        drift_jacobian=drift_jacobian,
        meas_jacobian=meas_jacobian,
    )


@dataclass(frozen=True)
class SimulatedTrajectory:
    states: np.ndarray  # (T, D)
    measurements: np.ndarray  # (T, P)
    seed: Optional[int] = None

    @property
    def T(self) -> int:
        return len(self.states)


def _sample(rng, mean, cov):
    if not np.any(cov):
        return np.array(mean, dtype=float)
    return rng.multivariate_normal(mean, cov, method="cholesky")


def simulate_spec(spec: CLGModelSpec, T: int, seed: int) -> SimulatedTrajectory:
    """Draw a trajectory from any CLG model, starting from its prior."""
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(seed)
    prior = spec.prior.to_moment()
    cov_w = spec.cov_w
    x = _sample(rng, prior.mean, prior.cov)
    states, meas = [], []
    for _ in range(T):
        states.append(x)
        meas.append(_sample(rng, measurement_mean(spec, x), spec.cov_e))
        x = _sample(rng, full_drift(spec, x), cov_w)
    return SimulatedTrajectory(np.array(states), np.array(meas), seed)


def simulate(params: AgentMotionParams, T: int, seed: int) -> SimulatedTrajectory:
    """Simulate the agent model directly from its motion equations.

    Written independently of :func:`agent_clg_spec` so the two can be
    checked against each other.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(seed)
    v = np.asarray(params.v0, float) + params.init_std_v * rng.standard_normal(2)
    p = np.asarray(params.p0, float) + params.init_std_p * rng.standard_normal(2)
    states, meas = [], []
    for _ in range(T):
        states.append(np.concatenate([v, p]))
        meas.append(
            np.concatenate(
                [v + params.sigma_ev * rng.standard_normal(2), p + params.sigma_ep * rng.standard_normal(2)]
            )
        )
        a = acceleration(params, p)
        v_next = params.rho * v + params.Ts * a + (1.0 - params.rho) * rng.standard_normal(2)
        p = p + v * params.Ts + 0.5 * params.Ts**2 * a + params.sigma_p * rng.standard_normal(2)
        v = v_next
    return SimulatedTrajectory(np.array(states), np.array(meas), seed)


# --- CSV exchange -----------------------------------------------------------


def write_trajectory_csv(traj: SimulatedTrajectory, path) -> None:
    """Columns ``t, x0..x{D-1}, y0..y{P-1}`` with a header row."""
    D = traj.states.shape[1]
    P = traj.measurements.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{i}" for i in range(D)] + [f"y{i}" for i in range(P)])
        for t, (x, y) in enumerate(zip(traj.states, traj.measurements), start=1):
            writer.writerow([t] + [repr(float(a)) for a in x] + [repr(float(b)) for b in y])


def read_trajectory_csv(path) -> SimulatedTrajectory:
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "t":
            raise ValueError(f"{path}: missing 't, x.., y..' header")
        x_cols = [i for i, h in enumerate(header) if h.startswith("x")]
        y_cols = [i for i, h in enumerate(header) if h.startswith("y")]
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows)
    return SimulatedTrajectory(data[:, x_cols], data[:, y_cols])
