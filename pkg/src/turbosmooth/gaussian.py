"""Gaussian message algebra in moment and canonical (information) form.

A message is either a density N(x; mean, cov) or a likelihood written in
canonical form, ``W = cov^-1`` and ``w = W @ mean``.  Products of messages
add canonical parameters; a zero precision matrix is a flat (vacuous)
message and has no moment form.

All inversions go through a Cholesky factorization.  When it fails, a
single diagonal jitter of ``1e-9 * trace / dim`` is added before giving up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    AllWeightsZero,
    DegenerateCovariance,
    DimensionMismatch,
    EmptyMixture,
    NonPositiveNoise,
    SingularPrecision,
)

JITTER_SCALE = 1e-9
CLAMP_FLOOR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Diagnostics:
    """Counters for numerical repairs performed during one pass.

    Each pass owns its own instance; nothing here is shared between passes.
    """

    clamps: int = 0
    jitters: int = 0
    degenerate_weights: int = 0
    vacuous_pm: int = 0

    def snapshot(self) -> dict:
        return {
            "clamps": self.clamps,
            "jitters": self.jitters,
            "degenerate_weights": self.degenerate_weights,
            "vacuous_pm": self.vacuous_pm,
        }


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def cholesky(a: np.ndarray, error=DegenerateCovariance, diag: Optional[Diagnostics] = None) -> np.ndarray:
    """Lower Cholesky factor of a symmetric matrix, with one jitter retry."""
    a = np.asarray(a, dtype=float)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    dim = a.shape[-1]
    scale = JITTER_SCALE * np.trace(a, axis1=-2, axis2=-1) / dim
    if np.any(~np.isfinite(scale)) or np.any(scale <= 0.0):
        raise error("matrix is not positive definite and cannot be regularized")
    jittered = a + np.asarray(scale)[..., None, None] * np.eye(dim)
    try:
        factor = np.linalg.cholesky(jittered)
    except np.linalg.LinAlgError as exc:
        raise error("matrix is not positive definite after jitter") from exc
    if diag is not None:
        diag.jitters += 1
    return factor


def spd_inverse(a: np.ndarray, error=DegenerateCovariance, diag: Optional[Diagnostics] = None) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix (batched over leading axes)."""
    a = np.asarray(a, dtype=float)
    factor = cholesky(a, error=error, diag=diag)
    eye = np.broadcast_to(np.eye(a.shape[-1]), a.shape)
    linv = np.linalg.solve(factor, eye)
    return np.swapaxes(linv, -1, -2) @ linv


def psd_clamp(a: np.ndarray, diag: Optional[Diagnostics] = None, allow_zero: bool = False) -> np.ndarray:
    """Symmetrize and lift eigenvalues below ``1e-12 * lambda_max`` to that floor.

    Works on a single matrix or a stack. Matrices already above the floor
    are returned symmetrized but otherwise untouched.  A matrix without a
    positive eigenvalue is an error unless ``allow_zero`` is set, in which
    case its negative eigenvalues are lifted to zero.
    """
    a = _sym(np.asarray(a, dtype=float))
    vals, vecs = np.linalg.eigh(a)
    top = vals[..., -1:]
    if np.any(~np.isfinite(vals)) or (not allow_zero and np.any(top <= 0.0)):
        raise DegenerateCovariance("covariance has no positive eigenvalue")
    floor = CLAMP_FLOOR * np.maximum(top, 0.0)
    low = vals < floor
    if not np.any(low):
        return a
    bad = np.any(low, axis=-1)
    if diag is not None:
        diag.clamps += int(np.count_nonzero(bad))
    vals = np.where(low, floor, vals)
    fixed = _sym((vecs * vals[..., None, :]) @ np.swapaxes(vecs, -1, -2))
    if a.ndim == 2:
        return fixed
    return np.where(bad[..., None, None], fixed, a)


@dataclass(frozen=True)
class GaussianMessage:
    """Gaussian density or likelihood in moment and/or canonical form."""

    dim: int
    mean: Optional[np.ndarray] = field(default=None, repr=False)
    cov: Optional[np.ndarray] = field(default=None, repr=False)
    W: Optional[np.ndarray] = field(default=None, repr=False)
    w: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.mean is None and self.W is None:
            raise ValueError("a GaussianMessage needs a moment or a canonical form")
        if (self.mean is None) != (self.cov is None) or (self.W is None) != (self.w is None):
            raise ValueError("each form needs both of its parameters")

    @classmethod
    def from_moments(cls, mean, cov) -> "GaussianMessage":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(f"cov shape {cov.shape} does not match mean of size {mean.size}")
        return cls(mean.size, mean=mean, cov=cov)

    @classmethod
    def from_canonical(cls, W, w) -> "GaussianMessage":
        w = np.atleast_1d(np.asarray(w, dtype=float))
        W = np.atleast_2d(np.asarray(W, dtype=float))
        if W.shape != (w.size, w.size):
            raise DimensionMismatch(f"precision shape {W.shape} does not match w of size {w.size}")
        return cls(w.size, W=W, w=w)

    @classmethod
    def flat(cls, dim: int) -> "GaussianMessage":
        """Vacuous message: zero precision, carries no information."""
        return cls(dim, W=np.zeros((dim, dim)), w=np.zeros(dim))

    @property
    def has_moment(self) -> bool:
        return self.mean is not None

    @property
    def has_canonical(self) -> bool:
        return self.W is not None

    @property
    def is_flat(self) -> bool:
        return self.W is not None and not np.any(self.W)

    def to_canonical(self, diag: Optional[Diagnostics] = None) -> "GaussianMessage":
        if self.has_canonical:
            return self
        W = spd_inverse(self.cov, error=DegenerateCovariance, diag=diag)
        return GaussianMessage(self.dim, mean=self.mean, cov=self.cov, W=W, w=W @ self.mean)

    def to_moment(self, diag: Optional[Diagnostics] = None) -> "GaussianMessage":
        if self.has_moment:
            return self
        cov = spd_inverse(self.W, error=SingularPrecision, diag=diag)
        return GaussianMessage(self.dim, mean=cov @ self.w, cov=cov, W=self.W, w=self.w)


def to_canonical(g: GaussianMessage, diag: Optional[Diagnostics] = None) -> GaussianMessage:
    return g.to_canonical(diag)


def to_moment(g: GaussianMessage, diag: Optional[Diagnostics] = None) -> GaussianMessage:
    return g.to_moment(diag)


def product(a: GaussianMessage, b: GaussianMessage, diag: Optional[Diagnostics] = None) -> GaussianMessage:
    """Product of two messages over the same variable (canonical parameters add)."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"cannot multiply messages of dims {a.dim} and {b.dim}")
    a = a.to_canonical(diag)
    b = b.to_canonical(diag)
    return GaussianMessage.from_canonical(a.W + b.W, a.w + b.w)


def product_with_moment(a: GaussianMessage, b: GaussianMessage) -> GaussianMessage:
    """Product of a canonical-form message ``a`` and a moment-form message ``b``.

    Uses ``K = (C_b W_a + I)^-1``, ``C = K C_b`` and ``mean = K (C_b w_a + mean_b)``,
    which never inverts ``C_b``.  Mathematically identical to :func:`product`.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"cannot multiply messages of dims {a.dim} and {b.dim}")
    a = a.to_canonical()
    if not b.has_moment:
        raise ValueError("second factor needs a moment form")
    gain = np.linalg.inv(b.cov @ a.W + np.eye(a.dim))
    cov = _sym(gain @ b.cov)
    mean = gain @ (b.cov @ a.w + b.mean)
    return GaussianMessage.from_moments(mean, cov)


def _block(dim: int, keep) -> slice:
    if isinstance(keep, int):
        keep = slice(0, keep)
    start, stop, step = keep.indices(dim)
    if step != 1 or stop <= start:
        raise DimensionMismatch(f"invalid block {keep} for dim {dim}")
    if start != 0 and stop != dim:
        raise DimensionMismatch("only a leading or trailing block can be kept")
    return slice(start, stop)


def marginalize(g: GaussianMessage, keep, diag: Optional[Diagnostics] = None) -> GaussianMessage:
    """Marginal over a contiguous leading or trailing block of the variables.

    ``keep`` is a slice, or an int meaning "the first ``keep`` variables".
    """
    block = _block(g.dim, keep)
    g = g.to_moment(diag)
    return GaussianMessage.from_moments(g.mean[block].copy(), g.cov[block, block].copy())


def backward_predict(
    be_next: GaussianMessage,
    F: np.ndarray,
    u: np.ndarray,
    cov_w: np.ndarray,
    diag: Optional[Diagnostics] = None,
) -> GaussianMessage:
    """Propagate a backward message through ``x' = F x + u + noise``.

    Computes ``W_bp = F' P W_be F`` and ``w_bp = F' (P w_be - W_be Q W_w u)``
    with ``Q = (W_w + W_be)^-1`` and ``P = I - W_be Q``.  Works entirely in
    canonical form, so flat messages and singular ``F`` are fine.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    cov_w = np.atleast_2d(np.asarray(cov_w, dtype=float))
    dim = be_next.dim
    if F.shape != (dim, dim) or u.shape != (dim,) or cov_w.shape != (dim, dim):
        raise DimensionMismatch("transition, offset and noise must match the message dim")
    be = be_next.to_canonical(diag)
    W_w = spd_inverse(cov_w, error=NonPositiveNoise, diag=diag)
    Q = spd_inverse(W_w + be.W, error=NonPositiveNoise, diag=diag)
    P = np.eye(dim) - be.W @ Q
    W_bp = _sym(F.T @ P @ be.W @ F)
    w_bp = F.T @ (P @ be.w - be.W @ Q @ W_w @ u)
    return GaussianMessage.from_canonical(W_bp, w_bp)


@dataclass(frozen=True)
class WeightedGaussianMixture:
    weights: np.ndarray
    components: Sequence[GaussianMessage]

    def __post_init__(self):
        if len(self.components) == 0:
            raise EmptyMixture("mixture has no components")
        if len(self.weights) != len(self.components):
            raise DimensionMismatch("one weight per component is required")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise DimensionMismatch(f"mixture components have dims {sorted(dims)}")

    @property
    def count(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim


def _mixture_moments(weights, means, covs, diag):
    weights = np.asarray(weights, dtype=float)
    if weights.size == 0:
        raise EmptyMixture("mixture has no components")
    if np.any(weights < 0) or not np.isfinite(weights.sum()) or weights.sum() <= 0:
        raise ValueError("mixture weights must be nonnegative with a positive sum")
    weights = weights / weights.sum()
    mean = weights @ means
    centred = means - mean
    cov = np.einsum("j,jab->ab", weights, covs) + np.einsum("j,ja,jb->ab", weights, centred, centred)
    return mean, psd_clamp(cov, diag)


def moment_match(mix: WeightedGaussianMixture, diag: Optional[Diagnostics] = None) -> GaussianMessage:
    """Single Gaussian with the same mean and covariance as the mixture."""
    comps = [c.to_moment() for c in mix.components]
    means = np.stack([c.mean for c in comps])
    covs = np.stack([c.cov for c in comps])
    mean, cov = _mixture_moments(mix.weights, means, covs, diag)
    return GaussianMessage.from_moments(mean, cov)


def project_pairs(
    weights: np.ndarray,
    mean_l: np.ndarray,
    cov_l: np.ndarray,
    points_n: np.ndarray,
    diag: Optional[Diagnostics] = None,
) -> GaussianMessage:
    """Moment-match a mixture of (Gaussian in x_L) x (point mass in x_N) pairs.

    ``mean_l`` is (n, D_L), ``cov_l`` is (n, D_L, D_L) and ``points_n`` is
    (n, D_N).  The result is a Gaussian over ``[x_L; x_N]`` whose N block
    covariance and L/N cross-covariance come only from the spread of the
    component means.
    """
    mean_l = np.asarray(mean_l, dtype=float)
    points_n = np.asarray(points_n, dtype=float)
    n, d_l = mean_l.shape
    d_n = points_n.shape[1]
    means = np.concatenate([mean_l, points_n], axis=1)
    covs = np.zeros((n, d_l + d_n, d_l + d_n))
    covs[:, :d_l, :d_l] = cov_l
    mean, cov = _mixture_moments(weights, means, covs, diag)
    return GaussianMessage.from_moments(mean, cov)


def log_gaussian_eval(x, g: GaussianMessage) -> float:
    """log N(x; mean, cov) with the full normalizing constant."""
    g = g.to_moment()
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (g.dim,):
        raise DimensionMismatch(f"point of shape {x.shape} for a dim-{g.dim} Gaussian")
    try:
        factor = np.linalg.cholesky(g.cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovariance("covariance is not positive definite") from exc
    z = solve_triangular(factor, x - g.mean, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(factor)))
    return float(-0.5 * (z @ z) - 0.5 * logdet - 0.5 * g.dim * LOG_2PI)


def batch_log_gaussian(
    residuals: np.ndarray,
    covs: np.ndarray,
    drop_common: bool = False,
    diag: Optional[Diagnostics] = None,
) -> np.ndarray:
    """log N(r_j; 0, S_j) for a stack of residuals.

    ``residuals`` is (n, d); ``covs`` is either one (d, d) matrix shared by
    all rows or a (n, d, d) stack.  With ``drop_common`` every term that is
    bit-identical across all rows (whitened components, log-determinants,
    the 2*pi constant) is left out; the result then differs from the true
    log density by a row-independent constant, which cancels when the
    values are normalized as weights and avoids cancellation error.
    """
    residuals = np.asarray(residuals, dtype=float)
    covs = np.asarray(covs, dtype=float)
    n, d = residuals.shape
    if covs.ndim == 3 and np.all(covs == covs[0]):
        covs = covs[0]
    factor = cholesky(covs, diag=diag)
    if factor.ndim == 2:
        white = solve_triangular(factor, residuals.T, lower=True).T
        logdet = np.full(n, 2.0 * np.sum(np.log(np.diag(factor))))
    else:
        white = np.linalg.solve(factor, residuals[..., None])[..., 0]
        logdet = 2.0 * np.sum(np.log(np.diagonal(factor, axis1=1, axis2=2)), axis=1)
    sq = white * white
    if not drop_common:
        return -0.5 * sq.sum(axis=1) - 0.5 * logdet - 0.5 * d * LOG_2PI
    varying = ~np.all(sq == sq[0], axis=0)
    out = -0.5 * sq[:, varying].sum(axis=1)
    if not np.all(logdet == logdet[0]):
        out = out - 0.5 * logdet
    return out


def normalize_log_weights(log_w: np.ndarray) -> np.ndarray:
    """Normalize log weights so that ``exp`` of them sums to one.

    Raises :class:`AllWeightsZero` when no weight is finite.
    """
    log_w = np.asarray(log_w, dtype=float)
    top = np.max(log_w) if log_w.size else -np.inf
    if not np.isfinite(top):
        raise AllWeightsZero("every particle weight is zero or undefined")
    shifted = log_w - top
    return shifted - np.log(np.exp(shifted).sum())


def effective_sample_size(log_w: np.ndarray) -> float:
    p = np.exp(normalize_log_weights(log_w))
    return float(1.0 / np.sum(p * p))
