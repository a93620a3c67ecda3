"""Turbo smoothing for conditionally linear Gaussian state-space models."""

from .backward import BackwardConfig, BackwardResult, BackwardState, run_backward
from .errors import (
    AllWeightsZero,
    BackwardPassError,
    DegenerateCovariance,
    DimensionMismatch,
    EmptyMixture,
    LengthMismatch,
    NonFiniteJacobian,
    NonPositiveNoise,
    SingularPrecision,
    TurboSmoothError,
)
from .evaluation import BenchmarkConfig, RunMetrics, benchmark, rmse, run_algorithm
from .forward import ForwardConfig, ForwardRecord, ParticleCloud, forward_estimates, run_forward
from .gaussian import GaussianMessage, WeightedGaussianMixture, backward_predict, marginalize, moment_match, product
from .model import (
    AgentMotionParams,
    CLGModelSpec,
    LinearizedModel,
    agent_clg_spec,
    linearize,
    simulate,
    simulate_spec,
)
from .smoothers import MarginalSmoothedSet, SmoothedTrajectory, fuse_marginal, run_stsa, run_tsa, tsa_estimates

__version__ = "0.1.0"
