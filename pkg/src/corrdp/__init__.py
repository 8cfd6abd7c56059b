"""corrdp: near-exact privacy accounting for correlated-noise DP training.

Monte Carlo estimation of the privacy loss of the matrix mechanism under
balls-in-bins batching, noise calibration, strategy-matrix optimization for
prefix-sum RMSE under amplification, and a desk-scale training harness.
"""

from ._kernels import BACKEND as kernel_backend
from ._kernels import HAVE_EXTENSION as have_extension
from .accounting import (
    CalibrationError,
    EstimatorResult,
    GateDecision,
    PldBaseSample,
    PrivacyParams,
    bernstein_failure_prob,
    calibrate_sigma,
    draw_base_sample,
    estimate_delta,
    estimate_delta_per_adjacency,
    estimate_delta_streaming,
    estimate_epsilon,
    evr_gate,
    log_density_ratio,
    solve_sigma,
)
from .gaussian import (
    GaussianMechanismSpec,
    analytic_delta,
    calibrate_sigma_gaussian,
    calibrate_sigma_unamplified,
)
from .oracle import (
    LowDimPair,
    QuadratureError,
    adaptivity_counterexample_check,
    hockey_stick_quadrature,
    mixture_pair_for_modes,
)
from .strategies import (
    BandedStrategy,
    BltStrategy,
    DenseStrategy,
    ModeSet,
    ParticipationSchema,
    StrategyMatrix,
    ToeplitzStrategy,
    from_json_dict,
    identity,
    materialize,
    mode_vectors,
    prefix_error_norm,
    rmse,
    to_json_dict,
    toeplitz_inverse_coeffs,
    unamplified_sensitivity,
)

__version__ = "0.1.0"
