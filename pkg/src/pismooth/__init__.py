"""Smoothing of partially observed diffusion processes.

Controlled-diffusion adaptive importance sampling for joint smoothing
(the adaptive path-integral smoother), bootstrap filter-smoother and
backward-simulation baselines, and an exact Kalman/RTS oracle for
linear-Gaussian validation.
"""

from .apis import (
    ApisConfig,
    DiagnosticsTrace,
    InitialProposal,
    ParticleSystem,
    anneal,
    compute_weights,
    ess,
    marginals_all,
    rollout,
    run_apis,
    update_initial_proposal,
    weighted_marginals,
)
from .controller import (
    ControllerSufficientStats,
    LinearFeedbackController,
    StandardizationStats,
    accumulate_stats,
    accumulate_stats_all,
    eval_control,
    load_controller,
    save_controller,
    update_controller,
    update_standardization,
)
from .errors import (
    AnnealCapError,
    ConfigError,
    DegenerateBackwardWeightsError,
    DegenerateWeightsError,
    GridMismatchError,
    InsufficientRunsError,
    MatrixInversionError,
    NumericalError,
    PismoothError,
    SingularDiffusionError,
)
from .models import (
    DiffusionModel,
    GaussianObservationModel,
    InitialStateDistribution,
    Neural5Params,
    ObservationSeries,
    TimeGrid,
    brownian_model,
    gaussian_transition_logdensity,
    log_obs_likelihood,
    neural5_model,
    sample_noise,
    step_euler_maruyama,
)

__version__ = "0.1.0"

from .baselines import (  # noqa: E402
    FilterOutput,
    FsResult,
    KalmanResult,
    LinearGaussianSpec,
    bootstrap_filter,
    ffbsi,
    filter_smoother,
    kalman_rts,
    systematic_resample,
    transition_logdensity_matrix,
)
from .config import ExperimentConfig, parse_config, parse_config_text  # noqa: E402
from .metrics_io import (  # noqa: E402
    RunManifest,
    abs_error_vs_truth,
    cross_run_variance,
    mse_vs_truth,
    write_outputs,
)
