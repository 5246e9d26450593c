"""Exception hierarchy shared across the package."""


class PismoothError(Exception):
    """Base class for all package errors."""


class NumericalError(PismoothError):
    """A model evaluation or particle computation produced non-finite values."""


class SingularDiffusionError(NumericalError):
    """sigma_dyn sigma_dyn' is (numerically) singular: no Gaussian transition
    kernel exists, so backward simulation does not apply."""


class MatrixInversionError(NumericalError):
    """A ridge-regularized normal matrix stayed ill-conditioned beyond the cap."""


class AnnealCapError(NumericalError):
    """Annealing needed more temperature steps than the configured cap,
    signalling a pathological spread of particle costs."""


class DegenerateWeightsError(NumericalError):
    """All particle likelihoods underflowed to zero at an observation."""


class DegenerateBackwardWeightsError(NumericalError):
    """All backward-simulation weights underflowed at one step."""


class InsufficientRunsError(PismoothError):
    """Cross-run statistics need at least two runs."""


class ConfigError(PismoothError):
    """Invalid or unparseable experiment configuration."""


class GridMismatchError(PismoothError):
    """Outputs being combined were produced on incompatible time grids."""
