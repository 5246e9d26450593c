"""Standardized linear feedback controller and its iterative estimation.

The importance sampling control is u(x, t_k) = a(t_k) z(x, t_k) + b(t_k)
with z_i = (x_i - mu_i(t_k)) / sigma_i(t_k) a per-coordinate standardized
state.  The split into an open-loop term b and a feedback gain a on the
standardized state decouples their updates and keeps the normal matrix
well scaled.  Parameters at each grid step are estimated independently
from weighted particle statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MatrixInversionError


@dataclass
class StandardizationStats:
    """Per-grid-time standardization: mu, sigma of shape (L+1, n), sigma > 0."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 2:
            raise ValueError("mu and sigma must both have shape (L+1, n)")
        if np.any(self.sigma <= 0.0):
            raise ValueError("sigma must be positive elementwise")

    @classmethod
    def identity(cls, num_steps: int, state_dim: int) -> "StandardizationStats":
        """mu = 0, sigma = 1 everywhere; the first-iteration choice."""
        shape = (num_steps + 1, state_dim)
        return cls(mu=np.zeros(shape), sigma=np.ones(shape))


@dataclass
class LinearFeedbackController:
    """Open-loop term b (L, m) and feedback gain a (L, m, n) per grid step.

    The control acts on steps 0..L-1 only; there is nothing to control at
    the final grid time.
    """

    b: np.ndarray
    a: np.ndarray

    def __post_init__(self) -> None:
        self.b = np.asarray(self.b, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        if self.b.ndim != 2 or self.a.ndim != 3 or self.a.shape[:2] != self.b.shape:
            raise ValueError("expected b (L, m) and a (L, m, n)")
        if not (np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.a))):
            raise ValueError("controller parameters must be finite")

    @classmethod
    def zeros(cls, num_steps: int, control_dim: int, state_dim: int) -> "LinearFeedbackController":
        """u = 0 everywhere; the standard initialization."""
        return cls(b=np.zeros((num_steps, control_dim)), a=np.zeros((num_steps, control_dim, state_dim)))

    @property
    def num_steps(self) -> int:
        return self.b.shape[0]

    def copy(self) -> "LinearFeedbackController":
        return LinearFeedbackController(b=self.b.copy(), a=self.a.copy())


@dataclass
class ControllerSufficientStats:
    """Weighted particle statistics at one grid step.

    C (n, n) is the standardized state correlation matrix, mean_dW (m,) the
    weighted mean noise increment and dQz (m, n) the weighted noise-state
    cross moment.  All averages use normalized weights.
    """

    C: np.ndarray
    mean_dW: np.ndarray
    dQz: np.ndarray


def eval_control(
    ctrl: LinearFeedbackController,
    stats: StandardizationStats,
    x: np.ndarray,
    k: int,
) -> np.ndarray:
    """Control at grid step k: a(t_k) z + b(t_k), x of shape (..., n)."""
    z = (np.asarray(x, dtype=float) - stats.mu[k]) / stats.sigma[k]
    return z @ ctrl.a[k].T + ctrl.b[k]


def accumulate_stats(
    states: np.ndarray,
    noises: np.ndarray,
    weights: np.ndarray,
    stats: StandardizationStats,
    k: int,
) -> ControllerSufficientStats:
    """Sufficient statistics at step k from states (N, L+1, n), noises (N, L, m)."""
    z = (states[:, k, :] - stats.mu[k]) / stats.sigma[k]
    dw = noises[:, k, :]
    return ControllerSufficientStats(
        C=np.einsum("p,pi,pj->ij", weights, z, z),
        mean_dW=weights @ dw,
        dQz=np.einsum("p,pi,pj->ij", weights, dw, z),
    )


def accumulate_stats_all(
    states: np.ndarray,
    noises: np.ndarray,
    weights: np.ndarray,
    stats: StandardizationStats,
    dq_window: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sufficient statistics for every grid step at once.

    Returns (C, mean_dW, dQz) with shapes (L, n, n), (L, m), (L, m, n).
    dq_window > 1 replaces the per-step noise moments by a trailing-window
    average over [k, k + window), trading bias for variance; the window is
    truncated at the horizon.
    """
    num_steps = noises.shape[1]
    z = (states[:, :num_steps, :] - stats.mu[None, :num_steps, :]) / stats.sigma[None, :num_steps, :]
    weighted_z = z * weights[:, None, None]
    C = np.einsum("pki,pkj->kij", weighted_z, z, optimize=True)
    mean_dw = np.tensordot(weights, noises, axes=(0, 0))
    dqz = np.einsum("pki,pkj->kij", noises * weights[:, None, None], z, optimize=True)
    if dq_window > 1:
        mean_dw = _trailing_window_mean(mean_dw, dq_window)
        dqz = _trailing_window_mean(dqz, dq_window)
    return C, mean_dw, dqz


def _trailing_window_mean(values: np.ndarray, window: int) -> np.ndarray:
    """Mean of values[k : min(k + window, L)] along the leading axis."""
    num_steps = values.shape[0]
    csum = np.concatenate([np.zeros((1,) + values.shape[1:]), np.cumsum(values, axis=0)])
    end = np.minimum(np.arange(num_steps) + window, num_steps)
    width = (end - np.arange(num_steps)).reshape((-1,) + (1,) * (values.ndim - 1))
    return (csum[end] - csum[:num_steps]) / width


def update_controller(
    ctrl: LinearFeedbackController,
    C: np.ndarray,
    mean_dW: np.ndarray,
    dQz: np.ndarray,
    eta: float,
    dt: float,
    ridge: float = 1e-6,
    cond_cap: float = 1e12,
) -> LinearFeedbackController:
    """One learning step on all grid steps independently.

    b <- b + eta * mean_dW / dt and a <- a + eta * (dQz / dt) (C + ridge I)^-1.
    The statistics arrays carry a leading step axis matching the controller.
    """
    if not 0.0 < eta < 1.0:
        raise ValueError(f"learning rate must lie in (0, 1), got {eta}")
    C = np.asarray(C, dtype=float)
    reg = C + ridge * np.eye(C.shape[-1])
    if not np.all(np.isfinite(reg)):
        bad = int(np.argwhere(~np.all(np.isfinite(reg), axis=(-2, -1)))[0][0])
        raise MatrixInversionError(f"state correlation matrix at step {bad} is non-finite")
    try:
        cond = np.linalg.cond(reg)
    except np.linalg.LinAlgError as exc:
        raise MatrixInversionError(f"state correlation matrices defeated the SVD: {exc}") from exc
    if not np.all(np.isfinite(cond)) or np.any(cond > cond_cap):
        worst = int(np.argmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise MatrixInversionError(
            f"state correlation matrix at step {worst} is ill-conditioned despite ridge {ridge:g}"
        )
    # a_delta = dQz @ reg^-1; reg is symmetric, so solve on the transpose.
    a_delta = np.swapaxes(np.linalg.solve(reg, np.swapaxes(np.asarray(dQz, dtype=float), -1, -2)), -1, -2)
    return LinearFeedbackController(
        b=ctrl.b + (eta / dt) * np.asarray(mean_dW, dtype=float),
        a=ctrl.a + (eta / dt) * a_delta,
    )


def update_standardization(
    states: np.ndarray,
    weights: np.ndarray,
    var_floor: float = 1e-12,
) -> StandardizationStats:
    """Weighted mean and std per coordinate per grid time, variance floored."""
    mu = np.tensordot(weights, states, axes=(0, 0))
    centered = states - mu[None, :, :]
    var = np.tensordot(weights, centered * centered, axes=(0, 0))
    return StandardizationStats(mu=mu, sigma=np.sqrt(np.maximum(var, var_floor)))


def rebase_controller(
    ctrl: LinearFeedbackController,
    old: StandardizationStats,
    new: StandardizationStats,
) -> LinearFeedbackController:
    """Re-express the controller in a new standardization basis.

    The standardization is bookkeeping, not part of the control law, so
    refreshing it must leave u(x) unchanged at every x.  Without this,
    a gain estimated against the old scale gets amplified by
    sigma_old / sigma_new, which destabilizes rollouts whenever the
    weighted state spread collapses.
    """
    num_steps = ctrl.num_steps
    scale = new.sigma[:num_steps] / old.sigma[:num_steps]
    shift = (new.mu[:num_steps] - old.mu[:num_steps]) / old.sigma[:num_steps]
    return LinearFeedbackController(
        b=ctrl.b + np.einsum("kij,kj->ki", ctrl.a, shift),
        a=ctrl.a * scale[:, None, :],
    )


def save_controller(path, ctrl: LinearFeedbackController, stats: StandardizationStats) -> None:
    """Persist controller parameters and standardization, keyed by grid step."""
    np.savez(path, b=ctrl.b, a=ctrl.a, mu=stats.mu, sigma=stats.sigma)


def load_controller(path) -> tuple[LinearFeedbackController, StandardizationStats]:
    with np.load(path) as data:
        ctrl = LinearFeedbackController(b=data["b"], a=data["a"])
        stats = StandardizationStats(mu=data["mu"], sigma=data["sigma"])
    return ctrl, stats
