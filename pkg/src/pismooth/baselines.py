"""Reference smoothers: bootstrap filter, filter-smoother, backward
simulation, and the exact Kalman/RTS recursion for linear-Gaussian models.

The bootstrap filter propagates particles with the prior dynamics and
resamples systematically at every observation.  The filter-smoother reads
the resampled ancestral paths as smoothing draws; backward simulation
redraws trajectories against the forward clouds at every integration step,
which requires a non-singular diffusion covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .apis import ess
from .errors import (
    DegenerateBackwardWeightsError,
    DegenerateWeightsError,
    NumericalError,
    SingularDiffusionError,
)
from .models import (
    DIFFUSION_COND_CAP,
    LOG_2PI,
    DiffusionModel,
    InitialStateDistribution,
    ObservationSeries,
    TimeGrid,
    log_obs_likelihood,
    step_euler_maruyama,
)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Systematic resampling indices; expected offspring of i is N * weights[i]."""
    w = np.asarray(weights, dtype=float)
    num = w.size
    positions = (rng.random() + np.arange(num)) / num
    cumsum = np.cumsum(w)
    cumsum[-1] = 1.0
    return np.minimum(np.searchsorted(cumsum, positions, side="right"), num - 1)


@dataclass
class FilterOutput:
    """Forward filter output.

    states[k] is the filtering cloud at grid index k (pre-resampling at
    observation times) with normalized weights[k]; trajectories are the
    fully resampled ancestral paths.  ancestors records the resampling
    index map at each observation, filter_ess the pre-resampling weight
    ESS there.
    """

    grid: TimeGrid
    obs_indices: tuple[int, ...]
    states: np.ndarray
    weights: np.ndarray
    trajectories: np.ndarray
    ancestors: np.ndarray
    filter_ess: np.ndarray


def bootstrap_filter(
    model: DiffusionModel,
    obs: ObservationSeries,
    prior: InitialStateDistribution,
    num_particles: int,
    rng: np.random.Generator,
) -> FilterOutput:
    """Bootstrap particle filter with systematic resampling at each observation."""
    if num_particles < 1:
        raise ValueError("need at least one particle")
    grid = obs.grid
    num_steps, n, m = grid.num_steps, model.state_dim, model.noise_dim
    dt = grid.dt
    obs_at = obs.index_map()

    x = prior.sample(rng, num_particles)
    states = np.empty((num_steps + 1, num_particles, n))
    weights = np.full((num_steps + 1, num_particles), 1.0 / num_particles)
    trajectories = np.empty((num_particles, num_steps + 1, n))
    ancestors = np.empty((obs.count, num_particles), dtype=np.int64)
    filter_ess = np.empty(obs.count)

    def observe(k: int) -> None:
        nonlocal x
        j = obs_at[k]
        loglik = log_obs_likelihood(obs.model, obs.values[j], x)
        shifted = loglik - np.max(loglik)
        if not np.any(np.isfinite(shifted)):
            raise DegenerateWeightsError(
                f"all particle likelihoods vanished at observation index {k}"
            )
        w = np.exp(shifted)
        w /= w.sum()
        weights[k] = w
        filter_ess[j] = ess(w)
        idx = systematic_resample(w, rng)
        ancestors[j] = idx
        x = x[idx]
        trajectories[:, : k + 1] = trajectories[idx, : k + 1]

    states[0] = x
    trajectories[:, 0] = x
    if 0 in obs_at:
        observe(0)
    for k in range(1, num_steps + 1):
        dw = rng.standard_normal((num_particles, m)) * np.sqrt(dt)
        x = step_euler_maruyama(model, x, (k - 1) * dt, 0.0, dw, dt, check=False)
        states[k] = x
        trajectories[:, k] = x
        if k in obs_at:
            observe(k)
    if not np.all(np.isfinite(states)):
        raise NumericalError("bootstrap filter produced non-finite states")

    return FilterOutput(
        grid=grid,
        obs_indices=obs.indices,
        states=states,
        weights=weights,
        trajectories=trajectories,
        ancestors=ancestors,
        filter_ess=filter_ess,
    )


@dataclass
class FsResult:
    """Filter-smoother output: the resampled ancestral paths as a weighted
    trajectory set, per-time unique-path fraction and the scalar FS-ESS
    (fraction of distinct ancestors surviving at the initial time)."""

    trajectories: np.ndarray
    weights: np.ndarray
    unique_fraction: np.ndarray
    fs_ess: float


def filter_smoother(filter_output: FilterOutput) -> FsResult:
    """Smoothing estimate from the ancestral paths of the bootstrap filter."""
    traj = filter_output.trajectories
    num = traj.shape[0]
    unique_fraction = np.array(
        [np.unique(traj[:, k, :], axis=0).shape[0] / num for k in range(traj.shape[1])]
    )
    return FsResult(
        trajectories=traj,
        weights=np.full(num, 1.0 / num),
        unique_fraction=unique_fraction,
        fs_ess=float(unique_fraction[0]),
    )


def transition_logdensity_matrix(
    model: DiffusionModel,
    x_to: np.ndarray,
    x_from: np.ndarray,
    t: float,
    dt: float,
    cond_cap: float = DIFFUSION_COND_CAP,
) -> np.ndarray:
    """log N(x_to[i] | x_from[j] + F dt, sigma sigma' dt) as an (M, N) matrix.

    Fast path for state-independent diffusion; state-dependent diffusion
    falls back to one covariance per source particle.
    """
    x_from = np.asarray(x_from, dtype=float)
    x_to = np.asarray(x_to, dtype=float)
    n = x_from.shape[1]
    mean = x_from + np.asarray(model.drift(x_from, t), dtype=float) * dt
    g = np.asarray(model.diffusion(x_from, t), dtype=float)
    if g.ndim == 2:
        cov = (g @ g.T) * dt
        if np.linalg.cond(cov) > cond_cap:
            raise SingularDiffusionError(
                f"sigma_dyn sigma_dyn' is singular at t={t} (condition number above {cond_cap:g})"
            )
        chol = np.linalg.cholesky(cov)
        white_to = np.linalg.solve(chol, x_to.T).T
        white_from = np.linalg.solve(chol, mean.T).T
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        sq = (
            np.sum(white_to * white_to, axis=1)[:, None]
            + np.sum(white_from * white_from, axis=1)[None, :]
            - 2.0 * white_to @ white_from.T
        )
        return -0.5 * (np.maximum(sq, 0.0) + logdet + n * LOG_2PI)

    out = np.empty((x_to.shape[0], x_from.shape[0]))
    for j in range(x_from.shape[0]):
        cov = (g[j] @ g[j].T) * dt
        if np.linalg.cond(cov) > cond_cap:
            raise SingularDiffusionError(
                f"sigma_dyn sigma_dyn' is singular at t={t} for particle {j}"
            )
        resid = x_to - mean[j]
        sign, logdet = np.linalg.slogdet(cov)
        quad = np.sum(resid * np.linalg.solve(cov, resid.T).T, axis=1)
        out[:, j] = -0.5 * (quad + logdet + n * LOG_2PI)
    return out


def ffbsi(
    filter_output: FilterOutput,
    model: DiffusionModel,
    num_backward: int,
    rng: np.random.Generator,
    cond_cap: float = DIFFUSION_COND_CAP,
) -> np.ndarray:
    """Backward simulation of num_backward smoothing trajectories.

    Endpoints are drawn from the final filter weights; the pass then walks
    back over every integration step, redrawing the ancestor j at step k
    with probability proportional to w_k^j f(x_{k+1} | x_k^j).  Cost is
    O(M N L).  Returns trajectories of shape (M, L+1, n).
    """
    if num_backward < 1:
        raise ValueError("need at least one backward trajectory")
    grid = filter_output.grid
    num_steps, dt = grid.num_steps, grid.dt
    states, weights = filter_output.states, filter_output.weights
    num_forward = states.shape[1]

    out = np.empty((num_backward, num_steps + 1, model.state_dim))
    idx = _categorical(weights[num_steps], rng.random(num_backward))
    out[:, num_steps] = states[num_steps][idx]

    with np.errstate(divide="ignore"):
        log_weights = np.log(weights)

    x_next = out[:, num_steps]
    for k in range(num_steps - 1, -1, -1):
        g = np.asarray(model.diffusion(states[k], k * dt), dtype=float)
        if g.ndim == 2:
            logw = _pairwise_logweights(model, x_next, states[k], log_weights[k],
                                        g, k * dt, dt, cond_cap)
        else:
            logf = transition_logdensity_matrix(model, x_next, states[k], k * dt, dt, cond_cap)
            logw = (log_weights[k][None, :] + logf).astype(np.float32)
        rowmax = np.max(logw, axis=1)
        if not np.all(np.isfinite(rowmax)):
            raise DegenerateBackwardWeightsError(
                f"all backward weights underflowed at step {k}"
            )
        logw -= rowmax[:, None]
        w = np.exp(logw, out=logw)
        cum = np.cumsum(w, axis=1)
        # scaling the uniform by the row total draws from the normalized
        # categorical without a separate normalization pass
        target = cum[:, -1] * rng.random(num_backward).astype(np.float32)
        idx = np.minimum(np.sum(target[:, None] > cum, axis=1), num_forward - 1)
        x_next = states[k][idx]
        out[:, k] = x_next
    return out


def _pairwise_logweights(model, x_to, x_from, log_w, g, t, dt, cond_cap) -> np.ndarray:
    """Backward log weights log w_j + log f(x_to | x_from_j) up to a
    row-constant, as float32 (ample for drawing a categorical index).

    Only for state-independent diffusion: whitening by the one-step
    covariance turns the quadratic form into a plain squared distance that
    one matrix product evaluates for all pairs.
    """
    cov = (g @ g.T) * dt
    if np.linalg.cond(cov) > cond_cap:
        raise SingularDiffusionError(
            f"sigma_dyn sigma_dyn' is singular at t={t} (condition number above {cond_cap:g})"
        )
    chol = np.linalg.cholesky(cov)
    mean = x_from + np.asarray(model.drift(x_from, t), dtype=float) * dt
    white_from = np.linalg.solve(chol, mean.T).T.astype(np.float32)
    white_to = np.linalg.solve(chol, x_to.T).T.astype(np.float32)
    logw = white_to @ white_from.T
    logw += (log_w - 0.5 * np.sum(white_from.astype(float) ** 2, axis=1)).astype(np.float32)[None, :]
    return logw


def _categorical(weights: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.minimum(np.searchsorted(cum, uniforms, side="right"), weights.size - 1)


@dataclass(frozen=True)
class LinearGaussianSpec:
    """Scalar linear-Gaussian model on the integration grid.

    Transition x' = x + drift_const * dt + N(0, sigma_dyn^2 dt); observation
    y = obs_coeff * x + N(0, obs_var); Gaussian prior (prior_mean, prior_var).
    """

    grid: TimeGrid
    sigma_dyn: float
    obs_var: float
    prior_mean: float
    prior_var: float
    drift_const: float = 0.0
    obs_coeff: float = 1.0

    def __post_init__(self) -> None:
        if self.sigma_dyn <= 0 or self.obs_var <= 0 or self.prior_var <= 0:
            raise ValueError("variances must be positive")


@dataclass
class KalmanResult:
    """Exact per-grid-time filtering and smoothing moments."""

    times: np.ndarray
    filter_mean: np.ndarray
    filter_var: np.ndarray
    mean: np.ndarray
    var: np.ndarray


def kalman_rts(spec: LinearGaussianSpec, obs: ObservationSeries) -> KalmanResult:
    """Kalman forward pass plus Rauch-Tung-Striebel backward pass.

    The observation series must live on the same grid; its noise variance
    must agree with the spec.
    """
    if obs.grid != spec.grid:
        raise ValueError("observation series grid does not match the model grid")
    if obs.count > 0 and not np.allclose(obs.model.obs_variance, spec.obs_var):
        raise ValueError("observation variance disagrees with the linear-Gaussian spec")
    num_steps, dt = spec.grid.num_steps, spec.grid.dt
    q = spec.sigma_dyn**2 * dt
    h, r = spec.obs_coeff, spec.obs_var
    obs_at = obs.index_map()

    filt_m = np.empty(num_steps + 1)
    filt_p = np.empty(num_steps + 1)
    pred_m = np.empty(num_steps + 1)
    pred_p = np.empty(num_steps + 1)

    m, p = spec.prior_mean, spec.prior_var
    for k in range(num_steps + 1):
        if k > 0:
            m = m + spec.drift_const * dt
            p = p + q
        pred_m[k], pred_p[k] = m, p
        if k in obs_at:
            y = float(obs.values[obs_at[k], 0])
            gain = p * h / (h * h * p + r)
            m = m + gain * (y - h * m)
            p = (1.0 - gain * h) * p
        filt_m[k], filt_p[k] = m, p

    sm = filt_m.copy()
    sp = filt_p.copy()
    for k in range(num_steps - 1, -1, -1):
        gain = filt_p[k] / pred_p[k + 1]
        sm[k] = filt_m[k] + gain * (sm[k + 1] - pred_m[k + 1])
        sp[k] = filt_p[k] + gain * gain * (sp[k + 1] - pred_p[k + 1])

    return KalmanResult(
        times=spec.grid.times(),
        filter_mean=filt_m,
        filter_var=filt_p,
        mean=sm,
        var=sp,
    )
