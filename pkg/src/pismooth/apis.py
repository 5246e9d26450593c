"""Adaptive path-integral smoother: controlled rollouts, importance weights,
effective sample size, annealing and the outer adaptation loop.

Each iteration rolls out N controlled trajectories, scores them with the
path cost

    S = S0 - sum_j log g(y_j | X_{k_j})
          + sum_k ( ||u_k||^2 dt / 2 + u_k . dW_k )

and reweights with alpha ∝ exp(-S).  Costs are the primitive quantity and
stay in the log domain throughout; weights are derived, which keeps runs
with costs of hundreds of nats stable.  The controller, the initial
proposal and the standardization statistics are then re-estimated from the
weighted system and the loop repeats until the raw effective sample size
reaches the stopping threshold or the iteration budget runs out.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .controller import (
    LinearFeedbackController,
    StandardizationStats,
    accumulate_stats_all,
    eval_control,
    rebase_controller,
    update_controller,
    update_standardization,
)
from .errors import AnnealCapError, NumericalError
from .models import (
    DiffusionModel,
    InitialStateDistribution,
    ObservationSeries,
    log_obs_likelihood,
    step_euler_maruyama,
)

logger = logging.getLogger("pismooth")

#: Gaussian proposal over X_0; identical in form to a Gaussian initial law.
InitialProposal = InitialStateDistribution


@dataclass(frozen=True)
class ApisConfig:
    """Hyperparameters of the adaptive smoother.

    gamma is the annealing threshold expressed as a target fraction of
    particles (N0 / N); gamma = 0 disables annealing.  theta_ess stops the
    loop once the raw effective sample size reaches it.
    """

    particles: int
    eta: float
    max_iters: int
    theta_ess: float = 1.0
    gamma: float = 0.0
    beta: float = 1.1
    seed: int = 0
    ridge: float = 1e-6
    var_floor: float = 1e-12
    anneal_cap: int = 500
    cond_cap: float = 1e12
    dq_window: int = 1
    plateau_window: int = 0
    plateau_tol: float = 0.0

    def __post_init__(self) -> None:
        if self.particles < 1:
            raise ValueError("need at least one particle")
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"learning rate must lie in (0, 1), got {self.eta}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if not 0.0 < self.theta_ess <= 1.0:
            raise ValueError(f"theta_ess must lie in (0, 1], got {self.theta_ess}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.beta <= 1.0:
            raise ValueError(f"beta must exceed 1, got {self.beta}")
        if self.dq_window < 1:
            raise ValueError("dq_window must be at least 1")


@dataclass
class ParticleSystem:
    """N weighted trajectories with their noise realizations and path costs.

    states (N, L+1, n); noises (N, L, m); costs (N,); weights (N,) summing
    to one.  Noises are kept only for the current iteration, so peak memory
    is O(N L (n + m)).
    """

    states: np.ndarray
    noises: np.ndarray
    costs: np.ndarray
    weights: np.ndarray


@dataclass
class DiagnosticsTrace:
    """Per-iteration record of the adaptation loop.

    weight_variance is the empirical variance of the mean-one rescaled
    weights N alpha, so raw_ess == 1 / (weight_variance + 1).  wall_time_ms
    is informational only and excluded from determinism comparisons.
    """

    iteration: list[int] = field(default_factory=list)
    raw_ess: list[float] = field(default_factory=list)
    annealed_ess: list[float] = field(default_factory=list)
    lam: list[float] = field(default_factory=list)
    weight_variance: list[float] = field(default_factory=list)
    wall_time_ms: list[float] = field(default_factory=list)

    def append(self, iteration, raw, annealed, lam, variance, wall_ms) -> None:
        self.iteration.append(int(iteration))
        self.raw_ess.append(float(raw))
        self.annealed_ess.append(float(annealed))
        self.lam.append(float(lam))
        self.weight_variance.append(float(variance))
        self.wall_time_ms.append(float(wall_ms))

    def __len__(self) -> int:
        return len(self.iteration)

    def rows(self):
        """Rows in the ess_trace.csv column order."""
        return list(
            zip(self.iteration, self.raw_ess, self.annealed_ess, self.lam,
                self.weight_variance, self.wall_time_ms)
        )


def compute_weights(costs: np.ndarray) -> np.ndarray:
    """Normalized weights exp(-S), stabilized by shifting with min(S)."""
    s = np.asarray(costs, dtype=float)
    if not np.all(np.isfinite(s)):
        raise NumericalError("particle costs contain non-finite values")
    w = np.exp(-(s - s.min()))
    return w / w.sum()


def ess(weights: np.ndarray) -> float:
    """Effective sample fraction 1 / (N sum alpha^2), in [1/N, 1]."""
    w = np.asarray(weights, dtype=float)
    return float(1.0 / (w.size * np.dot(w, w)))


def anneal(
    costs: np.ndarray,
    gamma: float,
    beta: float,
    cap: int = 500,
) -> tuple[float, np.ndarray]:
    """Smallest temperature lam = beta^m whose flattened weights reach ESS gamma.

    Returns (lam, weights of exp(-S / lam)).  gamma = 0 disables annealing
    (lam = 1).  The scan is safe because the ESS of tempered weights is
    non-decreasing in lam.
    """
    weights = compute_weights(costs)
    lam = 1.0
    m = 0
    while ess(weights) < gamma:
        m += 1
        if m > cap:
            raise AnnealCapError(
                f"annealing exceeded {cap} steps without reaching ESS {gamma}"
            )
        lam = beta ** m
        weights = compute_weights(costs / lam)
    return lam, weights


def rollout(
    model: DiffusionModel,
    obs: ObservationSeries,
    ctrl: LinearFeedbackController,
    stats: StandardizationStats,
    proposal: InitialProposal | None,
    prior: InitialStateDistribution,
    cfg: ApisConfig,
    rng: np.random.Generator,
) -> ParticleSystem:
    """Simulate N controlled trajectories and their path costs.

    X_0 comes from the proposal when one is supplied (with the matching
    log p0/q correction folded into the cost), otherwise from the prior.
    An observation at the initial grid time contributes exactly once,
    before any integration step.
    """
    grid = obs.grid
    num = cfg.particles
    num_steps = grid.num_steps
    n, m = model.state_dim, model.noise_dim
    dt = grid.dt

    if proposal is None:
        x = prior.sample(rng, num)
        costs = np.zeros(num)
    else:
        x = proposal.sample(rng, num)
        costs = proposal.log_density(x) - prior.log_density(x)

    noises = rng.standard_normal((num, num_steps, m)) * np.sqrt(dt)
    states = np.empty((num, num_steps + 1, n))
    states[:, 0, :] = x

    obs_at = obs.index_map()
    if 0 in obs_at:
        costs = costs - log_obs_likelihood(obs.model, obs.values[obs_at[0]], x)

    controls = np.empty_like(noises)
    for k in range(num_steps):
        u = eval_control(ctrl, stats, x, k)
        controls[:, k, :] = u
        x = step_euler_maruyama(model, x, k * dt, u, noises[:, k, :], dt, check=False)
        states[:, k + 1, :] = x
        if (k + 1) in obs_at:
            costs -= log_obs_likelihood(obs.model, obs.values[obs_at[k + 1]], x)

    costs += 0.5 * dt * np.einsum("pki,pki->p", controls, controls, optimize=True)
    costs += np.einsum("pki,pki->p", controls, noises, optimize=True)
    _check_finite(states, costs)
    return ParticleSystem(states=states, noises=noises, costs=costs, weights=compute_weights(costs))


def _check_finite(states: np.ndarray, costs: np.ndarray) -> None:
    if not np.all(np.isfinite(states)):
        bad = np.argwhere(~np.isfinite(states))[0]
        raise NumericalError(
            f"non-finite state for particle {bad[0]} at grid index {bad[1]}"
        )
    if not np.all(np.isfinite(costs)):
        bad = int(np.flatnonzero(~np.isfinite(costs))[0])
        raise NumericalError(f"non-finite path cost for particle {bad}")


def update_initial_proposal(
    initial_states: np.ndarray,
    weights: np.ndarray,
    var_floor: float = 1e-12,
) -> InitialProposal:
    """Gaussian proposal matched to the weighted moments of X_0."""
    mu = weights @ initial_states
    centered = initial_states - mu
    var = weights @ (centered * centered)
    return InitialProposal.gaussian(mu, np.maximum(var, var_floor))


def weighted_marginals(states: np.ndarray, weights: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and variance of the states at grid index k."""
    x = states[:, k, :]
    mean = weights @ x
    centered = x - mean
    return mean, weights @ (centered * centered)


def marginals_all(states: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and variance at every grid time, shapes (L+1, n)."""
    mean = np.tensordot(weights, states, axes=(0, 0))
    centered = states - mean[None, :, :]
    var = np.tensordot(weights, centered * centered, axes=(0, 0))
    return mean, var


def run_apis(
    model: DiffusionModel,
    obs: ObservationSeries,
    prior: InitialStateDistribution,
    cfg: ApisConfig,
    controller: LinearFeedbackController | None = None,
    stats: StandardizationStats | None = None,
) -> tuple[ParticleSystem, LinearFeedbackController, StandardizationStats, DiagnosticsTrace]:
    """Run the full adaptation loop and return the final weighted system.

    Iteration i draws its randomness from a stream keyed by (seed, i), so a
    given configuration is bit-reproducible.  Stopping uses the raw
    (untempered) effective sample size; annealed weights are used only to
    estimate the controller, proposal and standardization within an
    iteration.  max_iters counts controller updates: max_iters = 0 performs
    a single uncontrolled rollout (plain importance sampling).
    """
    grid = obs.grid
    n, m = model.state_dim, model.noise_dim
    if controller is None:
        controller = LinearFeedbackController.zeros(grid.num_steps, m, n)
    if stats is None:
        stats = StandardizationStats.identity(grid.num_steps, n)
    if controller.num_steps != grid.num_steps or stats.mu.shape != (grid.num_steps + 1, n):
        raise ValueError("controller/standardization shapes do not match the grid")

    proposal: InitialProposal | None = None
    trace = DiagnosticsTrace()
    system = None

    for iteration in range(cfg.max_iters + 1):
        started = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, iteration])
        system = rollout(model, obs, controller, stats, proposal, prior, cfg, rng)
        raw_ess = ess(system.weights)
        lam, est_weights = anneal(system.costs, cfg.gamma, cfg.beta, cfg.anneal_cap)
        wall_ms = (time.perf_counter() - started) * 1000.0
        trace.append(
            iteration, raw_ess, ess(est_weights), lam,
            cfg.particles * float(np.dot(system.weights, system.weights)) - 1.0,
            wall_ms,
        )
        logger.info(
            "iter %d raw_ess %.5f annealed_ess %.5f lambda %.3f",
            iteration, raw_ess, trace.annealed_ess[-1], lam,
        )

        if raw_ess >= cfg.theta_ess or iteration == cfg.max_iters or _plateaued(trace, cfg):
            break

        if not prior.is_delta:
            proposal = update_initial_proposal(system.states[:, 0, :], est_weights, cfg.var_floor)
        # Refresh the standardization from the current weighted system first
        # and re-express the controller in it (u(x) itself is unchanged).
        # The statistics are then taken in the refreshed basis, where the
        # weighted z's have zero mean and unit spread, so the open-loop and
        # feedback updates decouple and the ridge is correctly scaled.
        refreshed = update_standardization(system.states, est_weights, cfg.var_floor)
        controller = rebase_controller(controller, stats, refreshed)
        stats = refreshed
        corr, mean_dw, dqz = accumulate_stats_all(
            system.states, system.noises, est_weights, stats, cfg.dq_window
        )
        controller = update_controller(
            controller, corr, mean_dw, dqz, cfg.eta, grid.dt, cfg.ridge, cfg.cond_cap
        )

    return system, controller, stats, trace


def _plateaued(trace: DiagnosticsTrace, cfg: ApisConfig) -> bool:
    """Optional alternative stopping rule: raw ESS flat over the last window."""
    w = cfg.plateau_window
    if w <= 0 or len(trace) <= w:
        return False
    recent = trace.raw_ess[-(w + 1):]
    return max(recent) - min(recent) < cfg.plateau_tol
