"""Diffusion models, Gaussian observation models and the integration grid.

The latent dynamics are dX = F(X,t) dt + sigma_dyn(X,t) (u dt + dW) on a
uniform time grid, integrated with the Euler-Maruyama scheme; u = 0 gives
the prior process.  Model callables are vectorized over a leading particle
axis and must be pure (no internal state), so they are safe to evaluate
from any number of workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericalError, SingularDiffusionError

LOG_2PI = float(np.log(2.0 * np.pi))

#: Condition-number cap above which sigma_dyn sigma_dyn' counts as singular.
#: Large enough to tell genuinely deterministic components from round-off.
DIFFUSION_COND_CAP = 1e12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform integration grid t_k = k*dt for k = 0..num_steps."""

    dt: float
    num_steps: int

    def __post_init__(self) -> None:
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.num_steps < 1:
            raise ValueError(f"need at least one step, got {self.num_steps}")

    @property
    def horizon(self) -> float:
        return self.num_steps * self.dt

    def times(self) -> np.ndarray:
        return np.arange(self.num_steps + 1) * self.dt

    @classmethod
    def from_horizon(cls, horizon: float, dt: float) -> "TimeGrid":
        """Grid covering [0, horizon]; horizon must be a multiple of dt."""
        steps = int(round(horizon / dt))
        if steps < 1 or abs(steps * dt - horizon) > 1e-12 * abs(horizon):
            raise ValueError(f"horizon {horizon} is not a multiple of dt={dt}")
        return cls(dt=dt, num_steps=steps)

    def index_of(self, t: float, rtol: float = 1e-9) -> int:
        """Grid index of time t; rejects off-grid times."""
        k = int(round(t / self.dt))
        if k < 0 or k > self.num_steps or abs(k * self.dt - t) > rtol * max(self.dt, abs(t)):
            raise ValueError(f"time {t} is not on the grid (dt={self.dt})")
        return k


@dataclass(frozen=True)
class DiffusionModel:
    """Latent SDE: drift F(x,t) in R^n and diffusion matrix sigma_dyn(x,t).

    drift maps (..., n) states to (..., n); diffusion maps a state batch to
    either a constant (n, m) matrix or a (..., n, m) batch.
    """

    state_dim: int
    noise_dim: int
    drift: Callable[[np.ndarray, float], np.ndarray]
    diffusion: Callable[[np.ndarray, float], np.ndarray]
    name: str = ""


def step_euler_maruyama(
    model: DiffusionModel,
    x: np.ndarray,
    t: float,
    u: np.ndarray,
    dw: np.ndarray,
    dt: float,
    check: bool = True,
) -> np.ndarray:
    """One controlled Euler-Maruyama step x + F dt + sigma_dyn (u dt + dw).

    x has shape (..., n), u and dw shape (..., m).  With u = 0 this is a step
    of the uncontrolled prior process.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    drift = np.asarray(model.drift(x, t), dtype=float)
    if check and not np.all(np.isfinite(drift)):
        raise NumericalError(f"drift returned non-finite values at t={t}")
    g = np.asarray(model.diffusion(x, t), dtype=float)
    if check and not np.all(np.isfinite(g)):
        raise NumericalError(f"diffusion returned non-finite values at t={t}")
    kick = np.asarray(u, dtype=float) * dt + np.asarray(dw, dtype=float)
    if g.ndim == 2:
        incr = kick @ g.T
    else:
        incr = np.einsum("...ij,...j->...i", g, kick)
    return x + drift * dt + incr


def sample_noise(rng: np.random.Generator, noise_dim: int, dt: float) -> np.ndarray:
    """Gaussian noise increment: i.i.d. N(0, dt) per coordinate."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    return rng.standard_normal(noise_dim) * np.sqrt(dt)


def gaussian_transition_logdensity(
    model: DiffusionModel,
    x_next: np.ndarray,
    x: np.ndarray,
    t: float,
    dt: float,
    cond_cap: float = DIFFUSION_COND_CAP,
) -> float:
    """log N(x_next | x + F(x,t) dt, sigma sigma' dt) for the uncontrolled kernel.

    Raises SingularDiffusionError when the one-step covariance is singular or
    ill-conditioned beyond cond_cap, which marks backward simulation as
    inapplicable for the model.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_next = np.atleast_1d(np.asarray(x_next, dtype=float))
    mean = x + np.asarray(model.drift(x, t), dtype=float) * dt
    g = np.asarray(model.diffusion(x, t), dtype=float)
    cov = (g @ g.T) * dt
    if not np.all(np.isfinite(cov)):
        raise NumericalError(f"diffusion returned non-finite values at t={t}")
    if np.linalg.cond(cov) > cond_cap:
        raise SingularDiffusionError(
            f"sigma_dyn sigma_dyn' is singular at t={t} (condition number above {cond_cap:g})"
        )
    resid = x_next - mean
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise SingularDiffusionError(f"one-step covariance not positive definite at t={t}")
    quad = float(resid @ np.linalg.solve(cov, resid))
    return -0.5 * (quad + logdet + x.size * LOG_2PI)


@dataclass(frozen=True)
class GaussianObservationModel:
    """Independent Gaussian noise on a subset of state coordinates.

    observed_indices are 0-based positions into the state vector;
    obs_variance holds one positive variance per observed coordinate.
    """

    observed_indices: tuple[int, ...]
    obs_variance: np.ndarray

    def __post_init__(self) -> None:
        idx = tuple(int(i) for i in self.observed_indices)
        if len(idx) == 0:
            raise ValueError("observed_indices must be non-empty")
        if len(set(idx)) != len(idx):
            raise ValueError("observed_indices must be distinct")
        var = np.atleast_1d(np.asarray(self.obs_variance, dtype=float))
        if var.shape != (len(idx),):
            raise ValueError(
                f"obs_variance shape {var.shape} does not match {len(idx)} observed coords"
            )
        if np.any(var <= 0.0):
            raise ValueError("obs_variance must be positive elementwise")
        object.__setattr__(self, "observed_indices", idx)
        object.__setattr__(self, "obs_variance", var)

    @property
    def obs_dim(self) -> int:
        return len(self.observed_indices)


def log_obs_likelihood(obs_model: GaussianObservationModel, y: np.ndarray, x: np.ndarray):
    """Sum over observed coordinates of log N(y_i | x_i, obs_variance_i).

    x has shape (..., n); returns shape (...).
    """
    idx = list(obs_model.observed_indices)
    var = obs_model.obs_variance
    x = np.atleast_1d(np.asarray(x, dtype=float))
    diff = np.atleast_1d(np.asarray(y, dtype=float)) - x[..., idx]
    out = -0.5 * np.sum(diff * diff / var + np.log(2.0 * np.pi * var), axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ObservationSeries:
    """Observations pinned to grid indices; the last one sits at the horizon.

    values has shape (J, obs_dim).  An empty series (J = 0) is allowed and
    makes the smoothing problem degenerate to the prior.
    """

    grid: TimeGrid
    indices: tuple[int, ...]
    values: np.ndarray
    model: GaussianObservationModel

    def __post_init__(self) -> None:
        idx = tuple(int(k) for k in self.indices)
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape != (len(idx), self.model.obs_dim):
            raise ValueError(
                f"values shape {vals.shape} inconsistent with {len(idx)} observations "
                f"of dimension {self.model.obs_dim}"
            )
        if len(idx) > 0:
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ValueError("observation indices must be strictly increasing")
            if idx[0] < 0 or idx[-1] > self.grid.num_steps:
                raise ValueError("observation indices out of grid range")
            if idx[-1] != self.grid.num_steps:
                raise ValueError(
                    f"last observation must sit at the final grid index "
                    f"{self.grid.num_steps}, got {idx[-1]}"
                )
        if not np.all(np.isfinite(vals)):
            raise ValueError("observation values must be finite")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_times(
        cls,
        grid: TimeGrid,
        times: np.ndarray,
        values: np.ndarray,
        model: GaussianObservationModel,
    ) -> "ObservationSeries":
        """Build from observation times, rejecting any time off the grid."""
        indices = tuple(grid.index_of(float(t)) for t in np.asarray(times, dtype=float))
        return cls(grid=grid, indices=indices, values=np.asarray(values, dtype=float), model=model)

    @property
    def count(self) -> int:
        return len(self.indices)

    def index_map(self) -> dict[int, int]:
        """Map grid index -> row into values."""
        return {k: j for j, k in enumerate(self.indices)}


@dataclass(frozen=True)
class InitialStateDistribution:
    """Axis-aligned Gaussian prior over X_0, or a point mass when variance is None."""

    mean: np.ndarray
    variance: np.ndarray | None

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "mean", mean)
        if self.variance is not None:
            var = np.atleast_1d(np.asarray(self.variance, dtype=float))
            if var.shape != mean.shape:
                raise ValueError("variance shape must match mean shape")
            if np.any(var <= 0.0):
                raise ValueError("variance must be positive elementwise")
            object.__setattr__(self, "variance", var)

    @classmethod
    def delta(cls, x0) -> "InitialStateDistribution":
        return cls(mean=np.asarray(x0, dtype=float), variance=None)

    @classmethod
    def gaussian(cls, mean, variance) -> "InitialStateDistribution":
        return cls(mean=np.asarray(mean, dtype=float), variance=np.asarray(variance, dtype=float))

    @property
    def is_delta(self) -> bool:
        return self.variance is None

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.is_delta:
            return np.tile(self.mean, (size, 1))
        return self.mean + rng.standard_normal((size, self.dim)) * np.sqrt(self.variance)

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """Log density of a Gaussian initial law; undefined for point masses."""
        if self.is_delta:
            raise ValueError("point-mass initial distribution has no density")
        x = np.asarray(x, dtype=float)
        diff = x - self.mean
        return -0.5 * np.sum(diff * diff / self.variance + np.log(2.0 * np.pi * self.variance), axis=-1)


def brownian_model(sigma_dyn: float = 1.0, dim: int = 1) -> DiffusionModel:
    """Driftless diffusion with constant scalar noise amplitude per coordinate."""
    if sigma_dyn <= 0.0:
        raise ValueError("sigma_dyn must be positive")
    g = float(sigma_dyn) * np.eye(dim)

    def drift(x, t):
        return np.zeros_like(x)

    def diffusion(x, t):
        return g

    return DiffusionModel(state_dim=dim, noise_dim=dim, drift=drift, diffusion=diffusion, name="brownian")


@dataclass(frozen=True)
class Neural5Params:
    """Parameters of the 5-unit recurrent network drift.

    B is the antisymmetric connectivity matrix (enforced on construction),
    theta the per-unit threshold, A and omega the amplitude and frequency of
    per-unit sinusoidal inputs.
    """

    B: np.ndarray
    theta: np.ndarray
    A: np.ndarray
    omega: np.ndarray

    def __post_init__(self) -> None:
        B = np.asarray(self.B, dtype=float)
        theta = np.asarray(self.theta, dtype=float)
        A = np.asarray(self.A, dtype=float)
        omega = np.asarray(self.omega, dtype=float)
        if B.shape != (5, 5) or theta.shape != (5,) or A.shape != (5,) or omega.shape != (5,):
            raise ValueError("expected B (5,5) and theta/A/omega (5,)")
        if not np.allclose(B, -B.T, atol=1e-12):
            raise ValueError("connectivity matrix B must be antisymmetric")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "omega", omega)

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "Neural5Params":
        """Draw parameters: theta_i ~ N(0, 0.75^2), A_i ~ N(0, 2^2),
        omega_i ~ N(pi/5, pi^2) and antisymmetric B with B_ij ~ N(0, 2^2)."""
        theta = rng.normal(0.0, 0.75, size=5)
        A = rng.normal(0.0, 2.0, size=5)
        omega = rng.normal(np.pi / 5.0, np.pi, size=5)
        upper = rng.normal(0.0, 2.0, size=(5, 5))
        B = np.triu(upper, k=1)
        B = B - B.T
        return cls(B=B, theta=theta, A=A, omega=omega)

    @classmethod
    def from_json(cls, path) -> "Neural5Params":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        try:
            return cls(
                B=np.asarray(raw["B"], dtype=float),
                theta=np.asarray(raw["theta"], dtype=float),
                A=np.asarray(raw["A"], dtype=float),
                omega=np.asarray(raw["omega"], dtype=float),
            )
        except KeyError as exc:
            raise ValueError(f"parameter file {path} is missing field {exc}") from exc

    def to_json(self, path) -> None:
        payload = {
            "B": self.B.tolist(),
            "theta": self.theta.tolist(),
            "A": self.A.tolist(),
            "omega": self.omega.tolist(),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)


def neural5_model(params: Neural5Params, sigma_dyn2: float = 0.05) -> DiffusionModel:
    """5-D nonlinear network: dX = [-X + tanh(B X + theta + A sin(omega t))] dt + sigma dW."""
    if sigma_dyn2 <= 0.0:
        raise ValueError("sigma_dyn2 must be positive")
    g = np.sqrt(float(sigma_dyn2)) * np.eye(5)
    B_T = params.B.T.copy()
    theta, A, omega = params.theta, params.A, params.omega

    def drift(x, t):
        inp = x @ B_T + theta + A * np.sin(omega * t)
        return -x + np.tanh(inp)

    def diffusion(x, t):
        return g

    return DiffusionModel(state_dim=5, noise_dim=5, drift=drift, diffusion=diffusion, name="neural5")
