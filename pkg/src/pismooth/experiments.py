"""Config-driven runs and the three shipped experiments.

An ExperimentConfig resolves to a Problem (model + grid + prior +
observations, plus the exact linear-Gaussian spec when one applies); a
single run executes one method on it and writes the standard artifact set.
Repeats run with seeds seed..seed+R-1 in disjoint subdirectories and may
execute in parallel processes.

Deterministic stream layout: neural5 parameters draw from [param_seed, 0],
observation generation from [gen_seed, 1], filter/backward methods from
[seed, 2], and the smoother's iteration i from [seed, i].
"""

from __future__ import annotations

import copy
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .apis import ApisConfig, marginals_all, run_apis
from .baselines import (
    LinearGaussianSpec,
    bootstrap_filter,
    ffbsi,
    filter_smoother,
    kalman_rts,
)
from .config import ExperimentConfig, load_observation_file
from .controller import save_controller
from .errors import ConfigError
from .metrics_io import (
    RunManifest,
    _write_csv,
    join_marginals,
    mse_vs_truth,
    write_comparison,
    write_outputs,
)
from .models import (
    DiffusionModel,
    GaussianObservationModel,
    InitialStateDistribution,
    Neural5Params,
    ObservationSeries,
    TimeGrid,
    brownian_model,
    neural5_model,
    step_euler_maruyama,
)

_PARAM_STREAM = 0
_OBS_STREAM = 1
_METHOD_STREAM = 2

EXPERIMENT_NAMES = ("lq-unlikely", "lq-long", "neural5")


@dataclass
class Problem:
    """A fully resolved smoothing problem."""

    model: DiffusionModel
    grid: TimeGrid
    prior: InitialStateDistribution
    obs: ObservationSeries
    lin_spec: LinearGaussianSpec | None
    truth_path: np.ndarray | None


def _broadcast(values, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0 or arr.shape == (1,):
        return np.full(dim, float(arr.reshape(-1)[0]))
    if arr.shape != (dim,):
        raise ConfigError(f"{name} must be a scalar or have {dim} entries, got {arr.shape}")
    return arr


def generate_observations(
    model: DiffusionModel,
    prior: InitialStateDistribution,
    grid: TimeGrid,
    obs_model: GaussianObservationModel,
    count: int,
    every_steps: int,
    rng: np.random.Generator,
) -> tuple[ObservationSeries, np.ndarray]:
    """Simulate a ground-truth path and observe it every `every_steps` steps.

    Draws interleave one path increment and (when due) one observation per
    grid step, so a series truncated to its first J observations is the
    prefix of the longer series generated from the same stream.
    """
    if count * every_steps != grid.num_steps:
        raise ConfigError(
            f"count * every_steps = {count * every_steps} must equal the grid length {grid.num_steps}"
        )
    n, m = model.state_dim, model.noise_dim
    dt = grid.dt
    x = prior.sample(rng, 1)[0]
    truth = np.empty((grid.num_steps + 1, n))
    truth[0] = x
    idx = list(obs_model.observed_indices)
    values = np.empty((count, obs_model.obs_dim))
    for k in range(1, grid.num_steps + 1):
        dw = rng.standard_normal(m) * np.sqrt(dt)
        x = step_euler_maruyama(model, x, (k - 1) * dt, 0.0, dw, dt, check=False)
        truth[k] = x
        if k % every_steps == 0:
            j = k // every_steps - 1
            values[j] = x[idx] + np.sqrt(obs_model.obs_variance) * rng.standard_normal(obs_model.obs_dim)
    indices = tuple(every_steps * (j + 1) for j in range(count))
    return ObservationSeries(grid, indices, values, obs_model), truth


def build_problem(cfg: ExperimentConfig) -> Problem:
    """Resolve a validated config into model, prior and observations."""
    mc = cfg.model
    grid = TimeGrid.from_horizon(mc["horizon"], mc["dt"])

    if mc["name"] == "brownian":
        dim = int(mc.get("dim", 1))
        sigma_dyn2 = float(mc.get("sigma_dyn2", 1.0))
        model = brownian_model(np.sqrt(sigma_dyn2), dim)
    else:
        if "params_file" in mc:
            params = Neural5Params.from_json(mc["params_file"])
        else:
            params = Neural5Params.sample(np.random.default_rng([mc["param_seed"], _PARAM_STREAM]))
        model = neural5_model(params, float(mc.get("sigma_dyn2", 0.05)))

    n = model.state_dim
    if mc.get("prior", "gaussian") == "delta":
        prior = InitialStateDistribution.delta(_broadcast(mc.get("x0", 0.0), n, "model.x0"))
    else:
        prior = InitialStateDistribution.gaussian(
            _broadcast(mc.get("prior_mean", 0.0), n, "model.prior_mean"),
            _broadcast(mc.get("prior_var", 1.0), n, "model.prior_var"),
        )

    oc = cfg.observations
    observed = tuple(oc.get("observed_dims", [0]))
    truth_path = None
    if "obs_var" in oc:
        obs_model = GaussianObservationModel(
            observed, _broadcast(oc["obs_var"], len(observed), "observations.obs_var")
        )
        if "file" in oc:
            obs = load_observation_file(oc["file"], grid, obs_model)
        elif "at_steps" in oc:
            values = np.asarray(oc["values"], dtype=float).reshape(len(oc["at_steps"]), len(observed))
            obs = ObservationSeries(grid, tuple(oc["at_steps"]), values, obs_model)
        elif "count" in oc:
            gen_seed = int(oc.get("gen_seed", cfg.run["seed"]))
            obs, truth_path = generate_observations(
                model, prior, grid, obs_model, oc["count"], oc["every_steps"],
                np.random.default_rng([gen_seed, _OBS_STREAM]),
            )
        else:
            obs = ObservationSeries(grid, (), np.empty((0, len(observed))), obs_model)
    else:
        obs_model = GaussianObservationModel((0,), np.ones(1))
        obs = ObservationSeries(grid, (), np.empty((0, 1)), obs_model)

    lin_spec = None
    if mc["name"] == "brownian" and n == 1 and not prior.is_delta and obs.model.obs_dim == 1:
        lin_spec = LinearGaussianSpec(
            grid=grid,
            sigma_dyn=float(np.sqrt(mc.get("sigma_dyn2", 1.0))),
            obs_var=float(obs.model.obs_variance[0]),
            prior_mean=float(prior.mean[0]),
            prior_var=float(prior.variance[0]),
        )
    return Problem(model=model, grid=grid, prior=prior, obs=obs, lin_spec=lin_spec, truth_path=truth_path)


def _apis_config(method: dict, seed: int) -> ApisConfig:
    return ApisConfig(
        particles=int(method.get("particles", 1000)),
        eta=float(method.get("eta", 0.05)),
        max_iters=int(method.get("max_iters", 50)),
        theta_ess=float(method.get("ess_stop", 1.0)),
        gamma=float(method.get("anneal_threshold", 0.0)),
        beta=float(method.get("anneal_factor", 1.1)),
        seed=seed,
        ridge=float(method.get("ridge", 1e-6)),
        var_floor=float(method.get("var_floor", 1e-12)),
        dq_window=int(method.get("dq_window", 1)),
        anneal_cap=int(method.get("anneal_cap", 500)),
    )


def run_single(cfg: ExperimentConfig, out_dir, snapshot_indices=None) -> dict:
    """Execute the configured method once and write the artifact set."""
    seed = int(cfg.run["seed"])
    problem = build_problem(cfg)
    method = cfg.method["name"]
    grid = problem.grid
    times = grid.times()
    manifest = RunManifest.start(cfg.to_dict(), seed, __version__, problem.model.name)

    _warn_particle_budget(cfg, grid)

    trace = None
    obs_indices = None
    filter_ess_values = None
    snapshots = None
    extra_rows = None

    if method == "apis":
        acfg = _apis_config(cfg.method, seed)
        system, controller, stats, trace = run_apis(problem.model, problem.obs, problem.prior, acfg)
        mean, var = marginals_all(system.states, system.weights)
        manifest.summary["final_raw_ess"] = trace.raw_ess[-1]
        manifest.summary["iterations"] = len(trace) - 1
        save_controller(os.path.join(_ensure(out_dir), "controller.npz"), controller, stats)
        if snapshot_indices is not None:
            snapshots = (snapshot_indices, system.states, system.weights)
    elif method in ("fs", "ffbsi"):
        rng = np.random.default_rng([seed, _METHOD_STREAM])
        fo = bootstrap_filter(
            problem.model, problem.obs, problem.prior, int(cfg.method.get("particles", 1000)), rng
        )
        obs_indices, filter_ess_values = fo.obs_indices, fo.filter_ess
        if method == "fs":
            fs = filter_smoother(fo)
            mean, var = marginals_all(fs.trajectories, fs.weights)
            manifest.summary["fs_unique_ess"] = fs.fs_ess
            extra_rows = ("fs_unique.csv", ["t", "unique_fraction"],
                          list(zip(times, fs.unique_fraction)))
            if snapshot_indices is not None:
                snapshots = (snapshot_indices, fs.trajectories, fs.weights)
        else:
            num_back = int(cfg.method.get("backward_particles", cfg.method.get("particles", 1000)))
            paths = ffbsi(fo, problem.model, num_back, rng)
            weights = np.full(num_back, 1.0 / num_back)
            mean, var = marginals_all(paths, weights)
            manifest.summary["backward_particles"] = num_back
            if snapshot_indices is not None:
                snapshots = (snapshot_indices, paths, weights)
    elif method == "kalman":
        if problem.lin_spec is None:
            raise ConfigError("kalman needs the 1-D brownian model with a Gaussian prior")
        result = kalman_rts(problem.lin_spec, problem.obs)
        mean, var = result.mean[:, None], result.var[:, None]
    else:
        raise ConfigError(f"unknown method '{method}'")

    truth_mean = None
    if problem.lin_spec is not None:
        truth_mean = kalman_rts(problem.lin_spec, problem.obs).mean[:, None]

    paths = write_outputs(
        out_dir,
        manifest,
        times,
        mean,
        var,
        trace=trace,
        truth_mean=truth_mean,
        obs_indices=obs_indices,
        filter_ess=filter_ess_values,
        snapshots=snapshots,
    )
    if extra_rows is not None:
        name, header, rows = extra_rows
        extra_path = os.path.join(out_dir, name)
        _write_csv(extra_path, header, rows)
        paths["fs_unique"] = extra_path
    return paths


def _ensure(path):
    os.makedirs(path, exist_ok=True)
    return path


def _warn_particle_budget(cfg: ExperimentConfig, grid: TimeGrid) -> None:
    """Heuristic stability guard N > 2/dt; warn, never fail."""
    import logging

    particles = cfg.method.get("particles")
    if cfg.method["name"] == "apis" and particles is not None and particles <= 2.0 / grid.dt:
        logging.getLogger("pismooth").warning(
            "particles=%d is at or below the 2/dt=%g stability rule of thumb",
            particles, 2.0 / grid.dt,
        )


def _run_repeat(cfg_dict: dict, out_dir: str, snapshot_steps=None) -> str:
    run_single(ExperimentConfig.from_dict(cfg_dict), out_dir, snapshot_indices=snapshot_steps)
    return out_dir


def run_config(cfg: ExperimentConfig, out_root=None, threads: int = 1, snapshot_indices=None) -> list:
    """Run all repeats (seeds seed..seed+R-1) into run_### subdirectories.

    snapshot_indices, when given, apply to the first repeat only.
    """
    out_root = out_root or cfg.run.get("out_dir")
    if not out_root:
        raise ConfigError("run.out_dir (or --out) is required")
    repeats = int(cfg.run.get("repeats", 1))
    base_seed = int(cfg.run["seed"])
    jobs = []
    for r in range(repeats):
        rep = copy.deepcopy(cfg)
        rep.run["seed"] = base_seed + r
        rep.run["repeats"] = 1
        snaps = list(snapshot_indices) if (r == 0 and snapshot_indices is not None) else None
        jobs.append((rep.to_dict(), os.path.join(out_root, f"run_{r:03d}"), snaps))
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_run_repeat, *zip(*jobs)))
    return [_run_repeat(*job) for job in jobs]


def rerun_from_manifest(manifest_path, out_dir) -> dict:
    """Reproduce a run bit-exactly from its manifest."""
    manifest = RunManifest.from_json(manifest_path)
    cfg = ExperimentConfig.from_dict(manifest.config)
    return run_single(cfg, out_dir)


# --- shipped experiments ----------------------------------------------------

_LQ_LONG_DEFAULT_BUDGET = 0.05 * 100  # eta * max_iters kept constant on overrides


def experiment_configs(
    name: str,
    *,
    seed: int | None = None,
    particles: int | None = None,
    eta: float | None = None,
    num_obs: int | None = None,
    max_iters: int | None = None,
    terminal_obs: float | None = None,
    backward_particles: int | None = None,
    ess_stop: float | None = None,
    prior: str | None = None,
    repeats: int | None = None,
    methods: tuple | None = None,
) -> dict[str, ExperimentConfig]:
    """Resolved per-method configs for a named experiment, with overrides."""
    if name == "lq-unlikely":
        return _lq_unlikely(seed, particles, eta, max_iters, terminal_obs,
                            backward_particles, repeats, methods)
    if name == "lq-long":
        return _lq_long(seed, particles, eta, num_obs, max_iters, repeats, methods)
    if name == "neural5":
        return _neural5(seed, particles, eta, num_obs, max_iters, backward_particles,
                        ess_stop, prior, repeats, methods)
    raise ConfigError(f"unknown experiment '{name}' (expected one of {EXPERIMENT_NAMES})")


def _assemble(model, observations, method_blocks, seed, repeats, methods):
    out = {}
    for method_name, block in method_blocks.items():
        if methods is not None and method_name not in methods:
            continue
        out[method_name] = ExperimentConfig.from_dict(
            {
                "model": model,
                "observations": observations,
                "method": {"name": method_name, **block},
                "run": {"seed": seed, "repeats": repeats},
            }
        )
    return out


def _lq_unlikely(seed, particles, eta, max_iters, terminal_obs, backward_particles,
                 repeats, methods):
    seed = 1 if seed is None else seed
    n_part = 2000 if particles is None else particles
    model = {
        "name": "brownian", "dt": 0.01, "horizon": 1.0, "sigma_dyn2": 1.0, "dim": 1,
        "prior": "gaussian", "prior_mean": [0.0], "prior_var": [4.0],
    }
    observations = {
        "at_steps": [0, 100],
        "values": [0.0, 5.0 if terminal_obs is None else float(terminal_obs)],
        "obs_var": [1.0], "observed_dims": [0],
    }
    blocks = {
        "apis": {
            "particles": n_part, "eta": 0.2 if eta is None else eta,
            "max_iters": 15 if max_iters is None else max_iters,
            "ess_stop": 1.0, "anneal_threshold": 0.0,
        },
        "fs": {"particles": n_part},
        "ffbsi": {"particles": n_part,
                  "backward_particles": n_part if backward_particles is None else backward_particles},
        "kalman": {},
    }
    return _assemble(model, observations, blocks, seed, 1 if repeats is None else repeats, methods)


def _lq_long(seed, particles, eta, num_obs, max_iters, repeats, methods):
    seed = 10 if seed is None else seed
    num_obs = 300 if num_obs is None else num_obs
    if num_obs == 1000:
        # finer grid: at dt = 0.003 the discretization alone caps the ESS
        # near 0.26 even under the exact optimal control
        dt, every, n_part_default = 0.001, 3, 10_000
        apis_extra = {"anneal_threshold": 0.01, "anneal_factor": 1.15, "max_iters": 250}
    else:
        dt, every, n_part_default = 0.01, 1, 300
        apis_extra = {"anneal_threshold": 0.0, "max_iters": 100}
    if max_iters is not None:
        apis_extra["max_iters"] = max_iters
    elif eta is not None:
        apis_extra["max_iters"] = max(1, round(_LQ_LONG_DEFAULT_BUDGET / eta))
    model = {
        "name": "brownian", "dt": dt, "horizon": round(num_obs * every * dt, 12),
        "sigma_dyn2": 0.75,
        "dim": 1, "prior": "gaussian", "prior_mean": [0.0], "prior_var": [4.0],
    }
    observations = {
        "count": num_obs, "every_steps": every, "gen_seed": 10,
        "obs_var": [0.9], "observed_dims": [0],
    }
    blocks = {
        "apis": {
            "particles": n_part_default if particles is None else particles,
            "eta": 0.05 if eta is None else eta, "ess_stop": 1.0, **apis_extra,
        },
        "kalman": {},
    }
    return _assemble(model, observations, blocks, seed, 1 if repeats is None else repeats, methods)


def _neural5(seed, particles, eta, num_obs, max_iters, backward_particles, ess_stop,
             prior, repeats, methods):
    seed = 3 if seed is None else seed
    num_obs = 50 if num_obs is None else num_obs
    n_part = 6000 if particles is None else particles
    model = {
        "name": "neural5", "dt": 0.01, "horizon": round(num_obs * 0.1, 12),
        "sigma_dyn2": 0.05, "param_seed": 5,
    }
    if prior == "delta":
        model.update({"prior": "delta", "x0": [0.0]})
    else:
        model.update({"prior": "gaussian", "prior_mean": [0.0], "prior_var": [1.0]})
    observations = {
        "count": num_obs, "every_steps": 10, "gen_seed": seed,
        "obs_var": [0.01], "observed_dims": [0],
    }
    blocks = {
        "apis": {
            "particles": n_part, "eta": 0.05 if eta is None else eta,
            "max_iters": 150 if max_iters is None else max_iters,
            "ess_stop": 0.1 if ess_stop is None else ess_stop,
            "anneal_threshold": 0.02, "anneal_factor": 1.1,
        },
        "fs": {"particles": n_part},
        "ffbsi": {"particles": n_part,
                  "backward_particles": n_part // 2 if backward_particles is None else backward_particles},
    }
    return _assemble(model, observations, blocks, seed, 10 if repeats is None else repeats, methods)


def run_experiment(name: str, out_root, threads: int = 1, **overrides) -> dict:
    """Run every configured method of a named experiment and join the tables."""
    configs = experiment_configs(name, **overrides)
    snapshot_indices = range(0, 101, 10) if name == "lq-unlikely" else None
    produced = {}
    for method_name, cfg in configs.items():
        method_dir = os.path.join(out_root, method_name)
        snaps = snapshot_indices if method_name != "kalman" else None
        run_dirs = run_config(cfg, method_dir, threads=threads, snapshot_indices=snaps)
        produced[method_name] = run_dirs
        _aggregate_errors(cfg, run_dirs, os.path.join(method_dir, "mse.csv"))
    first_dirs = [dirs[0] for dirs in produced.values()]
    rows = join_marginals(first_dirs, list(produced.keys()))
    write_comparison(os.path.join(out_root, "comparison.csv"), rows)
    return produced


def _aggregate_errors(cfg: ExperimentConfig, run_dirs, out_path) -> None:
    """Per-time MSE across repeats against the exact reference, when one exists."""
    from .metrics_io import read_marginals

    problem = build_problem(cfg)
    if problem.lin_spec is None:
        return
    truth = kalman_rts(problem.lin_spec, problem.obs).mean
    estimates = []
    for d in run_dirs:
        _, mean, _ = read_marginals(os.path.join(d, "marginals.csv"))
        estimates.append(mean[:, 0])
    per_time, avg = mse_vs_truth(np.asarray(estimates), truth, problem.grid.times())
    rows = list(zip(problem.grid.times(), per_time)) + [("time_average", avg)]
    _write_csv_mixed(out_path, ["t", "mse"], rows)


def _write_csv_mixed(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for key, value in rows:
            fh.write(f"{key},{float(value)!r}\n")
