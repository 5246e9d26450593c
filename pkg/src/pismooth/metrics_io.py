"""Error metrics against ground truth, cross-run statistics, and file output.

All result tables are CSV with full double precision (repr round-trip
formatting, '.' decimal separator, locale independent); the run manifest
is JSON and carries everything needed to reproduce the run bit-exactly.
Column schemas are documented in FORMATS.md.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .errors import GridMismatchError, InsufficientRunsError


def mse_vs_truth(estimates: np.ndarray, truth: np.ndarray, times: np.ndarray):
    """Mean squared error of per-run estimates against an exact reference.

    estimates has shape (R, L+1) or (R, L+1, n), truth the matching
    (L+1[, n]) shape.  Returns (per_time, time_average) where per_time
    averages the squared error over runs and time_average integrates it
    over the grid with the trapezoidal rule, divided by the horizon.
    """
    est = np.asarray(estimates, dtype=float)
    ref = np.asarray(truth, dtype=float)
    if est.ndim == ref.ndim:
        est = est[None, ...]
    if est.shape[1:] != ref.shape:
        raise ValueError(f"estimates {est.shape} do not align with truth {ref.shape}")
    per_time = np.mean((est - ref) ** 2, axis=0)
    times = np.asarray(times, dtype=float)
    horizon = times[-1] - times[0]
    time_average = np.trapezoid(per_time, times, axis=0) / horizon
    return per_time, time_average


def abs_error_vs_truth(estimates: np.ndarray, truth: np.ndarray, times: np.ndarray):
    """Same layout as mse_vs_truth but for the absolute error |estimate - truth|."""
    est = np.asarray(estimates, dtype=float)
    ref = np.asarray(truth, dtype=float)
    if est.ndim == ref.ndim:
        est = est[None, ...]
    per_time = np.mean(np.abs(est - ref), axis=0)
    times = np.asarray(times, dtype=float)
    horizon = times[-1] - times[0]
    return per_time, np.trapezoid(per_time, times, axis=0) / horizon


def cross_run_variance(
    estimates: np.ndarray,
    posterior_var: np.ndarray | None = None,
):
    """Unbiased across-run variance of repeated estimates.

    estimates has shape (R, L+1[, n]) with R >= 2.  Returns the per-time
    variance; when a reference posterior variance is supplied the variance
    is scaled by it and averaged over time and dimensions into one scalar,
    returned as a second value.
    """
    est = np.asarray(estimates, dtype=float)
    if est.shape[0] < 2:
        raise InsufficientRunsError(f"need at least two runs, got {est.shape[0]}")
    var = np.var(est, axis=0, ddof=1)
    if posterior_var is None:
        return var
    scaled = var / np.asarray(posterior_var, dtype=float)
    return var, float(np.mean(scaled))


@dataclass
class RunManifest:
    """Everything required to reproduce a run bit-exactly, plus bookkeeping."""

    config: dict
    seed: int
    code_version: str
    model_name: str
    created_utc: str = ""
    finished_utc: str = ""
    summary: dict = field(default_factory=dict)

    @classmethod
    def start(cls, config: dict, seed: int, code_version: str, model_name: str) -> "RunManifest":
        return cls(
            config=config,
            seed=int(seed),
            code_version=code_version,
            model_name=model_name,
            created_utc=datetime.now(timezone.utc).isoformat(),
        )

    def finish(self) -> "RunManifest":
        self.finished_utc = datetime.now(timezone.utc).isoformat()
        return self

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(**raw)


def _fmt(value) -> str:
    """Full-precision, locale-independent cell formatting."""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _write_csv(path, header: list[str], rows) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def write_marginals(path, times: np.ndarray, mean: np.ndarray, var: np.ndarray) -> None:
    """marginals.csv: one row per (t, dim) with weighted mean and variance."""
    mean = np.atleast_2d(np.asarray(mean, dtype=float).T).T
    var = np.atleast_2d(np.asarray(var, dtype=float).T).T
    rows = (
        (times[k], d, mean[k, d], var[k, d])
        for k in range(len(times))
        for d in range(mean.shape[1])
    )
    _write_csv(path, ["t", "dim", "mean", "variance"], rows)


def read_marginals(path):
    """Inverse of write_marginals: returns (times, mean, var) arrays."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header != ["t", "dim", "mean", "variance"]:
            raise ValueError(f"{path} is not a marginals table")
        raw = [line.strip().split(",") for line in fh if line.strip()]
    times = sorted({float(r[0]) for r in raw})
    dims = sorted({int(r[1]) for r in raw})
    t_index = {t: i for i, t in enumerate(times)}
    mean = np.empty((len(times), len(dims)))
    var = np.empty((len(times), len(dims)))
    for r in raw:
        i, d = t_index[float(r[0])], int(r[1])
        mean[i, d] = float(r[2])
        var[i, d] = float(r[3])
    return np.asarray(times), mean, var


def write_ess_trace(path, trace) -> None:
    """ess_trace.csv from a DiagnosticsTrace."""
    _write_csv(
        path,
        ["iteration", "raw_ess", "annealed_ess", "lambda", "weight_variance", "wall_time_ms"],
        trace.rows(),
    )


def write_errors(path, times: np.ndarray, truth_mean: np.ndarray, est_mean: np.ndarray) -> None:
    """errors.csv: signed, absolute, and squared error per (t, dim)."""
    ref = np.atleast_2d(np.asarray(truth_mean, dtype=float).T).T
    est = np.atleast_2d(np.asarray(est_mean, dtype=float).T).T
    diff = est - ref
    rows = (
        (times[k], d, diff[k, d], abs(diff[k, d]), diff[k, d] ** 2)
        for k in range(len(times))
        for d in range(ref.shape[1])
    )
    _write_csv(path, ["t", "dim", "error", "abs_error", "sq_error"], rows)


def write_filter_ess(path, times: np.ndarray, obs_indices, filter_ess: np.ndarray) -> None:
    """filter_ess.csv: pre-resampling weight ESS at each observation."""
    rows = ((k, times[k], filter_ess[j]) for j, k in enumerate(obs_indices))
    _write_csv(path, ["obs_index", "t", "filter_ess"], rows)


def write_snapshots(path, times: np.ndarray, snapshot_indices, states: np.ndarray, weights: np.ndarray) -> None:
    """snapshots.csv: raw weighted samples at selected grid times."""
    rows = (
        (times[k], d, states[p, k, d], weights[p])
        for k in snapshot_indices
        for d in range(states.shape[2])
        for p in range(states.shape[0])
    )
    _write_csv(path, ["t", "dim", "value", "weight"], rows)


def write_outputs(
    out_dir,
    manifest: RunManifest,
    times: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    trace=None,
    truth_mean: np.ndarray | None = None,
    obs_indices=None,
    filter_ess: np.ndarray | None = None,
    snapshots: tuple | None = None,
) -> dict:
    """Write the standard artifact set into out_dir; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    paths["marginals"] = os.path.join(out_dir, "marginals.csv")
    write_marginals(paths["marginals"], times, mean, var)
    if trace is not None:
        paths["ess_trace"] = os.path.join(out_dir, "ess_trace.csv")
        write_ess_trace(paths["ess_trace"], trace)
    if truth_mean is not None:
        paths["errors"] = os.path.join(out_dir, "errors.csv")
        write_errors(paths["errors"], times, truth_mean, mean)
    if filter_ess is not None and obs_indices is not None:
        paths["filter_ess"] = os.path.join(out_dir, "filter_ess.csv")
        write_filter_ess(paths["filter_ess"], times, obs_indices, filter_ess)
    if snapshots is not None:
        indices, states, weights = snapshots
        paths["snapshots"] = os.path.join(out_dir, "snapshots.csv")
        write_snapshots(paths["snapshots"], times, indices, states, weights)
    paths["manifest"] = os.path.join(out_dir, "manifest.json")
    manifest.finish().to_json(paths["manifest"])
    return paths


def join_marginals(out_dirs: list, method_names: list) -> list:
    """Join marginals.csv across method directories into comparison rows.

    Rows are keyed by (t, dim, method); grids must match exactly.
    """
    rows = []
    reference_times = None
    for directory, name in zip(out_dirs, method_names):
        times, mean, var = read_marginals(os.path.join(directory, "marginals.csv"))
        if reference_times is None:
            reference_times = times
        elif times.shape != reference_times.shape or not np.allclose(times, reference_times):
            raise GridMismatchError(
                f"{directory} was produced on a different time grid than {out_dirs[0]}"
            )
        for k in range(len(times)):
            for d in range(mean.shape[1]):
                rows.append((times[k], d, name, mean[k, d], var[k, d]))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return rows


def write_comparison(path, rows) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("t,dim,method,mean,variance\n")
            for t, d, name, m, v in rows:
                fh.write(f"{_fmt(t)},{d},{name},{_fmt(m)},{_fmt(v)}\n")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc
