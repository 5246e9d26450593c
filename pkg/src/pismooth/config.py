"""Experiment configuration: INI-style sections of flat key = value pairs.

Sections are [model], [observations], [method] and [run]; the full grammar
and every key are documented in FORMATS.md.  Configs are validated against
the schema here before any compute; unknown keys are rejected with the
offending line number where it can be recovered from the source text.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

_MODELS = ("brownian", "neural5")
_METHODS = ("apis", "fs", "ffbsi", "kalman")
_PRIORS = ("gaussian", "delta")


def _floats(text: str) -> list[float]:
    return [float(tok) for tok in text.replace(";", ",").split(",") if tok.strip()]


def _ints(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


# Section -> key -> (parser, description). Parsers raise ValueError on bad input.
_SCHEMA = {
    "model": {
        "name": (str, "model name: brownian | neural5"),
        "dt": (float, "integration step"),
        "horizon": (float, "time horizon T (multiple of dt)"),
        "sigma_dyn2": (float, "dynamic noise variance"),
        "dim": (int, "state dimension (brownian only)"),
        "prior": (str, "initial law: gaussian | delta"),
        "prior_mean": (_floats, "prior mean (scalar or comma list)"),
        "prior_var": (_floats, "prior variance (gaussian prior)"),
        "x0": (_floats, "fixed initial state (delta prior)"),
        "params_file": (str, "JSON parameter file (neural5)"),
        "param_seed": (int, "seed for drawing parameters (neural5)"),
    },
    "observations": {
        "file": (str, "CSV observation series"),
        "count": (int, "number of generated observations"),
        "every_steps": (int, "grid steps between generated observations"),
        "gen_seed": (int, "seed stream for the generated truth/observations"),
        "at_steps": (_ints, "explicit observation grid indices"),
        "values": (_floats, "explicit observation values (rows ; cols ,)"),
        "obs_var": (_floats, "observation noise variance per observed dim"),
        "observed_dims": (_ints, "observed state coordinates, 0-based"),
    },
    "method": {
        "name": (str, "apis | fs | ffbsi | kalman"),
        "particles": (int, "forward particle count"),
        "backward_particles": (int, "backward trajectories (ffbsi)"),
        "eta": (float, "learning rate in (0,1) (apis)"),
        "max_iters": (int, "iteration budget (apis)"),
        "ess_stop": (float, "raw-ESS stopping threshold (apis)"),
        "anneal_threshold": (float, "gamma = N0/N, 0 disables (apis)"),
        "anneal_factor": (float, "temperature factor beta > 1 (apis)"),
        "ridge": (float, "ridge added to the correlation matrix (apis)"),
        "var_floor": (float, "variance floor for standardization/proposal (apis)"),
        "dq_window": (int, "trailing steps averaged in the noise moments (apis)"),
        "anneal_cap": (int, "maximum annealing steps before error (apis)"),
    },
    "run": {
        "seed": (int, "base seed; repeat r uses seed + r"),
        "repeats": (int, "number of independent repeats"),
        "out_dir": (str, "output directory"),
    },
}

_REQUIRED = {"model": ("name", "dt", "horizon"), "method": ("name",), "run": ("seed",)}

_METHOD_KEYS = {
    "apis": {"particles", "eta", "max_iters", "ess_stop", "anneal_threshold",
             "anneal_factor", "ridge", "var_floor", "dq_window", "anneal_cap"},
    "fs": {"particles"},
    "ffbsi": {"particles", "backward_particles"},
    "kalman": set(),
}


@dataclass
class ExperimentConfig:
    """Validated configuration: plain per-section dictionaries."""

    model: dict = field(default_factory=dict)
    observations: dict = field(default_factory=dict)
    method: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": dict(self.model),
            "observations": dict(self.observations),
            "method": dict(self.method),
            "run": dict(self.run),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        cfg = cls(
            model=dict(raw.get("model", {})),
            observations=dict(raw.get("observations", {})),
            method=dict(raw.get("method", {})),
            run=dict(raw.get("run", {})),
        )
        _validate(cfg, source_text=None)
        return cfg


def _line_of(source_text: str | None, key: str) -> str:
    """Best-effort line hint for schema errors."""
    if source_text is None:
        return ""
    for lineno, line in enumerate(source_text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith(key) and "=" in stripped:
            name = stripped.split("=", 1)[0].strip()
            if name == key:
                return f" (line {lineno})"
    return ""


def parse_config_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc

    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        bucket = getattr(cfg, "observations" if section == "observations" else section)
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]{_line_of(text, key)}")
            caster, _ = _SCHEMA[section][key]
            try:
                bucket[key] = caster(raw)
            except ValueError as exc:
                raise ConfigError(
                    f"bad value for {section}.{key}: {raw!r}{_line_of(text, key)}"
                ) from exc
    _validate(cfg, source_text=text)
    return cfg


def parse_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def _fail(message: str) -> None:
    raise ConfigError(message)


def _validate(cfg: ExperimentConfig, source_text: str | None) -> None:
    for section, keys in _REQUIRED.items():
        bucket = getattr(cfg, section)
        for key in keys:
            if key not in bucket:
                _fail(f"missing required key '{key}' in [{section}]")

    model = cfg.model
    if model["name"] not in _MODELS:
        _fail(f"unknown model '{model['name']}' (expected one of {_MODELS})")
    if model["dt"] <= 0:
        _fail("model.dt must be positive")
    if model["horizon"] <= 0:
        _fail("model.horizon must be positive")
    steps = round(model["horizon"] / model["dt"])
    if abs(steps * model["dt"] - model["horizon"]) > 1e-9 * model["horizon"]:
        _fail("model.horizon must be an integer multiple of model.dt")
    prior = model.get("prior", "gaussian")
    if prior not in _PRIORS:
        _fail(f"model.prior must be one of {_PRIORS}")
    if model["name"] == "neural5" and "params_file" not in model and "param_seed" not in model:
        _fail("neural5 needs either model.params_file or model.param_seed")

    obs = cfg.observations
    sources = [k for k in ("file", "at_steps", "count") if k in obs]
    if len(sources) > 1:
        _fail(f"observation sources are mutually exclusive, got {sources}")
    if "at_steps" in obs and "values" not in obs:
        _fail("observations.at_steps needs observations.values")
    if "count" in obs and "every_steps" not in obs:
        _fail("generated observations need observations.every_steps")
    if sources and "obs_var" not in obs:
        _fail("observations.obs_var is required")
    if "obs_var" in obs and any(v <= 0 for v in obs["obs_var"]):
        _fail("observations.obs_var must be positive")

    method = cfg.method
    if method["name"] not in _METHODS:
        _fail(f"unknown method '{method['name']}' (expected one of {_METHODS})")
    allowed = _METHOD_KEYS[method["name"]]
    extra = set(method) - {"name"} - allowed
    if extra:
        _fail(f"keys {sorted(extra)} do not apply to method '{method['name']}'")
    if method["name"] == "kalman" and model["name"] != "brownian":
        _fail("the kalman oracle applies to the brownian model only")
    if "eta" in method and not 0.0 < method["eta"] < 1.0:
        _fail("method.eta must lie in (0, 1)")
    if "anneal_factor" in method and method["anneal_factor"] <= 1.0:
        _fail("method.anneal_factor must exceed 1")
    if "anneal_threshold" in method and not 0.0 <= method["anneal_threshold"] < 1.0:
        _fail("method.anneal_threshold must lie in [0, 1)")
    if "ess_stop" in method and not 0.0 < method["ess_stop"] <= 1.0:
        _fail("method.ess_stop must lie in (0, 1]")

    run = cfg.run
    if run.get("repeats", 1) < 1:
        _fail("run.repeats must be at least 1")


def config_to_ini(cfg: ExperimentConfig) -> str:
    """Render a config back to its INI text form."""
    lines = []
    for section in ("model", "observations", "method", "run"):
        bucket = getattr(cfg, "observations" if section == "observations" else section)
        if not bucket:
            continue
        lines.append(f"[{section}]")
        for key, value in bucket.items():
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def load_observation_file(path, grid, obs_model):
    """Observation CSV: header 't,y0[,y1...]'; times must sit on the grid."""
    from .models import ObservationSeries

    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            if header[0] != "t":
                raise ConfigError(f"{path}: first column must be 't'")
            rows = [line.strip().split(",") for line in fh if line.strip()]
    except OSError as exc:
        raise ConfigError(f"cannot read observations {path}: {exc}") from exc
    times = np.array([float(r[0]) for r in rows])
    values = np.array([[float(v) for v in r[1:]] for r in rows])
    try:
        return ObservationSeries.from_times(grid, times, values, obs_model)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def write_observation_file(path, series) -> None:
    times = series.grid.times()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t," + ",".join(f"y{d}" for d in range(series.values.shape[1])) + "\n")
        for j, k in enumerate(series.indices):
            vals = ",".join(repr(float(v)) for v in series.values[j])
            fh.write(f"{float(times[k])!r},{vals}\n")
