"""Experiment configuration: INI files with one section per concern.

Resolution order, later entries winning: built-in defaults, scenario
defaults, the config file, the ``DDOPT_SEED`` environment variable, the
``--profile`` flag, and finally ``--set key=value`` overrides.  Override
keys may be written ``section.key`` or just ``key`` when unambiguous.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError

SCENARIOS = ("polarized", "recommender", "rate_sweep")
PROFILES = ("fast", "paper")
PROFILE_POPULATION = {"fast": 500, "paper": 1000}
SEED_ENV = "DDOPT_SEED"


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "polarized"
    seed: int = 0
    n_trials: int = 20
    T: int = 2000
    algorithms: tuple[str, ...] = ("vanilla", "composite")
    output: str = "results"
    profile: str = "fast"
    # population
    population_size: int = 500
    dim: int = 20
    # model
    lam: float = 0.4
    sigma: float = 0.5
    lambda1: float = 0.2
    lambda2: float = 0.5
    epsilon: float = 0.5
    dim_decision: int = 3
    dim_exo: int = 2
    spectral_radius: float = 0.5
    # objective
    rho: float = 0.1
    weight: float = 1.0
    # constraint
    radius: float = 1.0
    budget: float = 250.0
    qbar: float = 5.0
    # algorithm
    eta: float = 5e-3
    n_mb: int = 50
    dfo_eta: float = 0.1
    dfo_delta: float = 2.0
    dfo_trials: int = 20
    sensitivity_mode: str = "online"
    # oracle
    oracle_restarts: int = 10
    oracle_max_iter: int = 20000
    oracle_tol: float = 1e-8
    # diagnostics
    w1_sample: int = 64
    ground_metric: str = "euclidean"
    # rate sweep
    horizons: tuple[int, ...] = (400, 1600, 6400)
    eta_scale: float = 1.0
    noise_free: bool = False
    overrides: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        validate(self)

    def as_sections(self) -> dict[str, dict[str, Any]]:
        """Resolved values grouped by config section (for ``describe`` and metadata)."""
        out: dict[str, dict[str, Any]] = {}
        for name, (section, key) in FIELD_KEYS.items():
            out.setdefault(section, {})[key] = getattr(self, name)
        return out


# dataclass field -> (section, key in the file)
FIELD_KEYS: dict[str, tuple[str, str]] = {
    "scenario": ("experiment", "scenario"),
    "seed": ("experiment", "seed"),
    "n_trials": ("experiment", "n_trials"),
    "T": ("experiment", "T"),
    "algorithms": ("experiment", "algorithms"),
    "output": ("experiment", "output"),
    "profile": ("experiment", "profile"),
    "population_size": ("population", "size"),
    "dim": ("population", "dim"),
    "lam": ("model", "lam"),
    "sigma": ("model", "sigma"),
    "lambda1": ("model", "lambda1"),
    "lambda2": ("model", "lambda2"),
    "epsilon": ("model", "epsilon"),
    "dim_decision": ("model", "dim_decision"),
    "dim_exo": ("model", "dim_exo"),
    "spectral_radius": ("model", "spectral_radius"),
    "rho": ("objective", "rho"),
    "weight": ("objective", "weight"),
    "radius": ("constraint", "radius"),
    "budget": ("constraint", "budget"),
    "qbar": ("constraint", "qbar"),
    "eta": ("algorithm", "eta"),
    "n_mb": ("algorithm", "n_mb"),
    "dfo_eta": ("algorithm", "dfo_eta"),
    "dfo_delta": ("algorithm", "dfo_delta"),
    "dfo_trials": ("algorithm", "dfo_trials"),
    "sensitivity_mode": ("algorithm", "sensitivity_mode"),
    "oracle_restarts": ("oracle", "restarts"),
    "oracle_max_iter": ("oracle", "max_iter"),
    "oracle_tol": ("oracle", "tol"),
    "w1_sample": ("diagnostics", "w1_sample"),
    "ground_metric": ("diagnostics", "ground_metric"),
    "horizons": ("sweep", "horizons"),
    "eta_scale": ("sweep", "eta_scale"),
    "noise_free": ("sweep", "noise_free"),
}

SCENARIO_DEFAULTS: dict[str, dict[str, Any]] = {
    "polarized": {},
    "recommender": {
        "T": 500, "dim": 100, "eta": 0.5, "n_mb": 1, "population_size": 1,
        "algorithms": ("vanilla", "dfo", "composite"), "n_trials": 1,
        "ground_metric": "index_abs",
    },
    "rate_sweep": {
        "dim": 5, "n_mb": 10, "population_size": 200, "n_trials": 10,
        "algorithms": ("composite",), "eta_scale": 0.5, "eta": 0.02,
    },
}

_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse(name: str, raw: str) -> Any:
    kind = _TYPES[name]
    text = raw.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "tuple[int, ...]":
            return tuple(int(x) for x in text.replace(",", " ").split())
        if kind == "tuple[str, ...]":
            return tuple(x for x in text.replace(",", " ").split())
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def _lookup_key(key: str) -> str:
    """Map ``section.key`` or a bare ``key`` to the dataclass field name."""
    if "." in key:
        section, sub = key.split(".", 1)
        for name, (sec, k) in FIELD_KEYS.items():
            if sec == section and k == sub:
                return name
        raise ConfigError(f"unknown config key {key!r}")
    hits = [name for name, (_, k) in FIELD_KEYS.items() if k == key]
    if not hits and key in FIELD_KEYS:
        hits = [key]
    if len(hits) != 1:
        raise ConfigError(f"unknown or ambiguous config key {key!r}")
    return hits[0]


def validate(cfg: ExperimentConfig) -> None:
    if cfg.scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {cfg.scenario!r}")
    if cfg.profile not in PROFILES:
        raise ConfigError(f"profile must be one of {PROFILES}, got {cfg.profile!r}")
    if not cfg.algorithms:
        raise ConfigError("algorithm list is empty")
    for alg in cfg.algorithms:
        if alg not in ("composite", "vanilla", "dfo"):
            raise ConfigError(f"unknown algorithm {alg!r}")
    positive = ("n_trials", "dim", "eta", "n_mb", "dfo_eta", "dfo_delta", "dfo_trials",
                "oracle_restarts", "oracle_max_iter", "oracle_tol", "epsilon", "sigma",
                "radius", "budget", "qbar", "w1_sample", "eta_scale", "dim_decision",
                "dim_exo", "population_size")
    for name in positive:
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)!r}")
    if cfg.T < 0:
        raise ConfigError("T must be nonnegative")
    if cfg.n_mb > cfg.population_size:
        raise ConfigError(f"n_mb={cfg.n_mb} exceeds population size {cfg.population_size}")
    if cfg.sensitivity_mode not in ("online", "exact"):
        raise ConfigError(f"sensitivity_mode must be online or exact, got {cfg.sensitivity_mode!r}")
    if cfg.ground_metric not in ("euclidean", "weighted_P", "index_abs"):
        raise ConfigError(f"unknown ground metric {cfg.ground_metric!r}")
    if any(h <= 0 for h in cfg.horizons):
        raise ConfigError("horizons must be positive")


def read_file(path: str | os.PathLike) -> dict[str, str]:
    """Raw ``field -> text`` pairs from an INI file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    raw = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            raw[_lookup_key(f"{section}.{key}")] = value
    return raw


def split_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, value = text.split("=", 1)
    return _lookup_key(key.strip()), value


def resolve(raw: Mapping[str, str] | None = None, profile: str | None = None,
            overrides: Iterable[str] = (), env: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Build a validated config from file values, profile, environment and overrides."""
    raw = dict(raw or {})
    env = os.environ if env is None else env
    pending = [split_override(o) for o in overrides]
    values: dict[str, Any] = {}
    scenario = raw.get("scenario", "polarized").strip()
    for name, text in pending:
        if name == "scenario":
            scenario = text.strip()
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    values.update(SCENARIO_DEFAULTS[scenario])
    for name, text in raw.items():
        values[name] = _parse(name, text)
    if SEED_ENV in env and env[SEED_ENV].strip():
        values["seed"] = _parse("seed", env[SEED_ENV])
    if profile is not None:
        values["profile"] = profile
    for name, text in pending:
        values[name] = _parse(name, text)
    if scenario == "polarized" and "population_size" not in values:
        values["population_size"] = PROFILE_POPULATION[values.get("profile", "fast")]
    values["scenario"] = scenario
    values["overrides"] = tuple(overrides)
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, profile: str | None = None, overrides: Iterable[str] = (),
                env: Mapping[str, str] | None = None) -> ExperimentConfig:
    raw = read_file(path) if path is not None else {}
    return resolve(raw, profile, overrides, env)


def to_ini(cfg: ExperimentConfig) -> str:
    """Resolved config rendered back to INI text, every default spelled out."""
    lines = []
    for section, items in cfg.as_sections().items():
        lines.append(f"[{section}]")
        for key, value in items.items():
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
