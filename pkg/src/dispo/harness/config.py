"""Experiment configuration: a nested key/value tree loaded from YAML or JSON.

Schema (every key optional; defaults shown by :func:`default_config_dict`)::

    env:      {name, gamma, layout, epsilon}
    data:     {n_transitions, episode_cap, behavior}
    features: {kind, d, hidden_width, seed, bandwidth}
    model:    {backend, merge_tol, atom_cap, fixed_point_tol, readout, steps, batch_size,
               lr, warmup_steps, weight_decay, ema_decay, readout_hidden, diffusion}
    planner:  {mode, n_particles, guidance_beta, support_epsilon, k, replan_every, ridge_lambda}
    adapt:    {mode, subsample, prefill_steps, total_steps}
    eval:     {n_rollouts, horizon}
    tasks:    list of task names (null = every task of the environment)
    seeds:    list of integers
    out:      output directory
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from dispo.errors import ConfigurationError
from dispo.features import FEATURE_KINDS
from dispo.mdp import BehaviorPolicySpec
from dispo.outcome.diffusion import DiffusionConfig
from dispo.planner import PlannerConfig

from dispo.harness.envs import ENV_NAMES

BACKENDS = ("particle", "diffusion")
READOUTS = ("auto", "tabular", "classifier")


@dataclass(frozen=True)
class EnvSpec:
    name: str = "maze"
    gamma: float = 0.9
    layout: str | None = None
    epsilon: float = 0.1

    def __post_init__(self):
        if self.name not in ENV_NAMES:
            raise ConfigurationError(f"unknown environment {self.name!r}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError("gamma must lie strictly inside (0, 1)")


@dataclass(frozen=True)
class DataSpec:
    n_transitions: int = 5000
    episode_cap: int = 50
    behavior: dict | None = None

    def __post_init__(self):
        if self.n_transitions < 1 or self.episode_cap < 1:
            raise ConfigurationError("n_transitions and episode_cap must be positive")
        if self.behavior is not None:
            BehaviorPolicySpec.from_dict(self.behavior)


@dataclass(frozen=True)
class FeatureSpec:
    kind: str | None = None
    d: int = 16
    hidden_width: int = 64
    seed: int = 0
    bandwidth: float = 10.0

    def __post_init__(self):
        if self.kind is not None and self.kind not in FEATURE_KINDS:
            raise ConfigurationError(f"unknown feature kind {self.kind!r}")


@dataclass(frozen=True)
class ModelSpec:
    backend: str = "particle"
    merge_tol: float | None = None
    atom_cap: int = 256
    fixed_point_tol: float = 1e-6
    readout: str = "auto"
    steps: int = 20_000
    batch_size: int = 256
    lr: float = 3e-4
    warmup_steps: int = 500
    weight_decay: float = 0.01
    ema_decay: float = 0.995
    readout_hidden: tuple[int, ...] = (128, 128)
    diffusion: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"unknown backend {self.backend!r}")
        if self.readout not in READOUTS:
            raise ConfigurationError(f"unknown readout {self.readout!r}")
        if self.steps < 0 or self.batch_size < 1 or self.atom_cap < 1:
            raise ConfigurationError("steps, batch_size and atom_cap must be positive")
        if self.warmup_steps > max(self.steps, 1) and self.steps:
            raise ConfigurationError("warmup_steps must not exceed steps")
        object.__setattr__(self, "readout_hidden", tuple(self.readout_hidden))
        self.diffusion_config()

    def diffusion_config(self) -> DiffusionConfig:
        try:
            return DiffusionConfig.from_dict({"ema_decay": self.ema_decay, **self.diffusion})
        except TypeError as exc:
            raise ConfigurationError(f"bad diffusion settings: {exc}") from exc

    @property
    def readout_kind(self) -> str:
        if self.readout != "auto":
            return self.readout
        return "tabular" if self.backend == "particle" else "classifier"


@dataclass(frozen=True)
class AdaptSpec:
    mode: str = "offline"
    subsample: int | None = 10_000
    prefill_steps: int = 50
    total_steps: int = 200

    def __post_init__(self):
        if self.mode not in ("offline", "online"):
            raise ConfigurationError("adapt.mode must be 'offline' or 'online'")


@dataclass(frozen=True)
class EvalSpec:
    n_rollouts: int = 20
    horizon: int | None = None

    def __post_init__(self):
        if self.n_rollouts < 1:
            raise ConfigurationError("n_rollouts must be positive")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigurationError("horizon must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    data: DataSpec = field(default_factory=DataSpec)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    adapt: AdaptSpec = field(default_factory=AdaptSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    tasks: tuple[str, ...] | None = None
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    out: str = "results"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("seeds must be nonempty")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.tasks is not None:
            object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.planner.mode == "guided-diffusion" and self.model.backend != "diffusion":
            raise ConfigurationError("the guided planner requires the diffusion backend")
        if self.planner.mode == "exact-particle" and self.model.backend != "particle":
            raise ConfigurationError("the exact planner requires the particle backend")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = None if self.tasks is None else list(self.tasks)
        d["seeds"] = list(self.seeds)
        d["model"]["readout_hidden"] = list(self.model.readout_hidden)
        return d

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"planner.mode": "knn"})``."""
        d = self.to_dict()
        for key, value in overrides.items():
            set_dotted(d, key, value)
        return config_from_dict(d)


SECTIONS = {"env": EnvSpec, "data": DataSpec, "features": FeatureSpec, "model": ModelSpec,
            "planner": PlannerConfig, "adapt": AdaptSpec, "eval": EvalSpec}


def default_config_dict() -> dict:
    return ExperimentConfig().to_dict()


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"cannot set {key!r}: {p!r} is not a section")
    node[parts[-1]] = value


def config_from_dict(d: dict) -> ExperimentConfig:
    d = copy.deepcopy(d or {})
    unknown = set(d) - set(SECTIONS) - {"tasks", "seeds", "out"}
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for name, cls in SECTIONS.items():
        section = d.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigurationError(f"config section {name!r} must be a mapping")
        try:
            kwargs[name] = cls(**section)
        except TypeError as exc:
            raise ConfigurationError(f"bad keys in section {name!r}: {exc}") from exc
    for key in ("tasks", "seeds", "out"):
        if d.get(key) is not None:
            kwargs[key] = d[key]
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML or JSON config file (JSON is a YAML subset) and apply dotted overrides."""
    d: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        try:
            d = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
        if d is None:
            d = {}
        if not isinstance(d, dict):
            raise ConfigurationError("config root must be a mapping")
        layout = (d.get("env") or {}).get("layout")
        if layout is not None and not Path(layout).is_absolute():
            d["env"]["layout"] = str((Path(path).parent / layout).resolve())
    for key, value in (overrides or {}).items():
        set_dotted(d, key, value)
    return config_from_dict(d)


# faster bootstrap settings for the diffusion backend; ignored by the particle backend
_DIFFUSION_FAST = {"lr": 2e-3, "steps": 8000, "ema_decay": 0.99, "diffusion": {"bank_refresh": 25}}

# Per-environment defaults used by the built-in presets.
PRESETS: dict[str, dict] = {
    "corridor": {"env": {"name": "corridor", "gamma": 0.9}, "data": {"n_transitions": 500, "episode_cap": 20},
                 "eval": {"horizon": 20}},
    "maze": {"env": {"name": "maze", "gamma": 0.9, "epsilon": 0.2}, "data": {"n_transitions": 4000, "episode_cap": 40},
             "model": _DIFFUSION_FAST, "planner": {"guidance_beta": 0.5}, "eval": {"horizon": 30}},
    "stitch": {"env": {"name": "stitch", "gamma": 0.9, "epsilon": 0.1},
               "data": {"n_transitions": 3000, "episode_cap": 30}, "eval": {"horizon": 30}},
    "preference": {"env": {"name": "preference", "gamma": 0.9, "epsilon": 0.1},
                   "data": {"n_transitions": 3000, "episode_cap": 30}, "model": _DIFFUSION_FAST,
                   "planner": {"guidance_beta": 0.15}, "eval": {"horizon": 25}},
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"no preset for {name!r}")
    d = copy.deepcopy(PRESETS[name])
    for key, value in overrides.items():
        set_dotted(d, key, value)
    return config_from_dict(d)
