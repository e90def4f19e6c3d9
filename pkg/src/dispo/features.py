"""State feature maps with every component scaled into ``[0, 1 - gamma]``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dispo.errors import ConfigurationError
from dispo.mdp import RewardTable

FEATURE_KINDS = ("one-hot", "random-fourier", "coordinate", "reward-as-feature")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Tabulated features ``table[s]`` for every state of one MDP.

    ``params`` carries what is needed to rebuild or extend the map (random
    weights for random Fourier features, the reward vector for reward features).
    """

    kind: str
    gamma: float
    table: np.ndarray
    seed: int = 0
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ConfigurationError(f"unknown feature kind {self.kind!r}")
        table = np.array(self.table, dtype=np.float64)
        if table.ndim != 2:
            raise ConfigurationError("feature table must be 2-D")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @property
    def n_states(self) -> int:
        return self.table.shape[0]

    @property
    def scale(self) -> float:
        """Upper end of the feature range."""
        return 1.0 - self.gamma

    def __call__(self, s) -> np.ndarray:
        return self.table[s]

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Features of continuous observations (only coordinate-driven kinds)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.kind == "random-fourier":
            return _fourier(x, self.params, self.gamma)
        if self.kind == "coordinate":
            return self.scale * np.clip(x, 0.0, 1.0)
        raise ConfigurationError(f"{self.kind} features are only defined on state ids")

    def in_range(self, atol: float = 1e-12) -> bool:
        return bool(np.all(self.table >= -atol) and np.all(self.table <= self.scale + atol))

    def state_dict(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"kind": self.kind, "gamma": self.gamma, "seed": self.seed}
        arrays = {"table": self.table, **{f"param.{k}": v for k, v in sorted(self.params.items())}}
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "FeatureMap":
        params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
        return cls(kind=meta["kind"], gamma=meta["gamma"], table=arrays["table"], seed=meta["seed"], params=params)


def _fourier(x: np.ndarray, params: dict[str, np.ndarray], gamma: float) -> np.ndarray:
    h = np.maximum(x @ params["w1"] + params["b1"], 0.0)
    z = h @ params["w2"] + params["b2"]
    raw = np.concatenate([np.sin(z), np.cos(z)], axis=1)
    return (1.0 - gamma) * 0.5 * (raw + 1.0)


def make_random_fourier(
    d: int,
    hidden_width: int,
    seed: int,
    input_dim: int,
    inputs: np.ndarray,
    gamma: float,
    bandwidth: float = 10.0,
) -> FeatureMap:
    """Fixed random two-layer network with concatenated sine/cosine outputs.

    ``inputs`` are the per-state observations (normalized grid coordinates).
    The first layer is drawn with standard deviation ``bandwidth`` so the
    features vary on the scale of a grid cell; sin/cos outputs in [-1, 1] are
    mapped affinely into ``[0, 1 - gamma]``.
    """
    if d < 2 or d % 2:
        raise ConfigurationError(f"random Fourier feature dimension must be even and >= 2, got {d}")
    if hidden_width < 1:
        raise ConfigurationError("hidden width must be at least 1")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[1] != input_dim:
        raise ConfigurationError(f"inputs have width {inputs.shape[1]}, expected {input_dim}")
    rng = np.random.default_rng(seed)
    params = {
        "w1": rng.normal(0.0, bandwidth, size=(input_dim, hidden_width)),
        "b1": rng.uniform(-bandwidth, bandwidth, size=hidden_width) * 0.5,
        "w2": rng.normal(0.0, np.sqrt(2.0 / hidden_width), size=(hidden_width, d // 2)),
        "b2": rng.uniform(-np.pi, np.pi, size=d // 2),
    }
    return FeatureMap("random-fourier", gamma, _fourier(inputs, params, gamma), seed=seed, params=params)


def make_one_hot(n_states: int, gamma: float) -> FeatureMap:
    if n_states < 1:
        raise ConfigurationError("n_states must be at least 1")
    return FeatureMap("one-hot", gamma, (1.0 - gamma) * np.eye(n_states))


def make_coordinate(inputs: np.ndarray, gamma: float) -> FeatureMap:
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.min() < 0.0 or inputs.max() > 1.0:
        raise ConfigurationError("coordinate features need inputs in [0, 1]")
    return FeatureMap("coordinate", gamma, (1.0 - gamma) * inputs)


def make_reward_feature(reward: RewardTable, gamma: float) -> FeatureMap:
    """One-dimensional ``phi(s) = (1 - gamma) r(s)``; weight ``1 / (1 - gamma)`` recovers r."""
    values = np.asarray(reward.values, dtype=np.float64)
    return FeatureMap(
        "reward-as-feature", gamma, (1.0 - gamma) * values[:, None], params={"reward": values.copy()}
    )


def check_linear_realizability(phi: FeatureMap, reward: RewardTable) -> float:
    """Root-mean-square residual of the best least-squares fit ``r ~ phi w`` over all states."""
    r = np.asarray(reward.values, dtype=np.float64)
    if len(r) != phi.n_states:
        raise ConfigurationError("reward table and feature map cover different state counts")
    w, *_ = np.linalg.lstsq(phi.table, r, rcond=None)
    return float(np.sqrt(np.mean((phi.table @ w - r) ** 2)))
