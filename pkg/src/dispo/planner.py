"""Zero-shot adaptation: reward regression, outcome selection and closed-loop policies."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from dispo.errors import ConfigurationError, ContractError, NoSupportError
from dispo.features import FeatureMap
from dispo.mdp import DeterministicMDP, RewardTable, TransitionDataset
from dispo.outcome import DiffusionOutcomeModel, ParticleOutcomeModel, sample_outcomes

log = logging.getLogger(__name__)

PLANNER_MODES = ("exact-particle", "random-shooting", "guided-diffusion", "knn-baseline")
# short names accepted on the command line
MODE_ALIASES = {"exact": "exact-particle", "shooting": "random-shooting", "guided": "guided-diffusion",
                "knn": "knn-baseline"}


@dataclass(frozen=True)
class RewardWeights:
    w: np.ndarray
    fit_residual: float
    ridge_lambda: float

    def value(self, psi: np.ndarray) -> np.ndarray:
        return np.asarray(psi) @ self.w

    def to_json(self) -> str:
        return json.dumps({"w": self.w.tolist(), "fit_residual": self.fit_residual,
                           "ridge_lambda": self.ridge_lambda})

    @classmethod
    def from_json(cls, text: str) -> "RewardWeights":
        d = json.loads(text)
        return cls(np.asarray(d["w"], dtype=np.float64), d["fit_residual"], d["ridge_lambda"])


def fit_reward_weights(labeled: TransitionDataset, phi: FeatureMap, ridge_lambda: float = 1e-6) -> RewardWeights:
    """Least squares ``r(s) ~ w . phi(s)`` over the labeled transitions, with a ridge penalty.

    The penalty is applied as ``lambda * ||w||^2`` on top of the mean squared
    error; the reported residual is the plain mean squared error.
    """
    if labeled.rewards is None:
        raise ContractError("dataset carries no reward labels")
    if len(labeled) == 0:
        raise ContractError("cannot fit reward weights on zero samples")
    if ridge_lambda < 0:
        raise ContractError("ridge_lambda must be non-negative")
    x = phi.table[labeled.s]
    y = labeled.rewards
    n, d = x.shape
    if ridge_lambda > 0:
        a = np.vstack([x, np.sqrt(n * ridge_lambda) * np.eye(d)])
        b = np.concatenate([y, np.zeros(d)])
    else:
        a, b = x, y
    w, *_ = np.linalg.lstsq(a, b, rcond=None)
    residual = float(np.mean((x @ w - y) ** 2))
    return RewardWeights(w, residual, ridge_lambda)


def _as_w(w) -> np.ndarray:
    return np.asarray(getattr(w, "w", w), dtype=np.float64)


def plan_exact(model: ParticleOutcomeModel, w, s: int, support_epsilon: float = 1e-12) -> np.ndarray:
    """Highest-value atom at ``s`` among those with weight at least ``support_epsilon``.

    Equal values are resolved towards the lexicographically smallest atom.
    """
    atoms, weights = model.atoms_at(s)
    ok = weights >= support_epsilon
    if not np.any(ok):
        raise NoSupportError(f"no atom at state {s} has weight >= {support_epsilon:g}")
    cand = atoms[ok]
    values = cand @ _as_w(w)
    best = values.max()
    top = cand[values >= best - 1e-12 * max(1.0, abs(best))]
    order = np.lexsort(top.T[::-1])
    return top[order[0]].copy()


def plan_shooting(model, readout, w, s: int, n_particles: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Best of ``n_particles`` sampled outcomes by ``w . psi``, decoded by the readout."""
    if n_particles < 1:
        raise ContractError("n_particles must be at least 1")
    samples = np.atleast_2d(sample_outcomes(model, s, n_particles, rng))
    psi = samples[int(np.argmax(samples @ _as_w(w)))]
    return psi, readout.act(s, psi).action


def plan_guided(model: DiffusionOutcomeModel, readout, w, s: int, beta: float,
                rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """One reward-guided DDIM chain; the readout decodes the final outcome."""
    if beta < 0:
        raise ContractError("beta must be non-negative")
    if not isinstance(model, DiffusionOutcomeModel):
        raise ContractError("guided planning needs a diffusion outcome model")
    psi = model.sample(np.array([s]), rng, guidance=(_as_w(w), beta))[0]
    return psi, readout.act(s, psi).action


@dataclass(frozen=True)
class EmpiricalOutcomes:
    """Monte Carlo ``(s, a, psi)`` triples from each dataset episode, plus state coordinates."""

    s: np.ndarray
    a: np.ndarray
    psi: np.ndarray
    coords: np.ndarray

    def __len__(self) -> int:
        return len(self.s)


def empirical_outcomes(dataset: TransitionDataset, phi: FeatureMap, coords: np.ndarray) -> EmpiricalOutcomes:
    """Backward discounted sums within each episode, with no bootstrapping across episodes.

    An episode ending in a self-transition is treated as absorbed there, so its
    final state contributes ``phi / (1 - gamma)``; otherwise the sum stops at the
    last recorded successor.
    """
    g = dataset.gamma
    out_s, out_a, out_psi = [], [], []
    for idx in dataset.episodes():
        s, a, s2 = dataset.s[idx], dataset.a[idx], dataset.s_next[idx]
        last = s2[-1]
        tail = phi.table[last] / (1.0 - g) if s[-1] == last else phi.table[last]
        psi = np.empty((len(idx), phi.dim))
        acc = tail
        for k in range(len(idx) - 1, -1, -1):
            acc = phi.table[s[k]] + g * acc
            psi[k] = acc
        out_s.append(s), out_a.append(a), out_psi.append(psi)
    if not out_s:
        raise ContractError("dataset is empty")
    return EmpiricalOutcomes(np.concatenate(out_s), np.concatenate(out_a), np.concatenate(out_psi),
                             np.asarray(coords, dtype=np.float64))


def knn_plan(emp: EmpiricalOutcomes, w, s: int, k: int) -> tuple[np.ndarray, int]:
    """Among the ``k`` stored triples nearest to ``s`` (coordinate metric), the top-valued one.

    Ties go to the nearer triple, then the lower action id.
    """
    if len(emp) == 0:
        raise ContractError("no empirical outcomes")
    if k < 1:
        raise ContractError("k must be at least 1")
    dist = np.linalg.norm(emp.coords[emp.s] - emp.coords[s], axis=1)
    near = np.argsort(dist, kind="stable")[:k]
    values = emp.psi[near] @ _as_w(w)
    order = np.lexsort((emp.a[near], dist[near], -values))
    j = near[order[0]]
    return emp.psi[j].copy(), int(emp.a[j])


@dataclass(frozen=True)
class PlannerConfig:
    mode: str = "exact-particle"
    n_particles: int = 100
    guidance_beta: float = 0.5
    support_epsilon: float = 1e-12
    k: int = 5
    replan_every: int = 1
    ridge_lambda: float = 1e-6
    max_relaxations: int = 4

    def __post_init__(self):
        mode = MODE_ALIASES.get(self.mode, self.mode)
        if mode not in PLANNER_MODES:
            raise ConfigurationError(f"unknown planner mode {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        for name in ("n_particles", "k", "replan_every"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.guidance_beta < 0 or self.support_epsilon < 0 or self.ridge_lambda < 0:
            raise ConfigurationError("guidance_beta, support_epsilon and ridge_lambda must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerConfig":
        return cls(**d)


@dataclass
class DispoModels:
    """Everything a planner may consult: features, outcome model, readout and raw data."""

    phi: FeatureMap
    outcome: object = None
    readout: object = None
    dataset: TransitionDataset | None = None
    coords: np.ndarray | None = None
    # absorbing states: every action is equivalent there, so no planning is done
    terminal_states: frozenset = frozenset()
    _empirical: EmpiricalOutcomes | None = field(default=None, repr=False)

    @property
    def empirical(self) -> EmpiricalOutcomes:
        if self._empirical is None:
            if self.dataset is None or self.coords is None:
                raise ContractError("knn planning needs the dataset and state coordinates")
            self._empirical = empirical_outcomes(self.dataset, self.phi, self.coords)
        return self._empirical


class DispoPolicy:
    """Closed-loop policy: picks a target outcome every ``replan_every`` steps and reads out actions.

    Between replans the target is carried forward as ``(psi - phi(s)) / gamma``.
    Call :meth:`reset` at the start of each episode.
    """

    def __init__(self, models: DispoModels, weights: RewardWeights, config: PlannerConfig,
                 rng: np.random.Generator | None = None):
        self.models, self.weights, self.config = models, weights, config
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.stats = {"plans": 0, "relaxations": 0, "fallbacks": 0, "atoms_visited": 0, "plan_seconds": 0.0}
        self.reset()
        if config.mode in ("exact-particle",) and not isinstance(models.outcome, ParticleOutcomeModel):
            raise ConfigurationError("exact planning needs the particle backend")
        if config.mode == "guided-diffusion" and not isinstance(models.outcome, DiffusionOutcomeModel):
            raise ConfigurationError("guided planning needs the diffusion backend")

    def reset(self) -> None:
        self._since = 0
        self._psi = None
        self._prev = None

    def _exact(self, s: int) -> np.ndarray:
        eps = self.config.support_epsilon
        for attempt in range(self.config.max_relaxations + 1):
            try:
                return plan_exact(self.models.outcome, self.weights, s, eps)
            except NoSupportError:
                if attempt == self.config.max_relaxations:
                    raise
                eps *= 0.5
                self.stats["relaxations"] += 1
                log.info("no support at state %d, relaxing epsilon to %.3g", s, eps)
        raise AssertionError("unreachable")

    def plan(self, s: int) -> tuple[np.ndarray, int]:
        import time

        t0 = time.perf_counter()
        cfg, m = self.config, self.models
        if cfg.mode == "exact-particle":
            psi = self._exact(s)
            self.stats["atoms_visited"] += len(m.outcome.atoms[s])
            res = m.readout.act(s, psi)
            self.stats["fallbacks"] += int(res.fallback)
            out = psi, res.action
        elif cfg.mode == "random-shooting":
            out = plan_shooting(m.outcome, m.readout, self.weights, s, cfg.n_particles, self.rng)
        elif cfg.mode == "guided-diffusion":
            out = plan_guided(m.outcome, m.readout, self.weights, s, cfg.guidance_beta, self.rng)
        else:
            out = knn_plan(m.empirical, self.weights, s, cfg.k)
        self.stats["plans"] += 1
        self.stats["plan_seconds"] += time.perf_counter() - t0
        return out

    def __call__(self, s: int) -> int:
        s = int(s)
        if s in self.models.terminal_states:
            self._psi, self._prev = None, s
            self._since = 0
            return 0
        if self._psi is None or self._since % self.config.replan_every == 0:
            self._psi, a = self.plan(s)
        else:
            psi = (self._psi - self.models.phi.table[self._prev]) / self.models.phi.gamma
            self._psi = np.clip(psi, 0.0, None)
            if self.config.mode == "knn-baseline":
                a = knn_plan(self.models.empirical, self.weights, s, self.config.k)[1]
            else:
                res = self.models.readout.act(s, self._psi)
                self.stats["fallbacks"] += int(res.fallback)
                a = res.action
        self._prev = s
        self._since += 1
        return int(a)


def adapt_offline(models: DispoModels, labeled: TransitionDataset, phi: FeatureMap, config: PlannerConfig,
                  rng: np.random.Generator | None = None, subsample: int | None = 10_000) -> DispoPolicy:
    """Fit reward weights once on (a subsample of) the labeled data and return a closed-loop policy."""
    if len(labeled) == 0:
        raise ContractError("labeled subsample is empty")
    rng = np.random.default_rng(0) if rng is None else rng
    if subsample is not None:
        labeled = labeled.subsample(subsample, rng)
    weights = fit_reward_weights(labeled, phi, config.ridge_lambda)
    return DispoPolicy(models, weights, config, rng)


@dataclass
class OnlineTrace:
    states: list[int]
    actions: list[int]
    episode_returns: list[float]
    episode_success: list[bool]
    w_trace: list[np.ndarray]


def adapt_online(models: DispoModels, mdp: DeterministicMDP, reward: RewardTable, phi: FeatureMap,
                 config: PlannerConfig, prefill_steps: int, total_steps: int, rng: np.random.Generator,
                 episode_cap: int = 50) -> OnlineTrace:
    """Explore randomly for ``prefill_steps``, then refit ``w`` every step and act with the planner.

    Rewards ``r(s)`` of visited states fill the buffer. Episodes reset on entering
    a terminal state or after ``episode_cap`` steps.
    """
    r = reward.check(mdp).values
    buf_s: list[int] = []
    states, actions, returns, success = [], [], [], []
    w_trace: list[np.ndarray] = []

    def labeled() -> TransitionDataset:
        arr = np.asarray(buf_s, dtype=np.int64)
        return TransitionDataset(s=arr, a=np.zeros_like(arr), s_next=arr, n_states=mdp.n_states,
                                 n_actions=mdp.n_actions, gamma=mdp.gamma, rewards=r[arr])

    s = mdp.sample_initial(rng)
    buf_s.append(s)
    ep_t, ep_ret = 0, r[s]
    policy = None
    for step in range(prefill_steps + total_steps):
        online = step >= prefill_steps
        if online:
            weights = fit_reward_weights(labeled(), phi, config.ridge_lambda)
            w_trace.append(weights.w)
            if policy is None:
                policy = DispoPolicy(models, weights, config, rng)
            else:
                policy.weights = weights
            a = policy(s)
        else:
            a = int(rng.integers(mdp.n_actions))
        s2 = mdp.step(s, a)
        states.append(s), actions.append(a)
        buf_s.append(s2)
        ep_t += 1
        ep_ret += mdp.gamma ** ep_t * r[s2]
        s = s2
        if mdp.is_terminal(s) or ep_t >= episode_cap:
            if online:
                returns.append(float(ep_ret))
                success.append(bool(mdp.is_terminal(s)))
            s = mdp.sample_initial(rng)
            buf_s.append(s)
            ep_t, ep_ret = 0, r[s]
            if policy is not None:
                policy.reset()
    if total_steps == 0 or not w_trace:
        w_trace.append(fit_reward_weights(labeled(), phi, config.ridge_lambda).w)
    return OnlineTrace(states, actions, returns, success, w_trace)


def greedy_policy(table: np.ndarray) -> Callable[[int], int]:
    table = np.asarray(table, dtype=np.int64)
    return lambda s: int(table[s])
