"""Pretraining, adaptation and evaluation for one configuration over its seeds."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from dispo.errors import ConfigurationError, DispoError
from dispo.features import FeatureMap, make_coordinate, make_one_hot, make_random_fourier, make_reward_feature
from dispo.harness.config import ExperimentConfig
from dispo.harness.envs import EnvBundle, build_env, corridor_occupancy
from dispo.mdp import BehaviorPolicySpec, TransitionDataset, collect_dataset, rollout, value_iteration
from dispo.nn import LrSchedule, OptimizerState
from dispo.outcome import DiffusionOutcomeModel, particle_fixed_point, train_on_dataset
from dispo.planner import DispoModels, DispoPolicy, adapt_offline, adapt_online
from dispo.readout import ClassifierReadout, fit_tabular_readout

log = logging.getLogger(__name__)

# stream ids mixed into each seed so phases draw independent random numbers
STREAM_DATA, STREAM_FEATURES, STREAM_MODEL, STREAM_ADAPT, STREAM_EVAL = range(5)


def stream(seed: int, stream_id: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream_id, *extra]))


def stream_seed(seed: int, stream_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), stream_id]).generate_state(1)[0])


@dataclass
class ResultsRecord:
    """Outcome of one (environment, task, seed) evaluation.

    ``normalized_return`` divides by the return of the value-iteration policy over
    the same horizon.
    """

    env: str
    task: str
    seed: int
    backend: str
    planner: str
    returns: list[float]
    mean_return: float
    normalized_return: float
    success_rate: float
    occupancy: float | None = None
    wall_clock: dict[str, float] = field(default_factory=dict)
    planner_stats: dict[str, float] = field(default_factory=dict)
    verdicts: dict[str, object] = field(default_factory=dict)
    extra: dict[str, object] = field(default_factory=dict)
    error: str | None = None

    @property
    def key(self) -> tuple:
        return (self.env, self.task, self.seed, self.backend, self.planner)

    def to_dict(self) -> dict:
        return asdict(self)

    def deterministic_view(self) -> dict:
        """Everything except timings, which legitimately vary between runs."""
        d = self.to_dict()
        d.pop("wall_clock")
        d["planner_stats"] = {k: v for k, v in d["planner_stats"].items() if not k.endswith("seconds")}
        return d


def build_features(config: ExperimentConfig, env: EnvBundle, seed: int) -> FeatureMap:
    spec, mdp = config.features, env.mdp
    kind = spec.kind or env.feature_kind
    gamma = mdp.gamma
    if kind == "one-hot":
        return make_one_hot(mdp.n_states, gamma)
    if kind == "coordinate":
        return make_coordinate(mdp.embedding, gamma)
    if kind == "random-fourier":
        inputs = mdp.embedding
        return make_random_fourier(spec.d, spec.hidden_width, spec.seed + stream_seed(seed, STREAM_FEATURES) % 10_000,
                                   inputs.shape[1], inputs, gamma, spec.bandwidth)
    if kind == "reward-as-feature":
        tasks = config.tasks or tuple(env.tasks)
        return make_reward_feature(env.tasks[tasks[0]], gamma)
    raise ConfigurationError(f"unknown feature kind {kind!r}")


def collect(config: ExperimentConfig, env: EnvBundle, seed: int) -> TransitionDataset:
    behavior = env.behavior if config.data.behavior is None else BehaviorPolicySpec.from_dict(config.data.behavior)
    return collect_dataset(env.mdp, behavior, config.data.n_transitions, config.data.episode_cap,
                           stream_seed(seed, STREAM_DATA))


def make_optimizer(config: ExperimentConfig, steps: int) -> OptimizerState:
    m = config.model
    warm = min(m.warmup_steps, steps)
    return OptimizerState(lr=m.lr, weight_decay=m.weight_decay, schedule=LrSchedule(m.lr, warm, max(steps, 1)))


def train_models(config: ExperimentConfig, env: EnvBundle, dataset: TransitionDataset, phi: FeatureMap,
                 seed: int) -> tuple[DispoModels, dict[str, float]]:
    """Fit the outcome model and readout on unlabeled data; returns the bundle and phase timings."""
    m = config.model
    models = DispoModels(phi=phi, dataset=dataset, coords=env.mdp.embedding, terminal_states=env.mdp.terminal_states)
    timings: dict[str, float] = {}
    if config.planner.mode == "knn-baseline":
        return models, timings
    t0 = time.perf_counter()
    gamma = env.mdp.gamma
    if m.backend == "particle":
        models.outcome = particle_fixed_point(dataset, phi, gamma, m.merge_tol, m.fixed_point_tol, atom_cap=m.atom_cap)
        if m.readout_kind == "tabular":
            models.readout = fit_tabular_readout(dataset, models.outcome, phi, gamma)
        else:
            models.readout = _train_classifier_on_particles(config, env, dataset, phi, models.outcome, seed)
    else:
        rng = stream(seed, STREAM_MODEL)
        model_seed = stream_seed(seed, STREAM_MODEL) % 2**31
        outcome = DiffusionOutcomeModel(phi.dim, gamma, env.mdp.embedding, m.diffusion_config(), seed=model_seed)
        if m.readout_kind != "classifier":
            raise ConfigurationError("the diffusion backend trains a classifier readout")
        readout = ClassifierReadout(env.mdp.embedding, phi.dim, env.mdp.n_actions, m.readout_hidden,
                                    outcome.config.state_freqs, seed=model_seed + 1)
        train_on_dataset(outcome, dataset, phi, rng, m.steps, m.batch_size, make_optimizer(config, m.steps),
                         readout=readout, readout_opt=make_optimizer(config, m.steps))
        models.outcome, models.readout = outcome, readout
    timings["pretrain_seconds"] = time.perf_counter() - t0
    return models, timings


def _train_classifier_on_particles(config, env, dataset, phi, outcome, seed):
    from dispo.readout import readout_train_step

    m = config.model
    rng = stream(seed, STREAM_MODEL)
    readout = ClassifierReadout(env.mdp.embedding, phi.dim, env.mdp.n_actions, m.readout_hidden, seed=seed)
    opt = make_optimizer(config, m.steps)
    for _ in range(m.steps):
        idx = rng.integers(len(dataset), size=m.batch_size)
        readout_train_step(readout, dataset.s[idx], dataset.a[idx], dataset.s_next[idx], outcome, phi,
                           env.mdp.gamma, rng, opt)
    return readout


def default_horizon(config: ExperimentConfig, env: EnvBundle) -> int:
    if config.eval.horizon is not None:
        return config.eval.horizon
    return 2 * env.mdp.n_states


def evaluate_policy(config: ExperimentConfig, env: EnvBundle, task: str, policy, seed: int) -> dict:
    """Roll out ``policy`` ``n_rollouts`` times; returns returns, success and occupancy."""
    mdp, reward = env.mdp, env.tasks[task]
    horizon = default_horizon(config, env)
    rng = stream(seed, STREAM_EVAL)
    v_opt, pi_opt = value_iteration(mdp, reward)
    returns, success, occ = [], [], []
    best = []
    other = [t for t in env.corridors if t != task]
    for _ in range(config.eval.n_rollouts):
        start = mdp.sample_initial(rng)
        if hasattr(policy, "reset"):
            policy.reset()
        traj, ret = rollout(mdp, policy, reward, horizon, start=start)
        _, ref = rollout(mdp, lambda s: int(pi_opt[s]), reward, horizon, start=start)
        returns.append(ret)
        best.append(ref)
        success.append(any(mdp.is_terminal(s) for s in traj.states))
        if task in env.corridors and other:
            occ.append(corridor_occupancy(traj.states, env.corridors[task], env.corridors[other[0]]))
    ref = float(np.mean(best))
    return {
        "returns": [float(r) for r in returns],
        "mean_return": float(np.mean(returns)),
        "normalized_return": float(np.mean(returns) / ref) if ref > 0 else 0.0,
        "success_rate": float(np.mean(success)),
        "occupancy": float(np.mean(occ)) if occ else None,
    }


def adapt_and_evaluate(config: ExperimentConfig, env: EnvBundle, models: DispoModels, dataset: TransitionDataset,
                       task: str, seed: int, timings: dict | None = None) -> ResultsRecord:
    reward = env.tasks[task]
    timings = dict(timings or {})
    rng = stream(seed, STREAM_ADAPT)
    extra: dict[str, object] = {}
    t0 = time.perf_counter()
    if config.adapt.mode == "offline":
        policy = adapt_offline(models, dataset.relabel(reward), models.phi, config.planner, rng, config.adapt.subsample)
    else:
        trace = adapt_online(models, env.mdp, reward, models.phi, config.planner, config.adapt.prefill_steps,
                             config.adapt.total_steps, rng, episode_cap=default_horizon(config, env))
        from dispo.planner import RewardWeights

        policy = DispoPolicy(models, RewardWeights(trace.w_trace[-1], float("nan"), config.planner.ridge_lambda),
                             config.planner, rng)
        extra["online_episode_returns"] = trace.episode_returns
        extra["online_episode_success"] = trace.episode_success
        extra["w_trace"] = [w.tolist() for w in trace.w_trace]
    timings["adapt_seconds"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    metrics = evaluate_policy(config, env, task, policy, seed)
    timings["eval_seconds"] = time.perf_counter() - t0
    stats = dict(policy.stats)
    extra["w"] = policy.weights.w.tolist()
    extra["fit_residual"] = policy.weights.fit_residual
    return ResultsRecord(
        env=env.name, task=task, seed=seed, backend=config.model.backend, planner=config.planner.mode,
        wall_clock=timings, planner_stats=stats, extra=extra, **metrics,
    )


def _failed(config: ExperimentConfig, task: str, seed: int, exc: Exception) -> ResultsRecord:
    return ResultsRecord(env=config.env.name, task=task, seed=seed, backend=config.model.backend,
                         planner=config.planner.mode, returns=[], mean_return=float("nan"),
                         normalized_return=float("nan"), success_rate=float("nan"),
                         error=f"{type(exc).__name__}: {exc}")


def prepare(config: ExperimentConfig, seed: int, env: EnvBundle | None = None):
    """Environment, dataset, features and trained models for one seed."""
    env = env or build_env(config.env.name, config.env.gamma, config.env.layout, config.env.epsilon)
    t0 = time.perf_counter()
    dataset = collect(config, env, seed)
    phi = build_features(config, env, seed)
    timings = {"collect_seconds": time.perf_counter() - t0}
    models, train_t = train_models(config, env, dataset, phi, seed)
    timings.update(train_t)
    return env, dataset, models, timings


def run_experiment(config: ExperimentConfig, prepared: dict | None = None) -> list[ResultsRecord]:
    """Pretrain once per seed, adapt to every task, evaluate, and return records sorted by key.

    ``prepared`` may map seed -> output of :func:`prepare` to reuse trained models.
    A failure in one seed is recorded and the remaining seeds still run.
    """
    env = build_env(config.env.name, config.env.gamma, config.env.layout, config.env.epsilon)
    tasks = config.tasks or tuple(env.tasks)
    for t in tasks:
        if t not in env.tasks:
            raise ConfigurationError(f"environment {env.name!r} has no task {t!r}")
    records = []
    for seed in config.seeds:
        try:
            if prepared is not None and seed in prepared:
                env_s, dataset, models, timings = prepared[seed]
            else:
                env_s, dataset, models, timings = prepare(config, seed, env)
        except (DispoError, ValueError, FloatingPointError) as exc:
            log.error("seed %d failed during pretraining: %s", seed, exc)
            records.extend(_failed(config, t, seed, exc) for t in tasks)
            continue
        for task in tasks:
            try:
                records.append(adapt_and_evaluate(config, env_s, models, dataset, task, seed, timings))
            except (DispoError, ValueError, FloatingPointError) as exc:
                log.error("seed %d task %s failed: %s", seed, task, exc)
                records.append(_failed(config, task, seed, exc))
    return sorted(records, key=lambda r: r.key)
