"""One-axis sweeps over planner, feature dimension, dataset coverage and discount."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from dispo.errors import ConfigurationError, DispoError
from dispo.harness.config import ExperimentConfig
from dispo.harness.envs import build_env
from dispo.harness.experiments import (
    STREAM_DATA,
    ResultsRecord,
    _failed,
    adapt_and_evaluate,
    build_features,
    collect,
    stream,
    train_models,
)
from dispo.mdp import TransitionDataset

log = logging.getLogger(__name__)

ABLATION_KINDS = ("planner", "feature_dim", "coverage", "discount")
SHOOTING_SIZES = (10, 100, 1000)
FEATURE_DIMS = (16, 8, 4)
COVERAGES = ("full", "random", "adversarial")
DISCOUNTS = (0.99, 0.95, 0.9)


@dataclass
class AblationResult:
    kind: str
    labels: list[str]
    records: dict[str, list[ResultsRecord]] = field(default_factory=dict)

    def table(self) -> list[dict]:
        """One row per variant: mean/std over seeds and the mean per-plan wall-clock."""
        rows = []
        for label in self.labels:
            recs = [r for r in self.records.get(label, []) if r.error is None]
            ret = np.array([r.mean_return for r in recs])
            norm = np.array([r.normalized_return for r in recs])
            per_plan = [r.planner_stats["plan_seconds"] / r.planner_stats["plans"]
                        for r in recs if r.planner_stats.get("plans")]
            rows.append({
                "variant": label,
                "n_seeds": len(recs),
                "failed": len(self.records.get(label, [])) - len(recs),
                "mean_return": float(ret.mean()) if len(ret) else float("nan"),
                "std_return": float(ret.std()) if len(ret) else float("nan"),
                "normalized_return": float(norm.mean()) if len(norm) else float("nan"),
                "success_rate": float(np.mean([r.success_rate for r in recs])) if recs else float("nan"),
                "plan_seconds_per_plan": float(np.mean(per_plan)) if per_plan else float("nan"),
                "plan_seconds_total": float(sum(r.planner_stats.get("plan_seconds", 0.0) for r in recs)),
            })
        return rows

    def all_records(self) -> list[ResultsRecord]:
        out = [r for label in self.labels for r in self.records.get(label, [])]
        return sorted(out, key=lambda r: (r.key, r.extra.get("variant", "")))


def remove_half(dataset: TransitionDataset, how: str, rewards: np.ndarray, rng: np.random.Generator) -> TransitionDataset:
    """Drop whole episodes until at most half the transitions remain.

    ``random`` drops episodes in random order; ``adversarial`` drops the
    highest-return episodes under ``rewards`` first.
    """
    episodes = dataset.episodes()
    if how == "full":
        return dataset
    if how == "random":
        order = rng.permutation(len(episodes))
    elif how == "adversarial":
        g = dataset.gamma
        ret = [float(np.sum(rewards[dataset.s_next[idx]] * g ** np.arange(len(idx)))) for idx in episodes]
        order = np.argsort(-np.asarray(ret), kind="stable")
    else:
        raise ConfigurationError(f"unknown coverage variant {how!r}")
    budget = len(dataset) - len(dataset) // 2
    removed, drop = 0, []
    for i in order:
        if removed >= budget:
            break
        drop.append(i)
        removed += len(episodes[i])
    dropped = set(drop)
    kept = [episodes[i] for i in range(len(episodes)) if i not in dropped]
    keep = np.sort(np.concatenate(kept)) if kept else np.zeros(0, dtype=np.int64)
    return dataset.take(keep.astype(np.int64))


def _label(kind: str, value) -> str:
    if kind == "planner":
        return f"shooting@{value}" if isinstance(value, int) else "guided"
    if kind == "feature_dim":
        return f"d={value}"
    if kind == "discount":
        return f"gamma={value}"
    return str(value)


def _planner_variant(config: ExperimentConfig, value) -> ExperimentConfig:
    if isinstance(value, int):
        return config.replace(**{"planner.mode": "random-shooting", "planner.n_particles": value})
    return config.replace(**{"planner.mode": "guided-diffusion"})


def run_ablation(kind: str, base_config: ExperimentConfig, values=None) -> AblationResult:
    """Sweep one axis of ``base_config`` with everything else held fixed.

    The planner sweep trains one diffusion model per seed and shares it across
    all planners, so only the planning step differs between variants.
    """
    if kind not in ABLATION_KINDS:
        raise ConfigurationError(f"unknown ablation {kind!r}; expected one of {ABLATION_KINDS}")
    defaults = {"planner": (*SHOOTING_SIZES, "guided"), "feature_dim": FEATURE_DIMS,
                "coverage": COVERAGES, "discount": DISCOUNTS}
    values = tuple(defaults[kind] if values is None else values)
    if kind == "planner":
        if base_config.model.backend != "diffusion":
            base_config = base_config.replace(**{"model.backend": "diffusion", "planner.mode": "random-shooting"})
        values = tuple(v if v == "guided" else int(v) for v in values)
    result = AblationResult(kind, [_label(kind, v) for v in values])
    for label in result.labels:
        result.records[label] = []
    env0 = build_env(base_config.env.name, base_config.env.gamma, base_config.env.layout, base_config.env.epsilon)
    tasks = base_config.tasks or tuple(env0.tasks)

    for seed in base_config.seeds:
        shared = None
        for value, label in zip(values, result.labels):
            cfg = base_config
            if kind == "planner":
                cfg = _planner_variant(base_config, value)
            elif kind == "feature_dim":
                cfg = base_config.replace(**{"features.kind": "random-fourier", "features.d": int(value)})
            elif kind == "discount":
                cfg = base_config.replace(**{"env.gamma": float(value)})
            env = env0 if kind != "discount" else build_env(cfg.env.name, cfg.env.gamma, cfg.env.layout,
                                                              cfg.env.epsilon)
            try:
                if kind == "planner" and shared is not None:
                    dataset, models, timings = shared
                else:
                    dataset = collect(cfg, env, seed)
                    if kind == "coverage":
                        rewards = env.tasks[tasks[0]].values
                        dataset = remove_half(dataset, str(value), rewards, stream(seed, STREAM_DATA, 1))
                    phi = build_features(cfg, env, seed)
                    models, timings = train_models(cfg, env, dataset, phi, seed)
                    if kind == "planner":
                        shared = (dataset, models, timings)
            except (DispoError, ValueError, FloatingPointError) as exc:
                log.error("ablation %s seed %d variant %s failed: %s", kind, seed, label, exc)
                for t in tasks:
                    rec = _failed(cfg, t, seed, exc)
                    rec.extra["variant"] = label
                    result.records[label].append(rec)
                continue
            for task in tasks:
                try:
                    rec = adapt_and_evaluate(cfg, env, models, dataset, task, seed, timings)
                except (DispoError, ValueError, FloatingPointError) as exc:
                    log.error("ablation %s seed %d variant %s task %s failed: %s", kind, seed, label, task, exc)
                    rec = _failed(cfg, task, seed, exc)
                rec.extra["variant"] = label
                result.records[label].append(rec)
            log.info("ablation %s seed %d %s done", kind, seed, label)
    return result
