"""Save and restore a pretrained bundle: config, features, outcome model, readout, data and rng states."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dispo import checkpoint
from dispo.errors import CheckpointError
from dispo.features import FeatureMap
from dispo.harness.config import ExperimentConfig, config_from_dict
from dispo.mdp import BehaviorPolicySpec, TransitionDataset
from dispo.outcome import DiffusionOutcomeModel, ParticleOutcomeModel
from dispo.planner import DispoModels
from dispo.readout import ClassifierReadout, TabularReadout

BUNDLE_FORMAT = "dispo-bundle"


@dataclass
class Bundle:
    config: ExperimentConfig
    seed: int
    models: DispoModels
    rng_states: dict[str, dict] = field(default_factory=dict)


def _prefixed(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in arrays.items()}


def _strip(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def bundle_state(bundle: Bundle) -> tuple[dict, dict[str, np.ndarray]]:
    m = bundle.models
    phi_meta, phi_arrays = m.phi.state_dict()
    meta: dict = {"format": BUNDLE_FORMAT, "config": bundle.config.to_dict(), "seed": bundle.seed,
                  "phi": phi_meta, "rng_states": bundle.rng_states,
                  "terminal_states": sorted(int(t) for t in m.terminal_states)}
    arrays = _prefixed("phi.", phi_arrays)
    for name, obj in (("outcome", m.outcome), ("readout", m.readout)):
        if obj is None:
            meta[name] = None
            continue
        sub_meta, sub_arrays = obj.state_dict()
        meta[name] = sub_meta
        arrays.update(sub_arrays)
    if m.dataset is not None:
        ds = m.dataset
        meta["dataset"] = {"n_states": ds.n_states, "n_actions": ds.n_actions, "gamma": ds.gamma,
                           "source_seed": ds.source_seed,
                           "behavior": None if ds.behavior is None else ds.behavior.to_dict()}
        arrays.update({"data.s": ds.s, "data.a": ds.a, "data.s_next": ds.s_next, "data.episode": ds.episode})
        if ds.rewards is not None:
            arrays["data.rewards"] = ds.rewards
    else:
        meta["dataset"] = None
    if m.coords is not None:
        arrays["coords"] = np.asarray(m.coords)
    return meta, arrays


def save_checkpoint(path: str | Path, bundle: Bundle) -> None:
    meta, arrays = bundle_state(bundle)
    data = checkpoint.dumps(meta, arrays)
    # write then rename so a crash never leaves a partial checkpoint behind
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Bundle:
    meta, arrays = checkpoint.load(path)
    if meta.get("format") != BUNDLE_FORMAT:
        raise CheckpointError(f"{path} is not a model bundle")
    try:
        phi = FeatureMap.from_state(meta["phi"], _strip("phi.", arrays))
        outcome = readout = dataset = None
        om = meta["outcome"]
        if om is not None:
            outcome = (ParticleOutcomeModel.from_state(om, arrays, phi) if om["kind"] == "particle"
                       else DiffusionOutcomeModel.from_state(om, arrays))
        rm = meta["readout"]
        if rm is not None:
            readout = (TabularReadout.from_state(rm, arrays) if rm["kind"] == "tabular"
                       else ClassifierReadout.from_state(rm, arrays))
        dm = meta["dataset"]
        if dm is not None:
            dataset = TransitionDataset(
                s=arrays["data.s"], a=arrays["data.a"], s_next=arrays["data.s_next"], episode=arrays["data.episode"],
                rewards=arrays.get("data.rewards"), n_states=dm["n_states"], n_actions=dm["n_actions"],
                gamma=dm["gamma"], source_seed=dm["source_seed"],
                behavior=None if dm["behavior"] is None else BehaviorPolicySpec.from_dict(dm["behavior"]))
        config = config_from_dict(meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: inconsistent bundle contents ({exc})") from exc
    models = DispoModels(phi=phi, outcome=outcome, readout=readout, dataset=dataset, coords=arrays.get("coords"),
                         terminal_states=frozenset(meta.get("terminal_states", ())))
    return Bundle(config, int(meta["seed"]), models, meta.get("rng_states", {}))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)
