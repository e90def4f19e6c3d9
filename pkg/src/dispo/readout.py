"""Readout policies ``pi(a | s, psi)``: exact outcome-keyed counts and a softmax classifier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from dispo.errors import ContractError, UntrainedModelError
from dispo.features import FeatureMap
from dispo.mdp import TransitionDataset
from dispo.nn import (
    OptimizerState,
    adamw_step,
    backward,
    cross_entropy_loss,
    forward,
    init_dense_net,
    net_from_state,
    net_state,
    softmax,
)
from dispo.outcome.diffusion import encode_states
from dispo.outcome.particle import ParticleOutcomeModel, sample_particle


class ReadoutAction(NamedTuple):
    action: int
    fallback: bool = False


def _argmax_lowest(x: np.ndarray) -> int:
    return int(np.argmax(x))


@dataclass
class TabularReadout:
    """Per-state list of outcome keys, each with accumulated action counts.

    A new target joins the nearest key within ``match_tol`` (sup-norm) or opens
    a new key; keys at a state therefore stay more than ``match_tol`` apart.
    """

    n_states: int
    n_actions: int
    match_tol: float
    keys: list[np.ndarray] = field(default_factory=list)
    counts: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.keys:
            self.keys = [np.zeros((0, 0)) for _ in range(self.n_states)]
            self.counts = [np.zeros((0, self.n_actions)) for _ in range(self.n_states)]

    @property
    def trained(self) -> bool:
        return any(len(c) for c in self.counts)

    def add(self, s: int, psi: np.ndarray, actions: np.ndarray, weights: np.ndarray | None = None) -> None:
        psi = np.atleast_2d(np.asarray(psi, dtype=np.float64))
        actions = np.atleast_1d(np.asarray(actions, dtype=np.int64))
        weights = np.ones(len(psi)) if weights is None else np.atleast_1d(np.asarray(weights, dtype=np.float64))
        keys, counts = self.keys[s], self.counts[s]
        if keys.size == 0:
            keys = np.zeros((0, psi.shape[1]))
        new_keys, new_counts = [], []
        for p, a, w in zip(psi, actions, weights):
            idx = -1
            if len(keys):
                dist = np.max(np.abs(keys - p), axis=1)
                j = int(np.argmin(dist))
                if dist[j] <= self.match_tol:
                    idx = j
            if idx < 0 and new_keys:
                pending = np.asarray(new_keys)
                dist = np.max(np.abs(pending - p), axis=1)
                j = int(np.argmin(dist))
                if dist[j] <= self.match_tol:
                    new_counts[j][a] += w
                    continue
            if idx >= 0:
                counts[idx, a] += w
            else:
                new_keys.append(p.copy())
                row = np.zeros(self.n_actions)
                row[a] = w
                new_counts.append(row)
        if new_keys:
            keys = np.concatenate([keys, np.asarray(new_keys)], axis=0)
            counts = np.concatenate([counts, np.asarray(new_counts)], axis=0)
        self.keys[s], self.counts[s] = keys, counts

    def act(self, s: int, psi: np.ndarray, sample: bool = False, rng: np.random.Generator | None = None) -> ReadoutAction:
        """Argmax action of the nearest key (ties go to the lower key, then the lower action)."""
        keys, counts = self.keys[s], self.counts[s]
        if len(keys) == 0:
            return ReadoutAction(0, True)
        dist = np.max(np.abs(keys - np.asarray(psi)), axis=1)
        j = int(np.argmin(dist))
        fallback = bool(dist[j] > self.match_tol)
        row = counts[j]
        if sample:
            if rng is None:
                raise ContractError("sampling mode needs an rng")
            return ReadoutAction(int(rng.choice(self.n_actions, p=row / row.sum())), fallback)
        return ReadoutAction(_argmax_lowest(row), fallback)

    def action_distribution(self, s: int, key_index: int) -> np.ndarray:
        row = self.counts[s][key_index]
        return row / row.sum()

    def state_dict(self) -> tuple[dict, dict[str, np.ndarray]]:
        sizes = np.array([len(k) for k in self.keys], dtype=np.int64)
        d = max((k.shape[1] for k in self.keys if k.size), default=0)
        keys = [k if k.size else np.zeros((0, d)) for k in self.keys]
        meta = {"kind": "tabular", "n_states": self.n_states, "n_actions": self.n_actions,
                "match_tol": self.match_tol, "d": d}
        arrays = {"readout.sizes": sizes, "readout.keys": np.concatenate(keys, axis=0),
                  "readout.counts": np.concatenate(self.counts, axis=0)}
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "TabularReadout":
        cuts = np.cumsum(arrays["readout.sizes"])[:-1]
        keys = [k.copy() for k in np.split(arrays["readout.keys"], cuts)]
        counts = [c.copy() for c in np.split(arrays["readout.counts"], cuts)]
        return cls(meta["n_states"], meta["n_actions"], meta["match_tol"], keys, counts)


def fit_tabular_readout(dataset: TransitionDataset, model: ParticleOutcomeModel, phi: FeatureMap,
                        gamma: float, match_tol: float | None = None) -> TabularReadout:
    """Exhaustive counts: every dataset triple paired with every atom at its successor.

    The key ``phi(s) + gamma psi'`` gains ``count(s, a, s') * w(psi')`` for action ``a``.
    """
    tol = 2.0 * model.merge_tol if match_tol is None else match_tol
    readout = TabularReadout(dataset.n_states, dataset.n_actions, tol)
    rows, counts = dataset.unique_triples()
    for s in np.unique(rows[:, 0]) if len(rows) else []:
        mask = rows[:, 0] == s
        psis, acts, ws = [], [], []
        for (_, a, s2), c in zip(rows[mask], counts[mask]):
            atoms, w = model.atoms[s2], model.weights[s2]
            psis.append(phi.table[s] + gamma * atoms)
            acts.append(np.full(len(w), a))
            ws.append(c * w)
        psi, act, wt = np.concatenate(psis), np.concatenate(acts), np.concatenate(ws)
        order = np.argsort(-wt, kind="stable")
        readout.add(int(s), psi[order], act[order], wt[order])
    return readout


class ClassifierReadout:
    """Softmax classifier over actions from ``[state encoding, psi]``."""

    def __init__(self, state_inputs: np.ndarray, d: int, n_actions: int, hidden: tuple[int, ...] = (128, 128),
                 state_freqs: int = 3, seed: int = 0, dtype=np.float32):
        self.state_inputs = np.asarray(state_inputs, dtype=np.float64)
        self.state_freqs = state_freqs
        self.state_enc = encode_states(self.state_inputs, state_freqs).astype(dtype)
        self.d, self.n_actions, self.hidden = d, n_actions, tuple(hidden)
        rng = np.random.default_rng(seed)
        widths = [self.state_enc.shape[1] + d, *hidden, n_actions]
        self.net = init_dense_net(widths, ["relu"] * len(hidden) + ["identity"], rng, dtype=dtype)
        self.trained = False
        self.train_steps = 0

    def _inputs(self, s: np.ndarray, psi: np.ndarray) -> np.ndarray:
        psi = np.atleast_2d(np.asarray(psi, dtype=self.state_enc.dtype))
        return np.concatenate([self.state_enc[np.atleast_1d(s)], psi], axis=1)

    def logits(self, s, psi) -> np.ndarray:
        return forward(self.net, self._inputs(s, psi))

    def train_step(self, s: np.ndarray, psi: np.ndarray, actions: np.ndarray, opt: OptimizerState) -> float:
        x = self._inputs(s, psi)
        logits, cache = forward(self.net, x, return_cache=True)
        loss, g = cross_entropy_loss(logits, np.asarray(actions, dtype=np.int64))
        grads, _, _ = backward(self.net, cache, g)
        adamw_step(opt, self.net.params, grads)
        self.trained = True
        self.train_steps += 1
        return loss

    def act(self, s: int, psi: np.ndarray, sample: bool = False, rng: np.random.Generator | None = None) -> ReadoutAction:
        if not self.trained:
            raise UntrainedModelError("classifier readout has not been trained")
        z = self.logits(s, psi)[0].astype(np.float64)
        if sample:
            if rng is None:
                raise ContractError("sampling mode needs an rng")
            return ReadoutAction(int(rng.choice(self.n_actions, p=softmax(z))))
        return ReadoutAction(_argmax_lowest(z))

    def state_dict(self) -> tuple[dict, dict[str, np.ndarray]]:
        net_meta, arrays = net_state(self.net, "readout.net")
        meta = {"kind": "classifier", "d": self.d, "n_actions": self.n_actions, "hidden": list(self.hidden),
                "state_freqs": self.state_freqs, "trained": self.trained, "train_steps": self.train_steps,
                "net": net_meta, "dtype": self.state_enc.dtype.str}
        arrays["readout.state_inputs"] = self.state_inputs
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "ClassifierReadout":
        obj = cls(arrays["readout.state_inputs"], meta["d"], meta["n_actions"], tuple(meta["hidden"]),
                  meta["state_freqs"], dtype=np.dtype(meta["dtype"]).type)
        obj.net = net_from_state(meta["net"], arrays, "readout.net")
        obj.trained, obj.train_steps = meta["trained"], meta["train_steps"]
        return obj


def readout_train_step(readout, s: np.ndarray, a: np.ndarray, s_next: np.ndarray, outcome_model, phi: FeatureMap,
                       gamma: float, rng: np.random.Generator, opt: OptimizerState | None = None,
                       targets: np.ndarray | None = None) -> float | None:
    """Fit ``pi(a | s, phi(s) + gamma psi')`` on a minibatch, drawing ``psi'`` from the outcome model.

    Tabular readouts add one count per transition; classifiers take one
    cross-entropy step and return the loss.
    """
    s = np.asarray(s, dtype=np.int64)
    a = np.asarray(a, dtype=np.int64)
    if targets is None:
        s_next = np.asarray(s_next, dtype=np.int64)
        if isinstance(outcome_model, ParticleOutcomeModel):
            nxt = np.stack([sample_particle(outcome_model, int(t), 1, rng)[0] for t in s_next])
        else:
            from dispo.outcome.diffusion import bootstrap_targets

            return readout.train_step(s, bootstrap_targets(outcome_model, s, s_next, phi, gamma, rng), a, opt)
        targets = phi.table[s] + gamma * nxt
    if isinstance(readout, TabularReadout):
        for state in np.unique(s):
            mask = s == state
            readout.add(int(state), targets[mask], a[mask])
        return None
    if opt is None:
        raise ContractError("classifier readout needs an optimizer")
    return readout.train_step(s, targets, a, opt)


def act(readout, s: int, psi: np.ndarray, sample: bool = False, rng: np.random.Generator | None = None) -> ReadoutAction:
    return readout.act(s, psi, sample=sample, rng=rng)
