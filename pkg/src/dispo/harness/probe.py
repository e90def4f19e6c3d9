"""Compounding-error probe: autoregressive one-step rollouts against direct outcome prediction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dispo.errors import ContractError, UntrainedModelError
from dispo.features import FeatureMap
from dispo.mdp import DeterministicMDP, TransitionDataset
from dispo.nn import OptimizerState, adamw_step, backward, forward, init_dense_net, mse_loss
from dispo.outcome import ParticleOutcomeModel, particle_backup


@dataclass
class OneStepModel:
    """Next-state model fitted to the data.

    ``tabular``: row-normalized counts ``P[s, a, s']``; pairs never seen in the
    data stay in place. ``dense``: MLP from (coordinates, one-hot action) to the
    coordinate displacement, snapped to the nearest state.
    """

    kind: str
    n_states: int
    n_actions: int
    table: np.ndarray | None = None
    coords: np.ndarray | None = None
    net: object = None
    losses: list[float] = field(default_factory=list)

    @classmethod
    def fit_tabular(cls, dataset: TransitionDataset) -> "OneStepModel":
        n, k = dataset.n_states, dataset.n_actions
        counts = np.zeros((n, k, n))
        np.add.at(counts, (dataset.s, dataset.a, dataset.s_next), 1.0)
        tot = counts.sum(axis=2, keepdims=True)
        unseen = tot[..., 0] == 0
        s_idx, a_idx = np.nonzero(unseen)
        counts[s_idx, a_idx, s_idx] = 1.0
        table = counts / counts.sum(axis=2, keepdims=True)
        return cls("tabular", n, k, table=table)

    @classmethod
    def fit_dense(cls, dataset: TransitionDataset, coords: np.ndarray, steps: int = 2000, hidden=(64, 64),
                  lr: float = 3e-3, batch_size: int = 128, seed: int = 0) -> "OneStepModel":
        coords = np.asarray(coords, dtype=np.float64)
        rng = np.random.default_rng(seed)
        net = init_dense_net([coords.shape[1] + dataset.n_actions, *hidden, coords.shape[1]],
                             ["relu"] * len(hidden) + ["identity"], rng, dtype=np.float64)
        model = cls("dense", dataset.n_states, dataset.n_actions, coords=coords, net=net)
        opt = OptimizerState(lr=lr, weight_decay=0.0)
        target = coords[dataset.s_next] - coords[dataset.s]
        for _ in range(steps):
            idx = rng.integers(len(dataset), size=batch_size)
            x = model._inputs(coords[dataset.s[idx]], dataset.a[idx])
            pred, cache = forward(net, x, return_cache=True)
            loss, g = mse_loss(pred, target[idx])
            grads, _, _ = backward(net, cache, g)
            adamw_step(opt, net.params, grads)
            model.losses.append(loss)
        return model

    def _inputs(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        return np.concatenate([x, np.eye(self.n_actions)[np.asarray(a)]], axis=1)

    def rows_normalized(self) -> bool:
        return self.table is not None and bool(np.allclose(self.table.sum(axis=2), 1.0))

    def predict_features(self, s0: int, actions, phi: FeatureMap) -> np.ndarray:
        """Expected ``phi`` of each state visited open loop, shape ``(len(actions) + 1, d)``."""
        out = [phi.table[s0]]
        if self.kind == "tabular":
            p = np.zeros(self.n_states)
            p[s0] = 1.0
            for a in actions:
                p = p @ self.table[:, int(a), :]
                out.append(p @ phi.table)
            return np.asarray(out)
        if self.net is None:
            raise UntrainedModelError("one-step model has not been fitted")
        x = self.coords[s0][None, :]
        for a in actions:
            x = x + forward(self.net, self._inputs(x, [int(a)]))
            s = int(np.argmin(np.linalg.norm(self.coords - x, axis=1)))
            out.append(phi.table[s])
        return np.asarray(out)


@dataclass(frozen=True)
class ProbeResult:
    horizons: tuple[int, ...]
    one_step_error: tuple[float, ...]
    direct_error: tuple[float, ...]
    n_windows: tuple[int, ...]

    def rows(self) -> list[dict]:
        return [{"horizon": h, "one_step_error": a, "direct_error": b, "n_windows": n}
                for h, a, b, n in zip(self.horizons, self.one_step_error, self.direct_error, self.n_windows)]


def truncated_particle_models(dataset: TransitionDataset, phi: FeatureMap, gamma: float, horizons,
                              merge_tol: float | None = None) -> dict[int, ParticleOutcomeModel]:
    """Atoms of ``sum_{t=0..h} gamma^t phi(s_t)`` for each ``h``: ``h + 1`` backups from zero atoms."""
    model = ParticleOutcomeModel.initial(phi, gamma, merge_tol)
    model.atoms = [np.zeros((1, phi.dim)) for _ in range(phi.n_states)]
    model.trained = True
    out, done = {}, 0
    for h in sorted(horizons):
        while done < h + 1:
            model, _ = particle_backup(model, dataset, phi, gamma)
            done += 1
        out[h] = model.copy()
    return out


def compounding_error_probe(mdp: DeterministicMDP, dataset: TransitionDataset, phi: FeatureMap, horizons,
                            one_step: OneStepModel | None = None, max_windows: int = 500, seed: int = 0) -> ProbeResult:
    """Error of predicted ``h``-step feature sums along held-in data windows.

    For each window ``s_i .. s_{i+h}`` of a dataset episode the truth is the
    discounted feature sum along it. The one-step model predicts it open loop
    from the window's actions; the particle model is scored by the distance
    from the truth to the nearest atom at ``s_i``. Errors are Euclidean and
    averaged over windows.
    """
    horizons = tuple(int(h) for h in horizons)
    if not horizons or any(h < 1 for h in horizons) or list(horizons) != sorted(set(horizons)):
        raise ContractError("horizons must be positive and strictly ascending")
    gamma = mdp.gamma
    one_step = OneStepModel.fit_tabular(dataset) if one_step is None else one_step
    models = truncated_particle_models(dataset, phi, gamma, horizons)
    rng = np.random.default_rng(seed)
    episodes = dataset.episodes()
    a_err, b_err, counts = [], [], []
    for h in horizons:
        windows = [(idx, i) for idx in episodes for i in range(len(idx) - h + 1)]
        if len(windows) > max_windows:
            pick = rng.choice(len(windows), size=max_windows, replace=False)
            windows = [windows[j] for j in np.sort(pick)]
        disc = gamma ** np.arange(h + 1)
        ea, eb = [], []
        for idx, i in windows:
            seg = idx[i:i + h]
            states = np.concatenate([dataset.s[seg], dataset.s_next[seg[-1:]]])
            truth = disc @ phi.table[states]
            pred = disc @ one_step.predict_features(int(states[0]), dataset.a[seg], phi)
            ea.append(np.linalg.norm(pred - truth))
            atoms = models[h].atoms[int(states[0])]
            eb.append(np.min(np.linalg.norm(atoms - truth, axis=1)))
        a_err.append(float(np.mean(ea)) if ea else float("nan"))
        b_err.append(float(np.mean(eb)) if eb else float("nan"))
        counts.append(len(windows))
    return ProbeResult(horizons, tuple(a_err), tuple(b_err), tuple(counts))
