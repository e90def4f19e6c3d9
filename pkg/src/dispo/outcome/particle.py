"""Exact-support outcome model: per-state weighted atom sets updated by a distributional backup."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from dispo.errors import ContractError, UntrainedModelError
from dispo.features import FeatureMap
from dispo.mdp import TransitionDataset, effective_horizon

log = logging.getLogger(__name__)

DEFAULT_ATOM_CAP = 256


def default_merge_tol(gamma: float) -> float:
    return (1.0 - gamma) * 1e-3


def merge_atoms(psi: np.ndarray, weights: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy sup-norm clustering: the heaviest remaining atom absorbs all unclaimed atoms within ``tol``.

    Survivors keep their own position (so they stay exact path outcomes) and
    carry the summed weight; any two survivors are more than ``tol`` apart.
    """
    n = len(psi)
    if n <= 1:
        return psi, weights
    order = np.argsort(-weights, kind="stable")
    psi, weights = psi[order], weights[order]
    pairs = cKDTree(psi).query_pairs(tol, p=np.inf, output_type="ndarray")
    if len(pairs) == 0:
        return psi, weights
    adj = sparse.coo_matrix((np.ones(2 * len(pairs)), (np.r_[pairs[:, 0], pairs[:, 1]], np.r_[pairs[:, 1], pairs[:, 0]])),
                            shape=(n, n)).tocsr()
    merged = weights.copy()
    alive = np.ones(n, dtype=bool)
    # atoms without neighbours survive as they are; only linked ones need the greedy pass
    for i in np.unique(pairs):
        if not alive[i]:
            continue
        nb = adj.indices[adj.indptr[i]:adj.indptr[i + 1]]
        nb = nb[alive[nb] & (nb > i)]
        merged[i] += weights[nb].sum()
        alive[nb] = False
    keep = np.flatnonzero(alive)
    merged_w = merged[keep]
    return psi[keep], np.asarray(merged_w)


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Sup-norm Hausdorff distance between two finite point sets."""
    da, _ = cKDTree(b).query(a, p=np.inf)
    db, _ = cKDTree(a).query(b, p=np.inf)
    return float(max(np.max(da), np.max(db)))


@dataclass
class ParticleOutcomeModel:
    """``p(psi | s)`` as a weighted atom set per state.

    ``atoms[s]`` has shape ``(k_s, d)``; ``weights[s]`` sums to one.
    """

    gamma: float
    phi: FeatureMap
    merge_tol: float
    atom_cap: int = DEFAULT_ATOM_CAP
    atoms: list[np.ndarray] = field(default_factory=list)
    weights: list[np.ndarray] = field(default_factory=list)
    trained: bool = False
    sweeps: int = 0
    converged: bool = False
    changes: list[float] = field(default_factory=list)
    cap_hits: int = 0

    @classmethod
    def initial(cls, phi: FeatureMap, gamma: float, merge_tol: float | None = None,
                atom_cap: int = DEFAULT_ATOM_CAP) -> "ParticleOutcomeModel":
        """Every state starts with the single atom ``phi(s)``."""
        tol = default_merge_tol(gamma) if merge_tol is None else merge_tol
        atoms = [phi.table[s][None, :].copy() for s in range(phi.n_states)]
        weights = [np.ones(1) for _ in range(phi.n_states)]
        return cls(gamma, phi, tol, atom_cap, atoms, weights)

    @property
    def d(self) -> int:
        return self.phi.dim

    @property
    def n_states(self) -> int:
        return len(self.atoms)

    def atoms_at(self, s: int) -> tuple[np.ndarray, np.ndarray]:
        self._require_trained()
        return self.atoms[s], self.weights[s]

    def atom_counts(self) -> np.ndarray:
        return np.array([len(a) for a in self.atoms])

    def min_weight(self, s: int) -> float:
        return float(self.weights[s].min())

    def _require_trained(self):
        if not self.trained:
            raise UntrainedModelError("particle model has not been fitted")

    def copy(self) -> "ParticleOutcomeModel":
        return ParticleOutcomeModel(
            self.gamma, self.phi, self.merge_tol, self.atom_cap,
            [a.copy() for a in self.atoms], [w.copy() for w in self.weights],
            self.trained, self.sweeps, self.converged, list(self.changes), self.cap_hits,
        )

    def state_dict(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {
            "kind": "particle", "gamma": self.gamma, "merge_tol": self.merge_tol,
            "atom_cap": self.atom_cap, "trained": self.trained, "sweeps": self.sweeps,
            "converged": self.converged, "changes": self.changes, "cap_hits": self.cap_hits,
        }
        counts = self.atom_counts()
        arrays = {
            "outcome.counts": counts.astype(np.int64),
            "outcome.atoms": np.concatenate(self.atoms, axis=0),
            "outcome.weights": np.concatenate(self.weights),
        }
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray], phi: FeatureMap) -> "ParticleOutcomeModel":
        cuts = np.cumsum(arrays["outcome.counts"])[:-1]
        atoms = np.split(arrays["outcome.atoms"], cuts)
        weights = np.split(arrays["outcome.weights"], cuts)
        return cls(
            meta["gamma"], phi, meta["merge_tol"], meta["atom_cap"], atoms, weights,
            meta["trained"], meta["sweeps"], meta["converged"], list(meta["changes"]), meta["cap_hits"],
        )

    def dump(self) -> str:
        """Human-readable listing of every atom, for debugging."""
        lines = []
        for s, (psi, w) in enumerate(zip(self.atoms, self.weights)):
            lines.append(f"state {s}: {len(w)} atoms")
            for p, wi in zip(psi, w):
                lines.append(f"  w={wi:.6g} psi=[{', '.join(f'{x:.6g}' for x in p)}]")
        return "\n".join(lines)


def successor_frequencies(dataset: TransitionDataset) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per source state: distinct dataset successors and their empirical frequencies."""
    rows, counts = dataset.unique_triples()
    out: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    if len(rows) == 0:
        return out
    pair_keys = rows[:, 0] * dataset.n_states + rows[:, 2]
    keys, inverse = np.unique(pair_keys, return_inverse=True)
    pair_counts = np.bincount(inverse, weights=counts)
    src, dst = np.divmod(keys, dataset.n_states)
    for s in np.unique(src):
        mask = src == s
        out[int(s)] = (dst[mask], pair_counts[mask] / pair_counts[mask].sum())
    return out


def particle_backup(
    model: ParticleOutcomeModel,
    dataset: TransitionDataset,
    phi: FeatureMap | None = None,
    gamma: float | None = None,
    _succ: dict | None = None,
) -> tuple[ParticleOutcomeModel, float]:
    """One synchronous sweep ``atoms(s) <- merge{phi(s) + gamma psi' : psi' in atoms(s'), (s, s') in data}``.

    Composed atoms carry weight ``freq(s -> s') * w(psi')``. States without
    outgoing data keep their atoms. Returns the new model and the largest
    per-state Hausdorff change of the supports.
    """
    phi = model.phi if phi is None else phi
    gamma = model.gamma if gamma is None else gamma
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    if dataset.n_states != model.n_states or phi.n_states != model.n_states:
        raise ContractError("dataset, features and model disagree on the number of states")
    succ = successor_frequencies(dataset) if _succ is None else _succ
    new = model.copy()
    change = 0.0
    for s, (dsts, freqs) in succ.items():
        cand = np.concatenate([phi.table[s] + gamma * model.atoms[t] for t in dsts], axis=0)
        cand_w = np.concatenate([f * model.weights[t] for t, f in zip(dsts, freqs)])
        psi, w = merge_atoms(cand, cand_w, model.merge_tol)
        if len(w) > model.atom_cap:
            order = np.argsort(-w, kind="stable")[: model.atom_cap]
            psi, w = psi[order], w[order]
            new.cap_hits += 1
        new.atoms[s] = psi
        new.weights[s] = w / w.sum()
        change = max(change, hausdorff(model.atoms[s], psi))
    new.sweeps = model.sweeps + 1
    new.changes = model.changes + [change]
    new.trained = True
    return new, change


def particle_fixed_point(
    dataset: TransitionDataset,
    phi: FeatureMap,
    gamma: float,
    merge_tol: float | None = None,
    tol: float = 1e-6,
    max_sweeps: int | None = None,
    atom_cap: int = DEFAULT_ATOM_CAP,
) -> ParticleOutcomeModel:
    """Repeat :func:`particle_backup` until the support change is at most ``tol``.

    Hitting ``max_sweeps`` (default: twice the effective horizon) is logged and
    recorded on the model, not raised.
    """
    if tol <= 0:
        raise ContractError("tol must be positive")
    if max_sweeps is None:
        max_sweeps = 2 * effective_horizon(gamma, tol)
    model = ParticleOutcomeModel.initial(phi, gamma, merge_tol, atom_cap)
    succ = successor_frequencies(dataset)
    change = np.inf
    for _ in range(max_sweeps):
        model, change = particle_backup(model, dataset, phi, gamma, _succ=succ)
        if change <= tol:
            model.converged = True
            break
    model.trained = True
    if not model.converged:
        log.warning("particle fixed point not reached after %d sweeps (last change %.3g)", model.sweeps, change)
    if model.cap_hits:
        log.info("atom cap %d hit %d times", atom_cap, model.cap_hits)
    return model


def sample_particle(model: ParticleOutcomeModel, s: int, n: int, rng: np.random.Generator) -> np.ndarray:
    psi, w = model.atoms_at(s)
    idx = rng.choice(len(w), size=n, p=w)
    return psi[idx]


def support_query(model: ParticleOutcomeModel, s: int, psi: np.ndarray, epsilon: float, tol: float | None = None) -> bool:
    """True iff an atom of weight >= ``epsilon`` lies within sup-norm ``tol`` of ``psi``."""
    atoms, w = model.atoms_at(s)
    tol = model.merge_tol if tol is None else tol
    near = np.max(np.abs(atoms - np.asarray(psi)), axis=1) <= tol
    return bool(np.any(near & (w >= epsilon)))
