import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dispo.errors import ContractError, UnsupportedOperationError, UntrainedModelError
from dispo.features import make_one_hot, make_reward_feature
from dispo.harness.envs import build_env
from dispo.mdp import collect_dataset, full_coverage_dataset, random_dag_mdp
from dispo.outcome import (
    DiffusionOutcomeModel, ParticleOutcomeModel, default_merge_tol, hausdorff, merge_atoms, particle_backup,
    particle_fixed_point, sample_outcomes, support_query,
)


def _successors(dataset):
    succ = {}
    for a, b in zip(dataset.s, dataset.s_next):
        succ.setdefault(int(a), set()).add(int(b))
    return succ


def enumerate_outcomes(dataset, phi, gamma, s):
    """Brute force: discounted feature sums of every dataset-covered path from ``s`` (acyclic data only).

    A path ending in an absorbing self-loop is closed with its geometric tail;
    a state without outgoing data ends the path.
    """
    succ = _successors(dataset)
    out = []

    def walk(state, acc, disc):
        nxt = succ.get(state, set())
        if nxt == {state}:
            out.append(acc + disc * phi.table[state] / (1 - gamma))
        elif not nxt:
            out.append(acc + disc * phi.table[state])
        else:
            for t in sorted(nxt):
                walk(t, acc + disc * phi.table[state], disc * gamma)

    walk(s, np.zeros(phi.dim), 1.0)
    return np.array(out)


def best_path_value(dataset, values, gamma, sweeps=500):
    """Largest discounted sum of ``values`` over dataset-covered paths, by dynamic programming."""
    succ = _successors(dataset)
    v = np.array(values, dtype=float)
    for _ in range(sweeps):
        v = np.array([values[s] + gamma * max(v[t] for t in succ[s]) if s in succ else values[s]
                      for s in range(len(values))])
    return v


def test_chain_fixed_point(chain):
    mdp, ds, phi = chain
    model = particle_fixed_point(ds, phi, 0.5)
    atoms, w = model.atoms_at(0)
    assert atoms.shape == (1, 3)
    np.testing.assert_allclose(atoms[0], [0.5, 0.25, 0.25], atol=model.merge_tol)
    assert w[0] == 1.0 and model.converged


def test_y_junction_two_atoms_with_branch_frequencies(yj):
    mdp, ds, phi = yj
    model = particle_fixed_point(ds, phi, 0.5)
    atoms, w = model.atoms_at(0)
    assert len(atoms) == 2
    order = np.argsort(-w)
    np.testing.assert_allclose(w[order], [0.75, 0.25])
    np.testing.assert_allclose(atoms[order], [[0.5, 0.5, 0.0], [0.5, 0.0, 0.5]], atol=model.merge_tol)


def test_single_backup_is_one_step_composition(yj):
    _, ds, phi = yj
    model, change = particle_backup(ParticleOutcomeModel.initial(phi, 0.5), ds)
    atoms, w = model.atoms_at(0)
    expected = sorted([tuple(phi.table[0] + 0.5 * phi.table[1]), tuple(phi.table[0] + 0.5 * phi.table[2])])
    np.testing.assert_allclose(sorted(map(tuple, atoms)), expected)
    assert change > 0 and model.sweeps == 1


def test_stitched_outcome_exists():
    env = build_env("stitch", 0.9)
    mdp = env.mdp
    ds = collect_dataset(mdp, env.behavior, 3000, 30, seed=0)
    phi = make_reward_feature(env.tasks["goal"], 0.9)
    model = particle_fixed_point(ds, phi, 0.9)
    start = mdp.grid.marks["S"][0]
    atoms, _ = model.atoms_at(start)
    assert atoms[:, 0].max() > 0.0
    # the best atom matches the best dataset-covered path
    best = best_path_value(ds, phi.table[:, 0], 0.9)[start]
    assert atoms[:, 0].max() == pytest.approx(best, abs=model.merge_tol / 0.1)


@pytest.mark.parametrize("seed", range(3))
def test_full_coverage_support_matches_path_enumeration(seed):
    gamma = 0.8
    mdp = random_dag_mdp(20, 2, np.random.default_rng(seed), gamma)
    ds = full_coverage_dataset(mdp)
    phi = make_one_hot(20, gamma)
    model = particle_fixed_point(ds, phi, gamma, atom_cap=4096)
    assert model.cap_hits == 0
    tol = model.merge_tol / (1 - gamma)
    for s in range(mdp.n_states):
        paths = enumerate_outcomes(ds, phi, gamma, s)
        atoms, w = model.atoms_at(s)
        assert hausdorff(atoms, paths) <= tol + 1e-12
        assert w.sum() == pytest.approx(1.0)


def test_backup_is_a_contraction():
    gamma = 0.7
    mdp = random_dag_mdp(12, 3, np.random.default_rng(4), gamma)
    ds = full_coverage_dataset(mdp)
    phi = make_one_hot(12, gamma)
    model = particle_fixed_point(ds, phi, gamma, tol=1e-9)
    ch = model.changes
    assert model.converged
    for a, b in zip(ch, ch[1:]):
        assert b <= gamma * a + 2 * model.merge_tol + 1e-15


def test_unconverged_run_is_recorded(caplog):
    env = build_env("maze", 0.9)
    ds = collect_dataset(env.mdp, env.behavior, 500, 40, seed=0)
    phi = make_one_hot(env.mdp.n_states, 0.9)
    model = particle_fixed_point(ds, phi, 0.9, max_sweeps=2)
    assert not model.converged and model.trained and model.sweeps == 2
    assert "not reached" in caplog.text


@settings(max_examples=40, deadline=None)
@given(pts=st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), min_size=1, max_size=30),
       tol=st.sampled_from([0.5, 1.0, 3.0]))
def test_merge_atoms_properties(pts, tol):
    psi = np.array(pts, dtype=float)
    w = np.linspace(1.0, 2.0, len(psi))
    out, ow = merge_atoms(psi, w, tol)
    assert ow.sum() == pytest.approx(w.sum())
    # every input is represented by a survivor within tol and survivors are at existing positions
    dist = np.max(np.abs(psi[:, None, :] - out[None, :, :]), axis=2)
    assert np.all(dist.min(axis=1) <= tol + 1e-12)
    assert all(any(np.array_equal(o, p) for p in psi) for o in out)
    if len(out) > 1:
        d = np.max(np.abs(out[:, None, :] - out[None, :, :]), axis=2)
        d[np.diag_indices(len(out))] = np.inf
        assert np.all(d.min(axis=1) > tol)


def test_merge_keeps_heaviest_position():
    out, w = merge_atoms(np.array([[0.0], [0.5e-3]]), np.array([0.2, 0.8]), 1e-3)
    np.testing.assert_array_equal(out, [[0.5e-3]])
    assert w[0] == pytest.approx(1.0)


def test_atom_cap_evicts_lightest():
    gamma = 0.9
    mdp = random_dag_mdp(16, 4, np.random.default_rng(0), gamma, window=4)
    ds = full_coverage_dataset(mdp)
    phi = make_one_hot(16, gamma)
    model = particle_fixed_point(ds, phi, gamma, atom_cap=3)
    assert model.atom_counts().max() <= 3 and model.cap_hits > 0
    for w in model.weights:
        assert w.sum() == pytest.approx(1.0)


def test_sampling_frequencies_binomial():
    phi = make_one_hot(2, 0.5)
    model = ParticleOutcomeModel.initial(phi, 0.5)
    model.atoms[0] = np.array([[1.0, 0.0], [0.0, 1.0]])
    model.weights[0] = np.array([0.7, 0.3])
    model.trained = True
    draws = sample_outcomes(model, 0, 10_000, np.random.default_rng(0))
    freq = np.mean(draws[:, 0] == 1.0)
    sigma = np.sqrt(0.7 * 0.3 / 10_000)
    assert abs(freq - 0.7) <= 3 * sigma


def test_support_query(yj):
    _, ds, phi = yj
    model = particle_fixed_point(ds, phi, 0.5)
    assert support_query(model, 0, [0.5, 0.5, 0.0], 0.5)
    assert not support_query(model, 0, [0.5, 0.0, 0.5], 0.5)
    assert support_query(model, 0, [0.5, 0.0, 0.5], 0.25)
    assert not support_query(model, 0, [0.3, 0.3, 0.3], 1e-12)
    diff = DiffusionOutcomeModel(3, 0.5, np.eye(3))
    with pytest.raises(UnsupportedOperationError):
        support_query(diff, 0, [0, 0, 0], 0.1)


def test_untrained_and_bad_inputs(yj):
    _, ds, phi = yj
    model = ParticleOutcomeModel.initial(phi, 0.5)
    with pytest.raises(UntrainedModelError):
        model.atoms_at(0)
    with pytest.raises(ContractError):
        particle_backup(model, ds.take(np.array([], dtype=int)))
    with pytest.raises(ContractError):
        particle_fixed_point(ds, phi, 0.5, tol=0)
    with pytest.raises(ContractError):
        particle_backup(model, ds, make_one_hot(4, 0.5))


def test_state_round_trip(yj):
    _, ds, phi = yj
    model = particle_fixed_point(ds, phi, 0.5)
    meta, arrays = model.state_dict()
    back = ParticleOutcomeModel.from_state(meta, arrays, phi)
    for a, b in zip(model.atoms, back.atoms):
        np.testing.assert_array_equal(a, b)
    assert back.converged == model.converged and back.merge_tol == default_merge_tol(0.5)
    assert "w=" in model.dump()
