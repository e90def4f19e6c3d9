import json

import numpy as np
import pytest

from dispo.errors import CheckpointError, ConfigurationError, ContractError
from dispo.features import make_one_hot
from dispo.harness.ablation import remove_half, run_ablation
from dispo.harness.config import ExperimentConfig, config_from_dict, load_config, preset
from dispo.harness.envs import build_env, corridor_occupancy
from dispo.harness.experiments import ResultsRecord, prepare, run_experiment
from dispo.harness.persistence import Bundle, load_checkpoint, save_checkpoint
from dispo.harness.probe import OneStepModel, compounding_error_probe
from dispo.harness.report import emit_results, load_records, summarize, write_records
from dispo.harness.theory import check_full_coverage_optimality, count_paths, goodness_suite
from dispo.mdp import collect_dataset, random_dag_mdp
from dispo.planner import adapt_offline


def _record(seed, ret, backend="particle"):
    return ResultsRecord(env="corridor", task="goal", seed=seed, backend=backend, planner="exact-particle",
                         returns=[ret], mean_return=ret, normalized_return=ret / 2, success_rate=1.0)


def test_preset_and_dotted_overrides():
    cfg = preset("maze", **{"planner.n_particles": 7, "seeds": [3]})
    assert cfg.env.name == "maze" and cfg.planner.n_particles == 7 and cfg.seeds == (3,)
    assert cfg.replace(**{"eval.horizon": 5}).eval.horizon == 5
    with pytest.raises(ConfigurationError):
        preset("nowhere")
    with pytest.raises(ConfigurationError):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigurationError):
        config_from_dict({"planner": {"nope": 1}})
    with pytest.raises(ConfigurationError):
        ExperimentConfig().replace(**{"planner.mode": "guided-diffusion"})


def test_yaml_config_round_trip(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("env:\n  name: corridor\n  gamma: 0.8\nseeds: [1, 2]\n", encoding="utf-8")
    cfg = load_config(path, {"eval.horizon": 9})
    assert (cfg.env.gamma, cfg.seeds, cfg.eval.horizon) == (0.8, (1, 2), 9)
    assert config_from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    bad = tmp_path / "bad.yaml"
    bad.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_config(bad)
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.yaml")


def test_builtin_environments():
    for name in ("corridor", "maze", "stitch", "preference"):
        env = build_env(name, 0.9)
        assert env.tasks and env.mdp.n_states > 0
    pref = build_env("preference", 0.9)
    assert set(pref.corridors) == {"up", "right"}
    with pytest.raises(ConfigurationError):
        build_env("grid", 0.9)
    with pytest.raises(ConfigurationError):
        build_env("mars", 0.9)


def test_corridor_occupancy():
    assert corridor_occupancy([0, 1, 2, 9], (1, 2), (5,)) == 1.0
    assert corridor_occupancy([1, 5, 5, 2], (1, 2), (5,)) == 0.5
    assert corridor_occupancy([0, 9], (1, 2), (5,)) == 0.0


def test_corridor_experiment_is_deterministic():
    cfg = preset("corridor", seeds=[0, 1])
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    assert [r.deterministic_view() for r in a] == [r.deterministic_view() for r in b]
    assert all(r.success_rate == 1.0 and r.normalized_return == pytest.approx(1.0) for r in a)


def test_failed_seed_is_recorded_and_others_run(monkeypatch):
    import dispo.harness.experiments as ex

    real = ex.prepare

    def flaky(config, seed, env=None):
        if seed == 0:
            raise ContractError("boom")
        return real(config, seed, env)

    monkeypatch.setattr(ex, "prepare", flaky)
    records = ex.run_experiment(preset("corridor", seeds=[0, 1]))
    assert [bool(r.error) for r in records] == [True, False]
    assert "boom" in records[0].error
    with pytest.raises(ConfigurationError):
        preset("corridor", **{"data.n_transitions": 0})
    with pytest.raises(ConfigurationError):
        run_experiment(preset("corridor", tasks=["nope"]))


def test_checkpoint_reproduces_plans(tmp_path):
    cfg = preset("corridor", seeds=[0])
    env, dataset, models, _ = prepare(cfg, 0)
    path = tmp_path / "b.ckpt"
    save_checkpoint(path, Bundle(cfg, 0, models))
    back = load_checkpoint(path)
    save_checkpoint(tmp_path / "b2.ckpt", back)
    assert path.read_bytes() == (tmp_path / "b2.ckpt").read_bytes()
    labeled = dataset.relabel(env.tasks["goal"])
    p1 = adapt_offline(models, labeled, models.phi, cfg.planner, np.random.default_rng(0))
    p2 = adapt_offline(back.models, labeled, back.models.phi, cfg.planner, np.random.default_rng(0))
    for s in range(env.mdp.n_states):
        psi1, a1 = p1.plan(s)
        psi2, a2 = p2.plan(s)
        np.testing.assert_array_equal(psi1, psi2)
        assert a1 == a2
    data = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.ckpt")


def test_summary_by_hand():
    recs = [_record(0, 1.0), _record(1, 2.0), _record(2, 6.0)]
    cell = summarize(recs)["cells"][0]
    assert cell["mean_return"]["mean"] == pytest.approx(3.0)
    assert cell["mean_return"]["std"] == pytest.approx(np.std([1.0, 2.0, 6.0]))
    assert cell["seeds"] == [0, 1, 2]
    with pytest.raises(ContractError):
        summarize([])


def test_emit_writes_all_outputs(tmp_path):
    recs = [_record(0, 1.0), _record(1, 2.0)]
    paths = emit_results(recs, tmp_path)
    assert paths["csv"].read_text().count("\n") == 3
    summary = json.loads(paths["summary"].read_text())
    assert summary["table"]["corridor"]["goal"]["particle/exact-particle"]["mean_return"]["mean"] == 1.5
    assert paths["figure"].read_bytes()[:4] == b"\x89PNG"
    series = [p for k, p in paths.items() if k.startswith("series:")]
    assert series and series[0].read_text().startswith("#")
    back = load_records(write_records(tmp_path / "r.jsonl", recs))
    assert back == [r.to_dict() for r in recs]
    with pytest.raises(ContractError):
        emit_results([], tmp_path)


def test_remove_half_drops_whole_episodes():
    env = build_env("maze", 0.9)
    ds = collect_dataset(env.mdp, env.behavior, 400, 40, seed=0)
    r = env.tasks["goal"].values
    for how in ("random", "adversarial"):
        half = remove_half(ds, how, r, np.random.default_rng(0))
        assert len(half) <= len(ds) // 2 + 1 and len(half) > 0
        kept = set(np.unique(half.episode))
        for e in kept:
            assert np.sum(half.episode == e) == np.sum(ds.episode == e)
    assert remove_half(ds, "full", r, np.random.default_rng(0)) is ds
    with pytest.raises(ConfigurationError):
        remove_half(ds, "sideways", r, np.random.default_rng(0))


def test_coverage_ablation_runs():
    cfg = preset("corridor", seeds=[0])
    res = run_ablation("coverage", cfg)
    assert [row["variant"] for row in res.table()] == ["full", "random", "adversarial"]
    with pytest.raises(ConfigurationError):
        run_ablation("colour", cfg)


def test_optimality_suite_and_control():
    verdicts = check_full_coverage_optimality(3, seed=0)
    assert all(v.passed for v in verdicts)
    control = check_full_coverage_optimality(2, seed=1, negative_control=True)
    assert not any(v.passed for v in control)
    with pytest.raises(ContractError):
        check_full_coverage_optimality(1, size_bounds=((4, 60), 4))


def test_count_paths_on_dag():
    mdp = random_dag_mdp(6, 2, np.random.default_rng(0), 0.9)
    assert count_paths(mdp, mdp.n_states - 1) >= 1
    assert count_paths(mdp, 0) >= count_paths(mdp, 1)


def test_goodness_suite_small():
    rep = goodness_suite(seed=0, n_rollouts=500)
    assert rep.max_delta <= rep.bound()
    assert all(lo <= d <= hi for d, lo, hi in zip(rep.delta, rep.ci_low, rep.ci_high))


def test_probe_shows_compounding_error():
    env = build_env("maze", 0.9)
    ds = collect_dataset(env.mdp, env.behavior, 1000, 40, seed=0)
    phi = make_one_hot(env.mdp.n_states, 0.9)
    tab = compounding_error_probe(env.mdp, ds, phi, [1, 4], seed=0)
    assert tab.direct_error[-1] < 1e-2
    dense = OneStepModel.fit_dense(ds, env.mdp.embedding, steps=300, seed=0)
    res = compounding_error_probe(env.mdp, ds, phi, [1, 2, 8], one_step=dense, seed=0)
    assert res.one_step_error[-1] > res.one_step_error[0]
    with pytest.raises(ContractError):
        compounding_error_probe(env.mdp, ds, phi, [4, 1])
