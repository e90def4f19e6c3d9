import json

from dispo.cli import main


def test_train_adapt_eval_from_checkpoints(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["train", "--env", "corridor", "--seed", "0", "--out", out]) == 0
    assert (tmp_path / "corridor_particle_seed0.ckpt").exists()
    assert main(["adapt", "--env", "corridor", "--seed", "0", "--out", out]) == 0
    w = json.loads((tmp_path / "w_corridor_goal_seed0.json").read_text())
    assert "w" in w
    assert main(["eval", "--env", "corridor", "--seed", "0", "--out", out, "--from-checkpoints", "--strict"]) == 0
    for name in ("results.csv", "results_summary.json", "results_normalized_return.png", "records.jsonl"):
        assert (tmp_path / name).exists()
    assert "normalized 1.000" in capsys.readouterr().out


def test_emit_from_records(tmp_path):
    out = tmp_path / "run"
    assert main(["eval", "--env", "corridor", "--seed", "0,1", "--out", str(out), "--quiet", "--no-figures"]) == 0
    assert not (out / "results_normalized_return.png").exists()
    rendered = tmp_path / "rendered"
    assert main(["emit", str(out / "records.jsonl"), "--out", str(rendered), "--quiet"]) == 0
    assert (rendered / "results_normalized_return.png").exists()
    summary = json.loads((rendered / "results_summary.json").read_text())
    assert summary["cells"][0]["seeds"] == [0, 1]


def test_check_small_suites(tmp_path, capsys):
    code = main(["check", "--suite", "all", "--n-mdps", "4", "--n-rollouts", "300", "--out", str(tmp_path),
                 "--strict"])
    text = capsys.readouterr().out
    assert code == 0 and text.count("PASS") == 2
    assert set(json.loads((tmp_path / "checks.json").read_text())) == {"optimality", "goodness"}


def test_probe_and_ablation(tmp_path):
    assert main(["probe", "--env", "corridor", "--model", "tabular", "--horizons", "1,2", "--out", str(tmp_path),
                 "--quiet"]) == 0
    assert (tmp_path / "probe.txt").exists() and (tmp_path / "probe.png").exists()
    assert main(["ablate", "--env", "corridor", "--kind", "coverage", "--seed", "0", "--out", str(tmp_path),
                 "--quiet"]) == 0
    assert (tmp_path / "ablation_coverage_ablation_coverage.png").exists()


def test_bad_config_exits_with_code_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense: 1\n", encoding="utf-8")
    assert main(["eval", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "unknown config keys" in capsys.readouterr().err
    assert main(["eval", "--env", "corridor", "--set", "planner.mode=guided-diffusion", "--out", str(tmp_path)]) == 2
