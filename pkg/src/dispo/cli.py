"""Command-line entry point: ``dispo <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import yaml

from dispo.errors import DispoError
from dispo.harness.config import PRESETS, ExperimentConfig, load_config, preset
from dispo.planner import MODE_ALIASES

log = logging.getLogger("dispo")

DEFAULT_PLANNER = {"particle": "exact-particle", "diffusion": "guided-diffusion"}


def _seeds(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def _override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def build_config(args) -> ExperimentConfig:
    overrides = dict(args.set or [])
    if args.backend:
        overrides["model.backend"] = args.backend
        if not args.planner:
            overrides["planner.mode"] = DEFAULT_PLANNER[args.backend]
    if args.planner:
        overrides["planner.mode"] = MODE_ALIASES.get(args.planner, args.planner)
    if args.seed:
        overrides["seeds"] = args.seed
    if args.out:
        overrides["out"] = args.out
    if args.config:
        return load_config(args.config, overrides)
    return preset(args.env, **overrides)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON experiment config")
    p.add_argument("--env", default="maze", choices=sorted(PRESETS), help="built-in preset when --config is absent")
    p.add_argument("--seed", type=_seeds, help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--out", help="output directory")
    p.add_argument("--backend", choices=("particle", "diffusion"))
    p.add_argument("--planner", choices=sorted(MODE_ALIASES) + sorted(MODE_ALIASES.values()))
    p.add_argument("--set", type=_override, action="append", metavar="KEY=VALUE",
                   help="dotted config override, repeatable (e.g. model.steps=2000)")
    p.add_argument("--quiet", action="store_true", help="only print errors")
    p.add_argument("--strict", action="store_true", help="exit nonzero when any check fails")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _checkpoint_path(out: Path, config: ExperimentConfig, seed: int) -> Path:
    return out / f"{config.env.name}_{config.model.backend}_seed{seed}.ckpt"


def cmd_train(args) -> int:
    from dispo.harness.experiments import STREAM_ADAPT, prepare, stream
    from dispo.harness.persistence import Bundle, rng_state, save_checkpoint

    config = build_config(args)
    out = _out_dir(config)
    for seed in config.seeds:
        _, _, models, timings = prepare(config, seed)
        path = _checkpoint_path(out, config, seed)
        save_checkpoint(path, Bundle(config, seed, models, {"adapt": rng_state(stream(seed, STREAM_ADAPT))}))
        _say(args, f"seed {seed}: trained in {timings.get('pretrain_seconds', 0.0):.1f}s -> {path}")
    return 0


def _load_bundles(args, config: ExperimentConfig):
    from dispo.harness.persistence import load_checkpoint

    out = Path(config.out)
    bundles = {}
    for seed in config.seeds:
        path = Path(args.checkpoint) if getattr(args, "checkpoint", None) else _checkpoint_path(out, config, seed)
        bundles[seed] = load_checkpoint(path)
    return bundles


def cmd_adapt(args) -> int:
    from dispo.harness.envs import build_env
    from dispo.harness.experiments import STREAM_ADAPT, stream
    from dispo.planner import adapt_offline

    config = build_config(args)
    env = build_env(config.env.name, config.env.gamma, config.env.layout, config.env.epsilon)
    out = _out_dir(config)
    for seed, bundle in _load_bundles(args, config).items():
        m = bundle.models
        for task in config.tasks or tuple(env.tasks):
            policy = adapt_offline(m, m.dataset.relabel(env.tasks[task]), m.phi, config.planner,
                                   stream(seed, STREAM_ADAPT), config.adapt.subsample)
            path = out / f"w_{config.env.name}_{task}_seed{seed}.json"
            path.write_text(policy.weights.to_json() + "\n", encoding="utf-8")
            _say(args, f"seed {seed} task {task}: residual {policy.weights.fit_residual:.3g} -> {path}")
    return 0


def cmd_eval(args) -> int:
    from dispo.harness.experiments import run_experiment
    from dispo.harness.report import emit_results, write_records

    config = build_config(args)
    out = _out_dir(config)
    prepared = None
    if args.from_checkpoints:
        from dispo.harness.envs import build_env

        env = build_env(config.env.name, config.env.gamma, config.env.layout, config.env.epsilon)
        prepared = {s: (env, b.models.dataset, b.models, {}) for s, b in _load_bundles(args, config).items()}
    t0 = time.perf_counter()
    records = run_experiment(config, prepared)
    write_records(out / "records.jsonl", records)
    paths = emit_results(records, out, figures=not args.no_figures)
    for r in records:
        occ = "" if r.occupancy is None else f" occupancy {r.occupancy:.2f}"
        status = f"error {r.error}" if r.error else (f"return {r.mean_return:.3f} normalized {r.normalized_return:.3f}"
                                                      f" success {r.success_rate:.2f}{occ}")
        _say(args, f"{r.env} {r.task} seed {r.seed} {r.planner}: {status}")
    _say(args, f"{len(records)} records in {time.perf_counter() - t0:.1f}s; summary {paths['summary']}")
    return 1 if args.strict and any(r.error for r in records) else 0


def cmd_check(args) -> int:
    from dispo.harness.theory import check_full_coverage_optimality, goodness_suite

    seed = (args.seed or [0])[0]
    out = Path(args.out or "results")
    out.mkdir(parents=True, exist_ok=True)
    result: dict = {}
    ok = True
    if args.suite in ("optimality", "all"):
        verdicts = check_full_coverage_optimality(args.n_mdps, seed=seed)
        control = check_full_coverage_optimality(max(1, args.n_mdps // 4), seed=seed + 1, negative_control=True)
        passed = sum(v.passed for v in verdicts)
        control_failed = sum(not v.passed for v in control)
        result["optimality"] = {"verdicts": [v.to_dict() for v in verdicts],
                                "negative_control": [v.to_dict() for v in control]}
        suite_ok = passed == len(verdicts) and control_failed == len(control)
        ok &= suite_ok
        _say(args, f"optimality: {passed}/{len(verdicts)} pass; negative control fails {control_failed}/{len(control)}"
                   f" -> {'PASS' if suite_ok else 'FAIL'}")
    if args.suite in ("goodness", "all"):
        rep = goodness_suite(seed=seed, n_rollouts=args.n_rollouts)
        ref = goodness_suite(seed=seed, n_rollouts=args.n_rollouts, policy="behavior")
        suite_ok = rep.max_delta <= rep.bound() and ref.max_delta > rep.max_delta
        ok &= suite_ok
        result["goodness"] = {"dispo": rep.to_dict(), "behavior": ref.to_dict()}
        _say(args, f"goodness: max delta {rep.max_delta:.4f} (bound {rep.bound():.4f}); behavior policy "
                   f"{ref.max_delta:.4f} -> {'PASS' if suite_ok else 'FAIL'}")
    path = out / "checks.json"
    path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _say(args, f"wrote {path}")
    return 1 if args.strict and not ok else 0


def cmd_ablate(args) -> int:
    from dispo.harness.ablation import run_ablation
    from dispo.harness.report import emit_results, write_records

    config = build_config(args)
    out = _out_dir(config)
    res = run_ablation(args.kind, config)
    records = res.all_records()
    write_records(out / f"ablation_{args.kind}.jsonl", records)
    emit_results(records, out, ablation=res, prefix=f"ablation_{args.kind}", figures=not args.no_figures)
    for row in res.table():
        _say(args, f"{row['variant']:>14}: return {row['mean_return']:.3f} +- {row['std_return']:.3f} "
                   f"normalized {row['normalized_return']:.3f} plan {1e3 * row['plan_seconds_per_plan']:.1f} ms/plan")
    return 1 if args.strict and any(r.error for r in records) else 0


def cmd_probe(args) -> int:
    from dispo.harness.envs import build_env
    from dispo.harness.experiments import build_features, collect
    from dispo.harness.probe import OneStepModel, compounding_error_probe
    from dispo.harness.report import write_series

    config = build_config(args)
    out = _out_dir(config)
    env = build_env(config.env.name, config.env.gamma, config.env.layout, config.env.epsilon)
    seed = config.seeds[0]
    data = collect(config, env, seed)
    phi = build_features(config, env, seed)
    one_step = (OneStepModel.fit_dense(data, env.mdp.embedding, steps=args.steps, seed=seed)
                if args.model == "dense" else OneStepModel.fit_tabular(data))
    result = compounding_error_probe(env.mdp, data, phi, args.horizons, one_step=one_step, seed=seed)
    path = write_series(out / "probe.txt", {"horizon": list(result.horizons),
                                            "one_step_error": list(result.one_step_error),
                                            "direct_error": list(result.direct_error)},
                        comment=f"{args.model} one-step model on {env.name}")
    if not args.no_figures:
        from dispo.harness.report import plt

        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        ax.plot(result.horizons, result.one_step_error, "o-", label="one-step model")
        ax.plot(result.horizons, result.direct_error, "s-", label="outcome model")
        ax.set_xlabel("horizon")
        ax.set_ylabel("mean error")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / "probe.png", dpi=100)
        plt.close(fig)
    for row in result.rows():
        _say(args, f"h={row['horizon']:>3}: one-step {row['one_step_error']:.4g} direct {row['direct_error']:.4g}")
    _say(args, f"wrote {path}")
    return 0


def cmd_emit(args) -> int:
    from dispo.harness.report import emit_results, load_records

    records = []
    for path in args.records:
        records.extend(load_records(path))
    out = Path(args.out or "results")
    paths = emit_results(records, out, prefix=args.prefix, figures=not args.no_figures)
    _say(args, "\n".join(f"{k}: {v}" for k, v in paths.items() if not k.startswith("series:")))
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dispo", description="Distributional successor features on grid MDPs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pretrain outcome model and readout, save one checkpoint per seed")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="fit reward weights from saved checkpoints")
    _common(p)
    p.add_argument("--checkpoint", help="explicit checkpoint file (single seed)")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="pretrain (or load), adapt and evaluate; writes CSV/JSON/plots")
    _common(p)
    p.add_argument("--from-checkpoints", action="store_true", help="reuse checkpoints written by 'train'")
    p.add_argument("--checkpoint", help="explicit checkpoint file (single seed)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="optimality and goodness suites on random exact MDPs")
    _common(p)
    p.add_argument("--suite", choices=("optimality", "goodness", "all"), default="all")
    p.add_argument("--n-mdps", type=int, default=20)
    p.add_argument("--n-rollouts", type=int, default=10_000)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("ablate", help="one-axis sweep")
    _common(p)
    p.add_argument("--kind", choices=("planner", "feature_dim", "coverage", "discount"), required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe", help="compounding-error probe")
    _common(p)
    p.add_argument("--model", choices=("tabular", "dense"), default="dense")
    p.add_argument("--steps", type=int, default=2000, help="training steps of the dense one-step model")
    p.add_argument("--horizons", type=lambda t: [int(x) for x in t.split(",")], default=[1, 2, 4, 8, 16])
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("emit", help="render CSV/JSON/plots from saved records (JSON lines)")
    p.add_argument("records", nargs="+", help="records.jsonl files")
    p.add_argument("--out")
    p.add_argument("--prefix", default="results")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_emit)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DispoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
