"""Delimited outputs and figures: per-seed CSV, JSON summary, x/y plot-data files and PNG plots."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from dispo.errors import ContractError  # noqa: E402

CSV_FIELDS = ("env", "task", "seed", "backend", "planner", "variant", "mean_return", "normalized_return",
              "success_rate", "occupancy", "n_rollouts", "plans", "plan_seconds", "pretrain_seconds",
              "eval_seconds", "error")
METRICS = ("mean_return", "normalized_return", "success_rate", "occupancy")


def _get(rec, name):
    return rec[name] if isinstance(rec, dict) else getattr(rec, name)


def _as_dict(rec) -> dict:
    return rec if isinstance(rec, dict) else rec.to_dict()


def _cell(rec: dict) -> tuple:
    return (rec["env"], rec["task"], rec["backend"], rec["planner"], rec.get("extra", {}).get("variant", ""))


def csv_rows(records) -> list[dict]:
    rows = []
    for rec in map(_as_dict, records):
        wall, stats = rec.get("wall_clock", {}), rec.get("planner_stats", {})
        rows.append({
            "env": rec["env"], "task": rec["task"], "seed": rec["seed"], "backend": rec["backend"],
            "planner": rec["planner"], "variant": rec.get("extra", {}).get("variant", ""),
            "mean_return": rec["mean_return"], "normalized_return": rec["normalized_return"],
            "success_rate": rec["success_rate"], "occupancy": "" if rec.get("occupancy") is None else rec["occupancy"],
            "n_rollouts": len(rec.get("returns", [])), "plans": stats.get("plans", 0),
            "plan_seconds": stats.get("plan_seconds", 0.0), "pretrain_seconds": wall.get("pretrain_seconds", ""),
            "eval_seconds": wall.get("eval_seconds", ""), "error": rec.get("error") or "",
        })
    return rows


def _mean_std(values: list[float]) -> dict:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(vals)}


def summarize(records) -> dict:
    """Mean and (population) std over seeds for every (env, task, backend, planner, variant) cell.

    ``table`` nests the same numbers as ``env -> task -> "backend/planner[/variant]"``.
    """
    if not records:
        raise ContractError("no records to summarize")
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for rec in map(_as_dict, records):
        groups[_cell(rec)].append(rec)
    cells, table = [], {}
    for key in sorted(groups):
        recs = groups[key]
        ok = [r for r in recs if not r.get("error")]
        env, task, backend, planner, variant = key
        entry = {"env": env, "task": task, "backend": backend, "planner": planner, "variant": variant,
                 "seeds": sorted(r["seed"] for r in recs), "failed": len(recs) - len(ok)}
        for m in METRICS:
            entry[m] = _mean_std([r.get(m) for r in ok])
        cells.append(entry)
        column = "/".join(x for x in (backend, planner, variant) if x)
        table.setdefault(env, {}).setdefault(task, {})[column] = {
            m: entry[m] for m in ("mean_return", "normalized_return", "success_rate")}
    return {"cells": cells, "table": table}


def write_series(path: Path, columns: dict[str, list], comment: str = "") -> Path:
    """Whitespace-delimited columns with a ``#`` header line."""
    names = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    lines = [f"# {comment}"] if comment else []
    lines.append("# " + " ".join(names))
    for i in range(n):
        lines.append(" ".join(_fmt(columns[c][i]) for c in names))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _fmt(x) -> str:
    if isinstance(x, str):
        return x.replace(" ", "_")
    if x is None:
        return "nan"
    return repr(float(x))


def _slug(*parts) -> str:
    return "_".join(str(p).replace("/", "-").replace(" ", "-") for p in parts if p != "")


def _bar_plot(path: Path, labels: list[str], means: list[float], stds: list[float], ylabel: str, title: str) -> Path:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(labels) + 2), 3.5))
    x = np.arange(len(labels))
    ax.bar(x, np.nan_to_num(means), yerr=np.nan_to_num(stds), capsize=3, color="#4c72b0")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def emit_results(records, out_dir: str | Path, ablation=None, probe=None, prefix: str = "results",
                 figures: bool = True) -> dict[str, Path]:
    """Write ``<prefix>.csv``, ``<prefix>_summary.json``, plot-data ``.txt`` files and PNG figures.

    ``ablation`` is an :class:`AblationResult` and ``probe`` a :class:`ProbeResult`;
    each adds its own table, series file and figure. Returns name -> path.
    """
    records = list(records)
    if not records:
        raise ContractError("emit_results needs at least one record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    rows = sorted(csv_rows(records), key=lambda r: (r["env"], r["task"], r["backend"], r["planner"],
                                                     r["variant"], r["seed"]))
    paths["csv"] = out / f"{prefix}.csv"
    with paths["csv"].open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)

    summary = summarize(records)
    if ablation is not None:
        summary["ablation"] = {"kind": ablation.kind, "rows": ablation.table()}
    if probe is not None:
        summary["probe"] = probe.rows()
    paths["summary"] = out / f"{prefix}_summary.json"
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    labels, means, stds = [], [], []
    for c in summary["cells"]:
        name = _slug(c["env"], c["task"], c["planner"], c["variant"])
        labels.append(name)
        means.append(c["normalized_return"]["mean"] if c["normalized_return"]["mean"] is not None else float("nan"))
        stds.append(c["normalized_return"]["std"] or 0.0)
        seeds = [r for r in rows if _slug(r["env"], r["task"], r["planner"], r["variant"]) == name]
        key = f"series:{name}"
        paths[key] = write_series(out / f"{prefix}_{name}_seeds.txt",
                                  {"seed": [r["seed"] for r in seeds],
                                   "normalized_return": [r["normalized_return"] for r in seeds],
                                   "success_rate": [r["success_rate"] for r in seeds]},
                                  comment=f"per-seed results for {name}")
    if figures:
        paths["figure"] = _bar_plot(out / f"{prefix}_normalized_return.png", labels, means, stds,
                                    "normalized return", "mean over seeds (error bars: std)")

    if ablation is not None:
        table = ablation.table()
        paths["ablation_series"] = write_series(
            out / f"{prefix}_ablation_{ablation.kind}.txt",
            {"variant": [r["variant"] for r in table], "index": list(range(len(table))),
             "mean_return": [r["mean_return"] for r in table], "std_return": [r["std_return"] for r in table],
             "normalized_return": [r["normalized_return"] for r in table],
             "plan_seconds_per_plan": [r["plan_seconds_per_plan"] for r in table]},
            comment=f"{ablation.kind} ablation")
        if figures:
            paths["ablation_figure"] = _bar_plot(
                out / f"{prefix}_ablation_{ablation.kind}.png", [r["variant"] for r in table],
                [r["mean_return"] for r in table], [r["std_return"] for r in table], "return",
                f"{ablation.kind} ablation")
    if probe is not None:
        paths["probe_series"] = write_series(
            out / f"{prefix}_probe.txt",
            {"horizon": list(probe.horizons), "one_step_error": list(probe.one_step_error),
             "direct_error": list(probe.direct_error)}, comment="feature-sum prediction error vs horizon")
        if figures:
            fig, ax = plt.subplots(figsize=(4.5, 3.5))
            ax.plot(probe.horizons, probe.one_step_error, "o-", label="one-step model, open loop")
            ax.plot(probe.horizons, probe.direct_error, "s-", label="direct outcome model")
            ax.set_xlabel("horizon")
            ax.set_ylabel("mean error")
            ax.legend(fontsize=8)
            fig.tight_layout()
            paths["probe_figure"] = out / f"{prefix}_probe.png"
            fig.savefig(paths["probe_figure"], dpi=100)
            plt.close(fig)
    return paths


def load_records(path: str | Path) -> list[dict]:
    """Records written as JSON lines (one ``ResultsRecord.to_dict()`` per line)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(ln) for ln in lines if ln.strip()]


def write_records(path: str | Path, records) -> Path:
    path = Path(path)
    path.write_text("".join(json.dumps(_as_dict(r), sort_keys=True) + "\n" for r in records), encoding="utf-8")
    return path
