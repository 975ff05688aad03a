"""Aggregate finished run directories into a comparison table and merged curves."""

from __future__ import annotations

import copy
import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .experiment import METRICS_FILE, SUMMARY_FILE, read_metrics


class IncompatibleRuns(ValueError):
    pass


@dataclass
class RunSummary:
    directory: Path
    summary: dict
    metrics: list[tuple[int, str, str, float]]

    @property
    def config(self) -> dict:
        return self.summary["config"]

    @property
    def group(self) -> tuple[str, float, int]:
        c = self.config
        return (c["federation"]["algorithm"], c["dataset"]["partition"]["alpha"], c["federation"]["ipc"])


def load_run(directory) -> RunSummary:
    d = Path(directory)
    try:
        summary = json.loads((d / SUMMARY_FILE).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{d}: no readable {SUMMARY_FILE} ({exc})") from exc
    return RunSummary(d, summary, read_metrics(d / METRICS_FILE))


def compatibility_key(cfg: dict) -> str:
    """Dataset and model description with the knobs that legitimately vary
    between compared runs (seeds, alpha) removed."""
    ds = copy.deepcopy(cfg["dataset"])
    ds["synth"].pop("seed", None)
    ds["partition"] = {"clients": ds["partition"]["clients"]}
    if ds["source"] == "synth":
        ds.pop("idx")
    else:
        ds.pop("synth")
    model = dict(cfg["model"])
    if model["arch"] == "convnet":
        model.pop("hidden")
    else:
        model.pop("width")
    return json.dumps({"dataset": ds, "model": model}, sort_keys=True)


def check_compatible(runs: list[RunSummary]) -> None:
    keys = {compatibility_key(r.config): r.directory for r in runs}
    if len(keys) > 1:
        dirs = ", ".join(str(d) for d in keys.values())
        raise IncompatibleRuns(f"runs use different dataset/model settings: {dirs}")


def comparison_table(runs: list[RunSummary]) -> list[dict]:
    """Mean and population std of final/best accuracy per (algorithm, alpha, IPC)."""
    groups: dict[tuple, list[RunSummary]] = defaultdict(list)
    for r in runs:
        groups[r.group].append(r)
    table = []
    for (alg, alpha, ipc), members in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        final = np.array([m.summary["final_accuracy"] for m in members], dtype=np.float64)
        best = np.array([m.summary["best_accuracy"] for m in members], dtype=np.float64)
        table.append(
            {
                "algorithm": alg,
                "alpha": alpha,
                "ipc": ipc,
                "runs": len(members),
                "final_mean": float(final.mean()),
                "final_std": float(final.std()),
                "best_mean": float(best.mean()),
                "best_std": float(best.std()),
                "up_bytes_mean": float(np.mean([m.summary["total_up_bytes"] for m in members])),
            }
        )
    return table


def merged_curves(runs: list[RunSummary]) -> list[tuple]:
    rows = []
    for r in runs:
        alg, alpha, ipc = r.group
        seed = r.config["federation"]["seed"]
        for rnd, metric, client, value in r.metrics:
            rows.append((str(r.directory), alg, alpha, ipc, seed, rnd, metric, client, value))
    return rows


def format_table(table: list[dict]) -> str:
    lines = [f"{'algorithm':<10} {'alpha':>8} {'ipc':>5} {'runs':>5} {'final acc':>17} {'best acc':>17}"]
    for t in table:
        lines.append(
            f"{t['algorithm']:<10} {t['alpha']:>8g} {t['ipc']:>5d} {t['runs']:>5d} "
            f"{t['final_mean']:>8.4f} ± {t['final_std']:<6.4f} {t['best_mean']:>8.4f} ± {t['best_std']:<6.4f}"
        )
    return "\n".join(lines)


def write_report(run_dirs, output) -> list[dict]:
    """Write comparison.csv and curves.csv under ``output``; returns the table."""
    runs = [load_run(d) for d in run_dirs]
    if not runs:
        raise ValueError("need at least one run directory")
    check_compatible(runs)
    table = comparison_table(runs)
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(table[0]), lineterminator="\n")
        w.writeheader()
        for row in table:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    with open(out / "curves.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("run", "algorithm", "alpha", "ipc", "seed", "round", "metric", "client", "value"))
        for row in merged_curves(runs):
            w.writerow(row[:-1] + (repr(row[-1]),))
    return table
