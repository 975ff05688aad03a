"""Build a federation from a resolved config and persist its results."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .condensation import export_condensed
from .config import ConfigError, round_config
from .data import ClientShard, LabeledDataset, PartitionSpec, dirichlet_partition, load_idx, synth_blobs
from .federation import FederationState, RunResult, simulate, to_megabytes
from .model import Architecture, param_count, save_checkpoint

OUTPUT_ROOT_ENV = "FEDAF_OUTPUT_ROOT"
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
TIMING_FILE = "timing.json"
CSV_HEADER = ("round", "metric", "client", "value")


@dataclass
class Experiment:
    config: dict
    arch: Architecture
    train: LabeledDataset
    test: LabeledDataset
    shards: list[ClientShard]


def load_datasets(cfg: dict) -> tuple[LabeledDataset, LabeledDataset]:
    ds = cfg["dataset"]
    if ds["source"] == "idx":
        p = ds["idx"]
        train = load_idx(p["train_images"], p["train_labels"], p["num_classes"])
        test = load_idx(p["test_images"], p["test_labels"], p["num_classes"])
        return train, test
    s = ds["synth"]
    common = dict(classes=s["classes"], image_side=s["image_side"], noise_sigma=s["noise_sigma"], channels=s["channels"])
    train = synth_blobs(per_class=s["per_class"], seed=s["seed"], split="train", **common)
    test = synth_blobs(per_class=s["test_per_class"], seed=s["seed"], split="test", **common)
    return train, test


def build_architecture(cfg: dict, train: LabeledDataset) -> Architecture:
    m = cfg["model"]
    if m["arch"] == "convnet":
        return Architecture.convnet(train.image_shape, train.num_classes, width=m["width"])
    hidden = m["hidden"]
    if not all(isinstance(h, int) and not isinstance(h, bool) and h > 0 for h in hidden):
        raise ConfigError("model.hidden", "must be a list of positive integers")
    return Architecture.mlp(train.image_shape, train.num_classes, hidden=tuple(hidden))


def partition(cfg: dict, train: LabeledDataset) -> list[ClientShard]:
    p = cfg["dataset"]["partition"]
    try:
        spec = PartitionSpec(p["alpha"], p["clients"], p["seed"], p["min_samples"], p["max_redraws"])
    except ValueError as exc:
        raise ConfigError("dataset.partition", str(exc)) from exc
    return dirichlet_partition(train, spec)


def build(cfg: dict) -> Experiment:
    train, test = load_datasets(cfg)
    arch = build_architecture(cfg, train)
    return Experiment(cfg, arch, train, test, partition(cfg, train))


def output_directory(cfg: dict) -> Path:
    d = Path(cfg["output"]["directory"]).expanduser()
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not d.is_absolute():
        d = Path(root) / d
    return d


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _fmt(value) -> str:
    return str(value) if isinstance(value, int) else repr(float(value))


def metrics_csv(result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for rnd, metric, client, value in result.metric_rows():
        w.writerow((rnd, metric, client, _fmt(value)))
    return buf.getvalue()


def summary(exp: Experiment, result: RunResult) -> dict:
    up, down = result.total_up_bytes, result.total_down_bytes
    return {
        "algorithm": exp.config["federation"]["algorithm"],
        "rounds_completed": len(result.records),
        "final_accuracy": result.final_accuracy,
        "best_accuracy": result.best_accuracy,
        "total_up_bytes": up,
        "total_down_bytes": down,
        "total_up_mb": {"binary": to_megabytes(up), "decimal": to_megabytes(up, binary=False)},
        "total_down_mb": {"binary": to_megabytes(down), "decimal": to_megabytes(down, binary=False)},
        "param_count": param_count(exp.arch),
        "seeds": result.seeds,
        "clients": [
            {"client": s.client_id, "samples": len(s), "class_counts": s.class_counts.tolist()} for s in exp.shards
        ],
        "config": exp.config,
    }


def run_experiment(cfg: dict, directory: Path | None = None) -> RunResult:
    """Run ``cfg`` and write metrics.csv, summary.json and timing.json to ``directory``.

    metrics.csv is rewritten atomically after every round, so readers never see
    a half-written round.  Wall-clock times go to timing.json only, keeping the
    other two files byte-identical across reruns.
    """
    exp = build(cfg)
    directory = output_directory(cfg) if directory is None else Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rc = round_config(cfg)
    export = cfg["output"]["export_condensed"]

    def on_round(state: FederationState):
        partial = RunResult(state.records, {})
        _atomic_write(directory / METRICS_FILE, metrics_csv(partial))
        if export:
            for cset in state.condensed.values():
                export_condensed(cset, directory / "condensed", state.round)

    result = simulate(rc, exp.arch, exp.train, exp.test, exp.shards, on_round=on_round)
    _atomic_write(directory / METRICS_FILE, metrics_csv(result))
    _atomic_write(directory / SUMMARY_FILE, json.dumps(summary(exp, result), indent=2, sort_keys=True) + "\n")
    timing = {"round_seconds": [rec.wall_time for rec in result.records]}
    _atomic_write(directory / TIMING_FILE, json.dumps(timing, indent=2) + "\n")
    if cfg["output"]["save_model"]:
        save_checkpoint(result.final_params, directory / "model.ckpt")
    return result


def read_metrics(path) -> list[tuple[int, str, str, float]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"{path}: not a metrics file")
    return [(int(r), m, c, float(v)) for r, m, c, v in rows[1:]]
