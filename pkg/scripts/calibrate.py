"""Calibration for the desk-scale directional checks.

Runs every variant the acceptance module compares on configs/desk.yaml and
writes per-seed final accuracies to calibration/desk.json.  Thresholds in
tests/test_acceptance.py were pinned from this file.

    python scripts/calibrate.py [--seeds 5] [--out calibration/desk.json]
"""

import argparse
import json
import platform
import sys
from pathlib import Path

import numpy as np

from fedaf import config
from fedaf.sweep import SweepCache

ROOT = Path(__file__).resolve().parents[1]

VARIANTS = {
    "fedaf": {},
    "feddm": {"algorithm": "feddm"},
    "fedavg": {"algorithm": "fedavg"},
    "no_cdc": {"disable_cdc": True},
    "no_lgkm": {"disable_lgkm": True},
    "gamma_0.2": {"gamma": 0.2},
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.yaml"))
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default=str(ROOT / "calibration" / "desk.json"))
    args = ap.parse_args(argv)

    cfg = config.load(args.config)
    cache = SweepCache(cfg, VARIANTS)
    seeds = range(args.seeds)
    out = {"config": cfg, "python": platform.python_version(), "numpy": np.__version__, "variants": {}}
    for name in VARIANTS:
        runs = [cache.run(name, s) for s in seeds]
        finals = [r.final for r in runs]
        out["variants"][name] = {
            "overrides": VARIANTS[name],
            "final": finals,
            "mean_first3": float(np.mean(finals[:3])),
            "mean": float(np.mean(finals)),
            "curves": [list(r.accuracies) for r in runs],
            "seconds": [round(r.seconds, 1) for r in runs],
        }
        print(f"{name:<10} mean {np.mean(finals):.4f} finals {np.round(finals, 4).tolist()}", file=sys.stderr, flush=True)
    Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
