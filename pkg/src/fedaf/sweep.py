"""Repeat one config over seeds and named federation variants.

A seed ``s`` replaces the data, partition and federation seeds together, so
seed ``s`` of every variant sees the same dataset and client split.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass

from .config import ConfigError, resolve, round_config
from .experiment import build
from .federation import simulate


@dataclass(frozen=True)
class SweepRun:
    variant: str
    seed: int
    accuracies: tuple[float, ...]
    seconds: float

    @property
    def final(self) -> float:
        return self.accuracies[-1]


def seeded(cfg: dict, seed: int, **federation) -> dict:
    out = copy.deepcopy(cfg)
    out["dataset"]["synth"]["seed"] = seed
    out["dataset"]["partition"]["seed"] = seed
    out["federation"]["seed"] = seed
    unknown = set(federation) - set(out["federation"])
    if unknown:
        raise ConfigError(f"federation.{sorted(unknown)[0]}", "unknown key")
    out["federation"].update(federation)
    return resolve(out)


def run_variant(cfg: dict, variant: str, seed: int, **federation) -> SweepRun:
    c = seeded(cfg, seed, **federation)
    exp = build(c)
    start = time.perf_counter()
    result = simulate(round_config(c), exp.arch, exp.train, exp.test, exp.shards)
    return SweepRun(variant, seed, tuple(result.accuracies), time.perf_counter() - start)


class SweepCache:
    """Memoizes (variant, seed) runs so overlapping comparisons share work."""

    def __init__(self, cfg: dict, variants: dict[str, dict]):
        self.cfg = cfg
        self.variants = variants
        self._runs: dict[tuple[str, int], SweepRun] = {}

    def run(self, variant: str, seed: int) -> SweepRun:
        key = (variant, seed)
        if key not in self._runs:
            self._runs[key] = run_variant(self.cfg, variant, seed, **self.variants[variant])
        return self._runs[key]

    def finals(self, variant: str, seeds) -> list[float]:
        return [self.run(variant, s).final for s in seeds]

    def runs(self) -> list[SweepRun]:
        return sorted(self._runs.values(), key=lambda r: (r.variant, r.seed))
