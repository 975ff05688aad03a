"""Finite-difference gradient checking shared by the test modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedaf import autograd as ag
from fedaf.autograd import Tape, Tensor

H = 1e-3
RTOL = 1e-3


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / (abs(numeric) + 1e-6)


@dataclass
class ProbeReport:
    errors: list[float]
    skipped: int

    @property
    def worst(self) -> float:
        return max(self.errors) if self.errors else 0.0


def _numeric(fn, arrays, which, idx, h):
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[which][idx] += h
    minus[which][idx] -= h
    fp = fn(*[Tensor(a) for a in plus]).item()
    fm = fn(*[Tensor(a) for a in minus]).item()
    return (fp - fm) / (2 * h)


def check_gradients(fn, arrays, probes: int, rng: np.random.Generator, wrt=None, max_skip_ratio=0.5) -> ProbeReport:
    """Compare tape gradients of scalar ``fn(*tensors)`` with central differences.

    Runs in float64.  A probe whose central difference at ``h`` and ``h/2``
    disagree is straddling a non-differentiable point (a ReLU or sort kink)
    and is redrawn; the redraw count is reported so callers can bound it.
    """
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    with ag.precision(np.float64):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        leaves = [Tensor(a) for a in arrays]
        with Tape() as tape:
            tape.watch(*[leaves[i] for i in wrt])
            loss = fn(*leaves)
        grads = tape.gradient(loss, [leaves[i] for i in wrt])
        errors, skipped = [], 0
        while len(errors) < probes:
            if skipped > max_skip_ratio * probes + 10:
                raise AssertionError(f"too many kink probes ({skipped})")
            which = wrt[rng.integers(len(wrt))]
            idx = tuple(int(rng.integers(s)) for s in arrays[which].shape)
            n1 = _numeric(fn, arrays, which, idx, H)
            n2 = _numeric(fn, arrays, which, idx, H / 2)
            if rel_error(n1, n2) > RTOL / 4:
                skipped += 1
                continue
            errors.append(rel_error(float(grads[leaves[which]].data[idx]), n1))
    return ProbeReport(errors, skipped)
