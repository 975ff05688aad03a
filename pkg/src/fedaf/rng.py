"""Named, reproducible random streams.

Every random draw in the simulator goes through :func:`stream`, which builds a
``numpy.random.Generator`` on the Philox-4x64 counter-based bit generator.
The key is a ``SeedSequence`` whose entropy is ``[seed, *path]``; string path
components are mapped to integers with CRC-32 so keys are stable across
processes and platforms.  Two streams with different paths are statistically
independent, and a stream never depends on how many draws other streams made.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"stream key components must be non-negative, got {part}")
    return int(part)


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Return the generator for ``seed`` and the named sub-stream ``path``."""
    entropy = [_key(seed)] + [_key(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def subseed(seed: int, *path: int | str) -> int:
    """Derive a 63-bit integer seed for handing to another component."""
    return int(stream(seed, *path).integers(0, 2**63 - 1))
