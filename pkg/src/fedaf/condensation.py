"""Client-side condensed-data learning and the client upload.

A client keeps ``ipc`` learnable images for each class it owns and refines
them by matching real/synthetic feature means (distribution matching).  The
collaborative term additionally pulls the class-mean logits of the synthetic
images towards the federation-wide mean logits using a sliced Wasserstein
distance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .data import normalize, quantize, write_idx_images, write_idx_labels
from .model import ModelParams, classify, forward_features, forward_logits, resample
from .rng import stream, subseed


@dataclass
class ClassRows:
    """A C x C matrix whose rows may be individually absent.

    Used for class-wise mean logits and soft labels; absent rows are zero.
    """

    values: np.ndarray
    present: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.present = np.asarray(self.present, dtype=bool)
        if self.values.ndim != 2 or self.present.shape != (self.values.shape[0],):
            raise ValueError(f"bad ClassRows shapes {self.values.shape}, {self.present.shape}")

    @classmethod
    def from_dict(cls, rows: Mapping[int, np.ndarray], num_classes: int, width: int | None = None):
        width = num_classes if width is None else width
        values = np.zeros((num_classes, width), dtype=np.float32)
        present = np.zeros(num_classes, dtype=bool)
        for c, row in rows.items():
            values[c] = row.data if isinstance(row, Tensor) else row
            present[c] = True
        return cls(values, present)

    @property
    def classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.present)]

    def row(self, c: int) -> np.ndarray:
        if not self.present[c]:
            raise KeyError(f"class {c} is absent")
        return self.values[c]

    @property
    def nbytes(self) -> int:
        return 4 * self.values.size


@dataclass
class CondensedSet:
    client_id: int
    images: dict[int, Tensor]

    @property
    def classes(self) -> list[int]:
        return sorted(self.images)

    @property
    def ipc(self) -> int:
        return len(next(iter(self.images.values()))) if self.images else 0

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All images stacked in class order, with their labels."""
        cs = self.classes
        x = np.concatenate([self.images[c].data for c in cs])
        y = np.concatenate([np.full(len(self.images[c]), c, dtype=np.int64) for c in cs])
        return x, y

    def as_bytes(self) -> tuple[np.ndarray, np.ndarray]:
        x, y = self.arrays()
        return quantize(x), y

    @property
    def nbytes(self) -> int:
        # one byte per pixel per channel on the wire
        return int(sum(t.size for t in self.images.values()))


@dataclass(frozen=True)
class SWDConfig:
    projections: int = 64
    p: float = 2.0
    pooled: bool = False

    def __post_init__(self):
        if self.projections < 1:
            raise ValueError("need at least one projection")
        if not self.p >= 1:
            raise ValueError("p must be >= 1")


@dataclass(frozen=True)
class ClientPayload:
    """What a client uploads.  There is deliberately no field for raw data."""

    client_id: int
    condensed: CondensedSet
    class_counts: np.ndarray
    mean_logits: ClassRows | None = None
    soft_labels: ClassRows | None = None
    stats: dict = field(default_factory=dict, compare=False)


def _images(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    x = np.asarray(x)
    return Tensor(normalize(x) if x.dtype == np.uint8 else x)


def _nonempty(batches: Mapping[int, object], what: str):
    if not batches:
        raise ValueError(f"{what}: no classes given")
    for c, b in batches.items():
        if len(b) == 0:
            raise ValueError(f"{what}: class {c} has an empty batch")


def class_feature_means(params: ModelParams, batches: Mapping[int, object]) -> dict[int, Tensor]:
    """Mean feature vector of each class batch."""
    _nonempty(batches, "class_feature_means")
    return {c: ag.mean_over_axis(forward_features(params, _images(b)), 0) for c, b in sorted(batches.items())}


def class_mean_logits(params: ModelParams, batches: Mapping[int, object]) -> dict[int, Tensor]:
    """Mean logit vector of each class batch."""
    _nonempty(batches, "class_mean_logits")
    return {c: ag.mean_over_axis(forward_logits(params, _images(b)), 0) for c, b in sorted(batches.items())}


def mean_logit_rows(params: ModelParams, batches: Mapping[int, object]) -> ClassRows:
    means = class_mean_logits(params, batches)
    return ClassRows.from_dict(means, params.arch.num_classes)


def soft_labels(rows: ClassRows, tau: float) -> ClassRows:
    """Temperature-softened softmax of every present row."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    out = np.zeros_like(rows.values)
    if rows.present.any():
        out[rows.present] = ag.softmax(rows.values[rows.present], tau).data
    return ClassRows(out, rows.present.copy())


def _embed_syn(params: ModelParams, syn: Mapping[int, Tensor]):
    """One forward pass over every synthetic class; returns per-class row slices."""
    classes = sorted(syn)
    x = ag.concat([syn[c] for c in classes]) if len(classes) > 1 else syn[classes[0]]
    feats = forward_features(params, x)
    spans, start = {}, 0
    for c in classes:
        spans[c] = (start, start + len(syn[c]))
        start += len(syn[c])
    return feats, spans


def _dm_terms(params, syn, real_means: Mapping[int, np.ndarray]):
    feats, spans = _embed_syn(params, syn)
    terms = []
    for c, (a, b) in spans.items():
        mu_syn = ag.mean_over_axis(ag.rows(feats, a, b), 0)
        terms.append(ag.squared_l2(mu_syn, real_means[c]))
    return feats, spans, terms


def _real_means(params, real: Mapping[int, object]) -> dict[int, np.ndarray]:
    # one forward pass over all classes; real data never needs gradients
    _nonempty(real, "real batches")
    classes = sorted(real)
    arrays = [_images(real[c]).data for c in classes]
    feats = forward_features(params, Tensor(np.concatenate(arrays))).data
    out, start = {}, 0
    for c, a in zip(classes, arrays):
        out[c] = feats[start : start + len(a)].mean(axis=0, dtype=np.float64).astype(feats.dtype)
        start += len(a)
    return out


def _check_aligned(syn, real, what):
    if not syn:
        raise ValueError(f"{what}: no owned classes")
    if sorted(syn) != sorted(real):
        raise ValueError(f"{what}: synthetic classes {sorted(syn)} vs real classes {sorted(real)}")


def dm_loss(params: ModelParams, syn: Mapping[int, Tensor], real: Mapping[int, object]) -> Tensor:
    """Sum over classes of squared distance between real and synthetic feature means."""
    _check_aligned(syn, real, "dm_loss")
    _, _, terms = _dm_terms(params, syn, _real_means(params, real))
    return ag.scalar_combine(terms, [1.0] * len(terms))


def random_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """``count`` unit vectors drawn uniformly from the sphere in R^dim, shape (dim, count)."""
    g = rng.normal(size=(count, dim))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    while np.any(norms == 0):
        bad = (norms == 0)[:, 0]
        g[bad] = rng.normal(size=(int(bad.sum()), dim))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
    return (g / norms).T


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(0 if rng is None else int(rng), "swd-projections")


def sliced_wasserstein(u, v, projections: int = 64, p: float = 2.0, rng=None) -> Tensor:
    """Sliced p-Wasserstein distance between two equal-size point sets.

    ``u`` and ``v`` are (n, d) sets or single d-vectors.  Each random unit
    direction projects both sets to the line, where the optimal matching is
    the sorted order.  Returns ``(mean over directions of W_p^p) ** (1/p)``.
    ``rng`` is a Generator or an integer seed; a seed always yields the same
    directions.
    """
    u, v = ag.as_tensor(u), ag.as_tensor(v)
    if u.ndim == 1:
        u = ag.reshape(u, (1, -1))
    if v.ndim == 1:
        v = ag.reshape(v, (1, -1))
    if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
        raise ag.ShapeError("sliced_wasserstein", u.shape, v.shape, detail="dimension mismatch")
    if u.shape[0] == 0 or v.shape[0] == 0:
        raise ag.ShapeError("sliced_wasserstein", u.shape, v.shape, detail="empty set")
    if u.shape[0] != v.shape[0]:
        raise ag.ShapeError("sliced_wasserstein", u.shape, v.shape, detail="sets must have equal size")
    if projections < 1 or not p >= 1:
        raise ValueError("need projections >= 1 and p >= 1")
    theta = Tensor(random_directions(_as_rng(rng), projections, u.shape[1]).astype(u.data.dtype))
    pu, pv = ag.matmul(u, theta), ag.matmul(v, theta)
    if u.shape[0] > 1:
        pu, pv = ag.sort(pu, 0), ag.sort(pv, 0)
    diff = ag.sub(pu, pv)
    powered = ag.mul(diff, diff) if p == 2 else ag.power(ag.absolute(diff), p)
    return ag.power(ag.mean_all(powered), 1.0 / p)


def cdc_loss(
    params: ModelParams,
    syn: Mapping[int, Tensor],
    real: Mapping[int, object],
    global_logits: ClassRows | None,
    lam_loc: float,
    swd: SWDConfig = SWDConfig(),
    rng=None,
    real_means: Mapping[int, np.ndarray] | None = None,
) -> Tensor:
    """Distribution-matching loss plus ``lam_loc`` times the logit-alignment term.

    The alignment term sums, over owned classes, the sliced Wasserstein
    distance between the synthetic class-mean logits and the global mean
    logits.  With ``swd.pooled`` the owned classes are instead treated as two
    point sets and a single distance is taken.
    """
    _check_aligned(syn, real, "cdc_loss")
    if real_means is None:
        real_means = _real_means(params, real)
    feats, spans, terms = _dm_terms(params, syn, real_means)
    coeffs = [1.0] * len(terms)
    if lam_loc == 0:
        return ag.scalar_combine(terms, coeffs)
    if global_logits is None:
        raise ValueError("cdc_loss: global mean logits required when lam_loc != 0")
    missing = [c for c in spans if not global_logits.present[c]]
    if missing:
        raise ValueError(f"cdc_loss: global mean logits absent for classes {missing}")
    logits = classify(params, feats)
    u = {c: ag.mean_over_axis(ag.rows(logits, a, b), 0) for c, (a, b) in spans.items()}
    rng = _as_rng(rng)
    if swd.pooled:
        cs = sorted(u)
        target = np.stack([global_logits.row(c) for c in cs]).astype(logits.data.dtype)
        terms.append(sliced_wasserstein(ag.stack([u[c] for c in cs]), target, swd.projections, swd.p, rng))
        coeffs.append(lam_loc)
    else:
        for c in sorted(u):
            target = global_logits.row(c).astype(logits.data.dtype)
            terms.append(sliced_wasserstein(u[c], target, swd.projections, swd.p, rng))
            coeffs.append(lam_loc)
    return ag.scalar_combine(terms, coeffs)


class _ClassSampler:
    """Without-replacement batches from one class, reshuffled every epoch."""

    def __init__(self, data: np.ndarray, batch: int, rng: np.random.Generator):
        self.data = data
        self.batch = batch
        self.rng = rng
        self.order = None
        self.pos = 0

    def next(self) -> np.ndarray:
        n = len(self.data)
        if n <= self.batch:
            return self.data
        if self.order is None or self.pos + self.batch > n:
            self.order = self.rng.permutation(n)
            self.pos = 0
        idx = self.order[self.pos : self.pos + self.batch]
        self.pos += self.batch
        return self.data[idx]


def init_condensed(
    client_id: int,
    real: Mapping[int, np.ndarray],
    ipc: int,
    seed: int,
    draws: int | None = None,
) -> CondensedSet:
    """Start each synthetic image as the pixel average of randomly drawn real images.

    By default each image averages ``max(1, N_c // ipc)`` images (never more
    than N_c), drawn without replacement; a larger explicit ``draws`` samples
    with replacement.
    """
    if ipc < 1:
        raise ValueError("ipc must be >= 1")
    images = {}
    for c in sorted(real):
        x = np.asarray(real[c])
        if len(x) == 0:
            raise ValueError(f"class {c} is not owned by client {client_id}")
        x = normalize(x) if x.dtype == np.uint8 else x.astype(np.float32)
        n = len(x)
        r = min(max(1, n // ipc), n) if draws is None else draws
        rng = stream(seed, "init-condensed", client_id, c)
        out = np.empty((ipc,) + x.shape[1:], dtype=np.float32)
        for i in range(ipc):
            pick = rng.choice(n, size=r, replace=r > n)
            out[i] = x[pick].mean(axis=0, dtype=np.float64)
        images[c] = Tensor(np.clip(out, 0.0, 1.0))
    return CondensedSet(client_id, images)


def condense(
    cset: CondensedSet,
    real: Mapping[int, np.ndarray],
    params: ModelParams,
    global_logits: ClassRows | None = None,
    *,
    steps: int,
    batch_real: int = 256,
    image_lr: float = 1.0,
    momentum: float = 0.9,
    gamma: float = 0.9,
    lam_loc: float = 0.0,
    swd: SWDConfig = SWDConfig(),
    seed: int = 0,
) -> tuple[CondensedSet, list[float]]:
    """Run ``steps`` optimizer steps on the synthetic pixels.

    Each step re-samples the backbone from ``params``, draws a real batch per
    owned class, evaluates :func:`cdc_loss`, takes one SGD-momentum step on the
    pixels and clamps them to [0, 1].  Returns the new set and the per-step
    losses; ``params`` and ``real`` are never modified.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return cset, []
    classes = cset.classes
    real_f = {}
    for c in classes:
        x = np.asarray(real[c])
        real_f[c] = normalize(x) if x.dtype == np.uint8 else x
    sample_rng = stream(seed, "real-batches")
    samplers = {c: _ClassSampler(real_f[c], batch_real, sample_rng) for c in classes}
    proj_rng = stream(seed, "swd-projections")

    syn = [cset.images[c] for c in classes]
    velocity = None
    trace = []
    for step in range(steps):
        backbone = params if gamma == 1.0 else resample(params, gamma, subseed(seed, "resample", step))
        batch = {c: samplers[c].next() for c in classes}
        means = _real_means(backbone, batch)
        with Tape() as tape:
            tape.watch(*syn)
            loss = cdc_loss(
                backbone,
                dict(zip(classes, syn)),
                batch,
                global_logits,
                lam_loc,
                swd,
                proj_rng,
                real_means=means,
            )
        grads = tape.gradient(loss, syn)
        stepped, velocity = ag.sgd_momentum_step(syn, grads, image_lr, momentum, velocity)
        syn = [Tensor._wrap(np.clip(t.data, 0.0, 1.0)) for t in stepped]
        trace.append(loss.item())
    return CondensedSet(cset.client_id, dict(zip(classes, syn))), trace


def export_condensed(cset: CondensedSet, directory, round_index: int) -> Path:
    """Write the set as IDX image/label files plus a JSON sidecar; returns the sidecar path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = f"client{cset.client_id:03d}_round{round_index:03d}"
    images, labels = cset.as_bytes()
    write_idx_images(images, directory / f"{stem}-images.idx")
    write_idx_labels(labels, directory / f"{stem}-labels.idx")
    meta = {
        "client_id": cset.client_id,
        "round": round_index,
        "ipc": cset.ipc,
        "classes": cset.classes,
        "image_shape": list(images.shape[1:]),
    }
    sidecar = directory / f"{stem}.json"
    sidecar.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return sidecar
