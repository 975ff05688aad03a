"""Server side: knowledge aggregation, global training on condensed data, evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .condensation import ClassRows, ClientPayload
from .model import ModelParams, forward_logits
from .rng import stream

PROB_FLOOR = 1e-8


@dataclass
class GlobalKnowledge:
    mean_logits: ClassRows | None
    soft_labels: ClassRows | None
    logit_contributors: np.ndarray | None = None
    label_contributors: np.ndarray | None = None


@dataclass(frozen=True)
class ServerTrainConfig:
    epochs: int = 500
    batch_size: int = 256
    lr: float = 0.001
    momentum: float = 0.9
    lam_glob: float = 0.0
    tau: float = 1.0
    lgkm_every_batch: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0 or not self.tau > 0:
            raise ValueError(f"invalid server config {self}")


def _average_rows(payloads: Sequence[ClientPayload], attr: str) -> tuple[ClassRows, np.ndarray]:
    if not payloads:
        raise ValueError("need at least one payload")
    rows = [getattr(p, attr) for p in sorted(payloads, key=lambda p: p.client_id)]
    if any(r is None for r in rows):
        raise ValueError(f"payload without {attr}")
    shape = rows[0].values.shape
    total = np.zeros(shape, dtype=np.float64)
    counts = np.zeros(shape[0], dtype=np.int64)
    for r in rows:
        if r.values.shape != shape:
            raise ag.ShapeError("aggregate", r.values.shape, shape)
        total[r.present] += r.values[r.present]
        counts += r.present
    present = counts > 0
    values = np.zeros(shape, dtype=np.float32)
    values[present] = (total[present] / counts[present, None]).astype(np.float32)
    return ClassRows(values, present), counts


def aggregate_mean_logits(payloads: Sequence[ClientPayload]) -> tuple[ClassRows, np.ndarray]:
    """Per-class average of client mean logits over the clients that own the class.

    Clients are reduced in ascending id order, so the result does not depend
    on arrival order.  Returns the rows and the contributor count per class.
    """
    return _average_rows(payloads, "mean_logits")


def aggregate_soft_labels(payloads: Sequence[ClientPayload]) -> tuple[ClassRows, np.ndarray]:
    return _average_rows(payloads, "soft_labels")


def _pool_by_class(images: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): images[labels == c] for c in np.unique(labels)}


def global_soft_labels(
    params: ModelParams,
    pooled: Mapping[int, object],
    tau: float,
    classes: Sequence[int] | None = None,
) -> Tensor:
    """Softened softmax of the pooled per-class mean logits, one row per class.

    Rows follow ``classes`` (default: sorted keys of ``pooled``).
    """
    classes = sorted(pooled) if classes is None else list(classes)
    missing = [c for c in classes if c not in pooled or len(pooled[c]) == 0]
    if missing:
        raise ValueError(f"global_soft_labels: classes {missing} absent from the condensed pool")
    means = []
    for c in classes:
        x = pooled[c]
        means.append(ag.mean_over_axis(forward_logits(params, x if isinstance(x, Tensor) else Tensor(x)), 0))
    return ag.softmax(ag.stack(means), tau)


def _floored(p: Tensor) -> Tensor:
    return ag.normalize_rows(ag.clamp_min(p, PROB_FLOOR))


def lgkm_loss(r, t) -> Tensor:
    """Symmetric KL divergence between two stacks of distributions.

    Each row contributes ``(KL(r||t) + KL(t||r)) / 2``, computed as
    ``sum((r - t) * (log r - log t)) / 2`` so the result is exactly symmetric;
    rows are averaged.  Probabilities are floored at 1e-8 and renormalized
    before taking logs.
    """
    r, t = ag.as_tensor(r), ag.as_tensor(t)
    if r.ndim == 1:
        r, t = ag.reshape(r, (1, -1)), ag.reshape(t, (1, -1))
    if r.shape != t.shape or r.ndim != 2 or r.shape[0] == 0:
        raise ag.ShapeError("lgkm_loss", r.shape, t.shape)
    r, t = _floored(r), _floored(t)
    d = ag.mul(ag.sub(r, t), ag.sub(ag.log(r), ag.log(t)))
    return ag.scale(ag.sum_all(d), 0.5 / r.shape[0])


def _lgkm_term(params, pooled, knowledge: ClassRows, tau):
    classes = [c for c in sorted(pooled) if knowledge.present[c]]
    if not classes:
        return None
    t = global_soft_labels(params, pooled, tau, classes)
    r = knowledge.values[classes].astype(t.data.dtype)
    return lgkm_loss(r, t)


def train_global(
    params: ModelParams,
    images: np.ndarray,
    labels: np.ndarray,
    soft: ClassRows | None,
    cfg: ServerTrainConfig,
    seed: int = 0,
) -> tuple[ModelParams, list[float]]:
    """Train on pooled condensed images with CE plus the soft-label matching term.

    Every epoch shuffles the pool and runs mini-batch SGD-momentum on
    cross-entropy.  When ``cfg.lam_glob > 0`` the server soft labels are
    recomputed from the current weights and ``lam_glob * lgkm`` is added to the
    first batch of the epoch (or to every batch with ``lgkm_every_batch``).
    Returns the final parameters and the mean loss of each epoch.
    """
    images = np.asarray(images, dtype=ag._dtype())
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("train_global: empty condensed pool")
    use_lgkm = cfg.lam_glob != 0 and soft is not None
    pooled = _pool_by_class(images, labels) if use_lgkm else None
    rng = stream(seed, "server-shuffle")
    values = params.values()
    velocity = None
    trace = []
    n = len(images)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            current = params.with_values(values)
            with Tape() as tape:
                tape.watch(*values)
                loss = ag.cross_entropy(forward_logits(current, images[idx]), labels[idx])
                if use_lgkm and (b == 0 or cfg.lgkm_every_batch):
                    reg = _lgkm_term(current, pooled, soft, cfg.tau)
                    if reg is not None:
                        loss = ag.scalar_combine([loss, reg], [1.0, cfg.lam_glob])
            grads = tape.gradient(loss, values)
            values, velocity = ag.sgd_momentum_step(values, grads, cfg.lr, cfg.momentum, velocity)
            losses.append(loss.item())
        trace.append(float(np.mean(losses)))
    return params.with_values(values), trace


def evaluate(params: ModelParams, images, labels, batch_size: int = 1024) -> float:
    """Top-1 accuracy; ties go to the lowest class index."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("evaluate: empty test set")
    images = np.asarray(images)
    if images.dtype == np.uint8:
        images = images.astype(np.float32) / np.float32(255)
    hits = 0
    for start in range(0, len(labels), batch_size):
        logits = forward_logits(params, images[start : start + batch_size]).data
        hits += int(np.sum(np.argmax(logits, axis=1) == labels[start : start + batch_size]))
    return hits / len(labels)
