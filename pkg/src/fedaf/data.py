"""Datasets, byte<->float conversion and Dirichlet label-skew partitioning."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_IMAGES4_MAGIC = 0x00000804  # (N, C, H, W), used for multi-channel exports
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # uint8, (N, C, H, W)
    labels: np.ndarray  # int64, (N,)
    num_classes: int

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise ValueError("images must be a uint8 array shaped (N, C, H, W)")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels) or len(self.labels) == 0:
            raise CountMismatchError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("label outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == c) for c in range(self.num_classes)]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)


def _read_header(raw: bytes, path, magic: int, ndims: int) -> tuple[int, ...]:
    if len(raw) < 4 + 4 * ndims:
        raise TruncatedFileError(f"{path}: header truncated")
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise BadMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack_from(f">{ndims}I", raw, 4)


def _read_images(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: header truncated")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic == IDX_IMAGES4_MAGIC:
        dims = _read_header(raw, path, IDX_IMAGES4_MAGIC, 4)
    else:
        n, rows, cols = _read_header(raw, path, IDX_IMAGES_MAGIC, 3)
        dims = (n, 1, rows, cols)
    offset = 4 + 4 * (len(dims) if magic == IDX_IMAGES4_MAGIC else 3)
    count = int(np.prod(dims))
    if len(raw) - offset < count:
        raise TruncatedFileError(f"{path}: expected {count} pixel bytes, found {len(raw) - offset}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset).reshape(dims).copy()


def load_idx(image_path, label_path, num_classes: int | None = None) -> LabeledDataset:
    """Read an IDX image/label file pair (the MNIST distribution format).

    Images are unsigned-byte 3-D (magic 0x00000803, returned as (N, 1, H, W))
    or 4-D (0x00000804, (N, C, H, W)); labels unsigned-byte 1-D (0x00000801).
    """
    images = _read_images(image_path)
    raw_lbl = Path(label_path).read_bytes()
    (n_lbl,) = _read_header(raw_lbl, label_path, IDX_LABELS_MAGIC, 1)
    if len(raw_lbl) - 8 < n_lbl:
        raise TruncatedFileError(f"{label_path}: expected {n_lbl} labels, found {len(raw_lbl) - 8}")
    labels = np.frombuffer(raw_lbl, dtype=np.uint8, count=n_lbl, offset=8).astype(np.int64)

    if len(images) != n_lbl:
        raise CountMismatchError(f"{len(images)} images vs {n_lbl} labels")
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1, 2)
    return LabeledDataset(images, labels, num_classes)


def write_idx_images(images: np.ndarray, path) -> None:
    """Single-channel stacks are written 3-D (0x803), anything else 4-D (0x804)."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        raise ValueError("IDX images must be uint8")
    if images.ndim == 4 and images.shape[1] == 1:
        images = images[:, 0]
    if images.ndim == 3:
        header = struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape)
    elif images.ndim == 4:
        header = struct.pack(">5I", IDX_IMAGES4_MAGIC, *images.shape)
    else:
        raise ValueError(f"cannot write images shaped {images.shape}")
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(images).tobytes())


def write_idx_labels(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("IDX labels must fit in a byte")
    with open(path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def write_idx(ds: LabeledDataset, image_path, label_path) -> None:
    write_idx_images(ds.images, image_path)
    write_idx_labels(ds.labels, label_path)


def class_templates(classes: int, image_side: int, channels: int = 1) -> np.ndarray:
    """Deterministic per-class grating patterns in [0.1, 0.9].

    Class ``c`` is an oriented cosine grating with angle ``pi*c/classes`` and a
    class-dependent phase, so templates are pairwise distinct for any C.
    """
    yy, xx = np.mgrid[0:image_side, 0:image_side].astype(np.float64) / image_side
    out = np.empty((classes, channels, image_side, image_side))
    for c in range(classes):
        angle = np.pi * c / classes
        phase = 2 * np.pi * c / classes
        for ch in range(channels):
            freq = 1.5 + 0.5 * ch
            wave = np.cos(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase + ch)
            out[c, ch] = 0.5 + 0.4 * wave
    return out


def synth_blobs(
    classes: int,
    per_class: int,
    image_side: int,
    noise_sigma: float,
    seed: int,
    channels: int = 1,
    split: str = "train",
) -> LabeledDataset:
    """Class templates plus Gaussian pixel noise, quantized to bytes.

    ``noise_sigma`` is in [0, 1] pixel units.  Samples are ordered by class.
    Different ``split`` names draw independent noise around the same templates.
    """
    if classes < 2 or per_class < 1 or image_side < 2:
        raise ValueError("need classes >= 2, per_class >= 1, image_side >= 2")
    rng = stream(seed, "synth-blobs", split)
    templates = class_templates(classes, image_side, channels)
    labels = np.repeat(np.arange(classes), per_class)
    noise = rng.normal(0.0, 1.0, size=(len(labels), channels, image_side, image_side))
    pixels = templates[labels] + noise_sigma * noise
    return LabeledDataset(quantize(pixels), labels, classes)


def normalize(images) -> np.ndarray:
    """Bytes to float32 in [0, 1]; inverse of :func:`quantize`."""
    return np.asarray(images, dtype=np.uint8).astype(np.float32) / np.float32(255)


def quantize(x) -> np.ndarray:
    """Floats in [0, 1] to bytes, rounding to nearest and clamping."""
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class PartitionSpec:
    alpha: float
    clients: int
    seed: int
    min_samples: int = 1
    max_redraws: int = 1000

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.clients < 1:
            raise ValueError("need at least one client")


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray
    class_counts: np.ndarray

    def __len__(self):
        return len(self.indices)

    def owned_classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.class_counts)]


def _draw(labels_by_class, spec: PartitionSpec, attempt: int) -> list[list[np.ndarray]]:
    rng = stream(spec.seed, "dirichlet-partition", attempt)
    parts: list[list[np.ndarray]] = [[] for _ in range(spec.clients)]
    for idx in labels_by_class:
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(spec.clients, spec.alpha))
        if not np.all(np.isfinite(props)) or props.sum() <= 0:
            props = np.zeros(spec.clients)
            props[rng.integers(spec.clients)] = 1.0
        cuts = (np.cumsum(props) * len(idx)).astype(np.int64)[:-1]
        for k, chunk in enumerate(np.split(idx, cuts)):
            parts[k].append(chunk)
    return parts


def dirichlet_partition(ds: LabeledDataset, spec: PartitionSpec) -> list[ClientShard]:
    """Split ``ds`` across clients with per-class Dirichlet(alpha) proportions.

    A draw that leaves some client with fewer than ``spec.min_samples``
    samples is redrawn from the next sub-stream.  After ``spec.max_redraws``
    failures the last draw is kept and a warning is logged.
    """
    by_class = ds.class_indices()
    for attempt in range(spec.max_redraws + 1):
        parts = _draw(by_class, spec, attempt)
        sizes = [sum(len(p) for p in chunks) for chunks in parts]
        if min(sizes) >= spec.min_samples:
            break
    else:
        log.warning(
            "no partition with >= %d samples per client after %d redraws; keeping the last draw",
            spec.min_samples,
            spec.max_redraws,
        )
    shards = []
    for k, chunks in enumerate(parts):
        idx = np.sort(np.concatenate(chunks)).astype(np.int64)
        counts = np.bincount(ds.labels[idx], minlength=ds.num_classes)
        shards.append(ClientShard(k, idx, counts))
    return shards
