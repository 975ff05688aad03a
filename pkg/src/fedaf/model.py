"""The global model: a feature extractor followed by one linear classifier.

Two architectures are supported.  ``convnet`` stacks three
conv3x3-ReLU-avgpool2x2 blocks; ``mlp`` stacks affine-ReLU layers.  Both end
in a single affine classifier, and "features" always means the classifier's
input.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import stream

CONV_BLOCKS = 3
CHECKPOINT_MAGIC = b"FEDAFCK1"


@dataclass(frozen=True)
class Architecture:
    kind: str
    input_shape: tuple[int, int, int]
    widths: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if self.kind not in ("convnet", "mlp"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if any(w < 1 for w in self.widths):
            raise ValueError("widths must be positive")
        if self.kind == "convnet":
            if len(self.widths) != CONV_BLOCKS:
                raise ValueError(f"convnet needs {CONV_BLOCKS} widths, got {len(self.widths)}")
            _, h, w = self.input_shape
            if h >> CONV_BLOCKS < 1 or w >> CONV_BLOCKS < 1:
                raise ValueError(f"input {self.input_shape} too small for {CONV_BLOCKS} poolings")

    @classmethod
    def convnet(cls, input_shape, num_classes: int, width: int = 64) -> "Architecture":
        return cls("convnet", tuple(input_shape), (width,) * CONV_BLOCKS, num_classes)

    @classmethod
    def mlp(cls, input_shape, num_classes: int, hidden=(128,)) -> "Architecture":
        return cls("mlp", tuple(input_shape), tuple(hidden), num_classes)

    @property
    def feature_dim(self) -> int:
        c, h, w = self.input_shape
        if self.kind == "mlp":
            return self.widths[-1] if self.widths else c * h * w
        for _ in range(CONV_BLOCKS):
            h, w = h // 2, w // 2
        return self.widths[-1] * h * w

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        c, h, w = self.input_shape
        if self.kind == "convnet":
            prev = c
            for i, width in enumerate(self.widths):
                shapes.append((f"conv{i}.weight", (width, prev, 3, 3)))
                shapes.append((f"conv{i}.bias", (width,)))
                prev = width
        else:
            prev = c * h * w
            for i, width in enumerate(self.widths):
                shapes.append((f"fc{i}.weight", (width, prev)))
                shapes.append((f"fc{i}.bias", (width,)))
                prev = width
        shapes.append(("classifier.weight", (self.num_classes, self.feature_dim)))
        shapes.append(("classifier.bias", (self.num_classes,)))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(d["kind"], tuple(d["input_shape"]), tuple(d["widths"]), int(d["num_classes"]))


@dataclass
class ModelParams:
    arch: Architecture
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.arch.layer_shapes()
        if [n for n, _ in expected] != list(self.tensors):
            raise ValueError("parameter names do not match the architecture")
        for name, shape in expected:
            if self.tensors[name].shape != shape:
                raise ag.ShapeError("ModelParams", self.tensors[name].shape, shape, detail=name)

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def with_values(self, values) -> "ModelParams":
        return ModelParams(self.arch, dict(zip(self.tensors, values)))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def param_count(arch: Architecture) -> int:
    return sum(math.prod(shape) for _, shape in arch.layer_shapes())


def serialized_bytes(arch: Architecture) -> int:
    """Size of the parameters as float32 on the wire."""
    return 4 * param_count(arch)


def init(arch: Architecture, seed: int) -> ModelParams:
    """Fan-in scaled uniform weights and zero biases.

    Hidden layers use the He bound ``sqrt(6 / fan_in)``; the classifier uses
    ``1 / sqrt(fan_in)`` so initial logits stay O(1).
    """
    rng = stream(seed, "model-init")
    dtype = ag._dtype()
    tensors = {}
    for name, shape in arch.layer_shapes():
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            fan_in = math.prod(shape[1:])
            bound = 1 / math.sqrt(fan_in) if name.startswith("classifier") else math.sqrt(6 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(dtype)
        tensors[name] = Tensor(arr, name=name)
    return ModelParams(arch, tensors)


def _check_batch(arch: Architecture, x: Tensor):
    if x.ndim != 4 or tuple(x.shape[1:]) != arch.input_shape:
        raise ag.ShapeError("forward", x.shape, (None,) + arch.input_shape, detail="batch vs input shape")


def forward_features(params: ModelParams, batch) -> Tensor:
    """Per-sample feature vectors, shape (batch, feature_dim)."""
    arch = params.arch
    x = ag.as_tensor(batch)
    _check_batch(arch, x)
    if arch.kind == "convnet":
        for i in range(CONV_BLOCKS):
            x = ag.conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"])
            x = ag.relu(x)
            x = ag.avgpool2x2(x)
        return ag.flatten(x)
    x = ag.flatten(x)
    for i in range(len(arch.widths)):
        x = ag.relu(ag.affine(x, params[f"fc{i}.weight"], params[f"fc{i}.bias"]))
    return x


def classify(params: ModelParams, features: Tensor) -> Tensor:
    return ag.affine(features, params["classifier.weight"], params["classifier.bias"])


def forward_logits(params: ModelParams, batch) -> Tensor:
    """Logits before any softmax, shape (batch, num_classes)."""
    return classify(params, forward_features(params, batch))


def resample(params: ModelParams, gamma: float, seed: int) -> ModelParams:
    """Interpolate towards a fresh initialization: ``gamma*w + (1-gamma)*init(seed)``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    fresh = init(params.arch, seed)
    out = []
    for w, w0 in zip(params.values(), fresh.values()):
        dt = w.data.dtype.type
        out.append(Tensor._wrap(dt(gamma) * w.data + dt(1.0 - gamma) * w0.data))
    return params.with_values(out)


def save_checkpoint(params: ModelParams, path) -> None:
    """Write ``params`` in the little-endian checkpoint layout.

    Layout: 8-byte magic ``FEDAFCK1``; uint32 length L; L bytes of UTF-8 JSON
    ``{"arch": ..., "tensors": [[name, shape], ...]}``; then each tensor's
    float32 values in row-major order, in the listed sequence.
    """
    header = {
        "arch": params.arch.to_dict(),
        "tensors": [[n, list(t.shape)] for n, t in params.tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for t in params.values():
            f.write(t.data.astype("<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    arch = Architecture.from_dict(header["arch"])
    offset = 12 + n
    tensors = {}
    for name, shape in header["tensors"]:
        count = math.prod(shape)
        end = offset + 4 * count
        if end > len(raw):
            raise ValueError(f"{path}: truncated at tensor {name}")
        arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
        tensors[name] = Tensor(arr, name=name)
        offset = end
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return ModelParams(arch, tensors)
