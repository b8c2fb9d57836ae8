"""Small convolutional fake-image detectors with named activation taps.

Each architecture is a stack of ``conv -> relu -> avgpool2x2`` blocks
followed by one dense layer producing a single logit. The post-ReLU output
of block ``i`` is tapped as ``conv{i}``. A positive logit means "fake".
"""

from __future__ import annotations

import csv
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tape, Tensor, backward_with_taps

REAL, FAKE = 0, 1

# fixed input standardization; pixels in [0, 1] become roughly zero-mean
INPUT_MEAN = 0.5
INPUT_SCALE = 4.0


@dataclass(frozen=True)
class ArchSpec:
    """Architecture description.

    ``blocks`` holds (width, kernel size) per conv block. ``pool=False``
    drops the pooling stage, which is only useful for tiny test detectors.
    """

    arch_id: str
    blocks: Tuple[Tuple[int, int], ...]
    input_size: int = 32
    channels: int = 3
    pool: bool = True

    @property
    def tap_names(self) -> List[str]:
        return [f"conv{i + 1}" for i in range(len(self.blocks))]

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        shapes = []
        c, size = self.channels, self.input_size
        for i, (width, k) in enumerate(self.blocks, start=1):
            shapes.append((f"conv{i}.weight", (width, c, k, k)))
            shapes.append((f"conv{i}.bias", (width,)))
            c = width
            if self.pool:
                size //= 2
        shapes.append(("dense.weight", (c * size * size, 1)))
        shapes.append(("dense.bias", (1,)))
        return shapes


REGISTRY: Dict[str, ArchSpec] = {
    "detector_a": ArchSpec("detector_a", ((8, 3), (16, 3), (32, 3))),
    "detector_b": ArchSpec("detector_b", ((8, 3), (8, 3), (16, 3), (16, 3))),
    "detector_c": ArchSpec("detector_c", ((16, 5), (32, 5), (64, 5))),
}


class ArchitectureError(ValueError):
    pass


class WeightsFormatError(ValueError):
    pass


class ChecksumError(WeightsFormatError):
    pass


class VersionError(WeightsFormatError):
    pass


class DivergenceError(RuntimeError):
    pass


class Prediction(NamedTuple):
    label: int
    probability: float
    logit: float


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def label_from_probability(p) -> np.ndarray:
    # probability exactly 0.5 counts as fake
    return (np.asarray(p) >= 0.5).astype(np.int64)


class Detector:
    """A binary fake-image classifier.

    Parameters live in plain numpy arrays; every forward pass wraps them in
    fresh tensors, so a trained detector can be shared across threads.
    """

    def __init__(self, spec: ArchSpec, params: Optional[Dict[str, np.ndarray]] = None,
                 seed: int = 0):
        self.spec = spec
        if params is None:
            params = init_params(spec, seed)
        expected = spec.param_shapes()
        if [n for n, _ in expected] != list(params):
            raise ArchitectureError(f"parameter names do not match architecture {spec.arch_id!r}")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ArchitectureError(f"{name}: shape {params[name].shape} != expected {shape}")
        self.params = {n: np.ascontiguousarray(p, dtype=np.float64) for n, p in params.items()}

    @property
    def arch_id(self) -> str:
        return self.spec.arch_id

    @property
    def tap_names(self) -> List[str]:
        return self.spec.tap_names

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (self.spec.channels, self.spec.input_size, self.spec.input_size)

    def forward(self, tape: Tape, x: Tensor,
                params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """Logits (N×1) for an N×C×H×W batch; taps are registered on ``tape``."""
        if x.data.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape} does not match detector input "
                             f"N×{'×'.join(map(str, self.input_shape))}")
        if params is None:
            params = {n: Tensor(p) for n, p in self.params.items()}
        h = tape.scale(tape.shift(x, -INPUT_MEAN), INPUT_SCALE)
        for i, (_, k) in enumerate(self.spec.blocks, start=1):
            h = tape.conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"],
                            stride=1, padding=k // 2)
            h = tape.tap(f"conv{i}", tape.relu(h))
            if self.spec.pool:
                h = tape.avgpool2x2(h)
        h = tape.flatten(h)
        return tape.dense(h, params["dense.weight"], params["dense.bias"])

    def logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        out = []
        for start in range(0, len(images), batch_size):
            z = self.forward(Tape(), Tensor(images[start:start + batch_size]))
            out.append(z.data[:, 0])
        return np.concatenate(out) if out else np.zeros(0)

    def predict(self, image: np.ndarray) -> Prediction:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.input_shape:
            raise ValueError(f"image shape {image.shape} != detector input {self.input_shape}")
        z = float(self.logits(image)[0])
        p = float(sigmoid(z))
        return Prediction(int(label_from_probability(p)), p, z)

    def predict_labels(self, images: np.ndarray) -> np.ndarray:
        return label_from_probability(sigmoid(self.logits(images)))

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        labels = np.asarray(labels)
        if len(labels) == 0:
            raise ValueError("accuracy of an empty set is undefined")
        return float(np.mean(self.predict_labels(images) == labels))

    def input_gradient(self, image: np.ndarray, objective: str = "logit",
                       label: Optional[int] = None, taps: Sequence[str] = ()):
        """Gradient of a scalar objective w.r.t. a single C×H×W image.

        ``objective`` is ``"logit"`` (raw logit z), ``"loss"`` (BCE against
        ``label``) or ``"probability"``. Returns (value, input grad,
        {tap: grad}) with tap gradients squeezed to C×h×w.
        """
        x = Tensor(np.asarray(image, dtype=np.float64)[None], requires_grad=True)
        tape = Tape()
        z = self.forward(tape, x)
        if objective == "logit":
            out = tape.sum(z)
        elif objective == "probability":
            out = tape.sum(tape.sigmoid(z))
        elif objective == "loss":
            if label is None:
                raise ValueError("loss objective needs a label")
            out = tape.bce_with_logits(z, float(label))
        else:
            raise ValueError(f"unknown objective {objective!r}")
        tap_grads = backward_with_taps(tape, out, taps)
        return out.item(), x.grad[0], {n: g[0] for n, g in tap_grads.items()}

    def copy(self) -> "Detector":
        return Detector(self.spec, {n: p.copy() for n, p in self.params.items()})


def init_params(spec: ArchSpec, seed: int) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        elif name.startswith("conv"):
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        else:
            params[name] = rng.standard_normal(shape) * math.sqrt(1.0 / shape[0])
    return params


def build(arch_id: str, seed: int = 0) -> Detector:
    try:
        spec = REGISTRY[arch_id]
    except KeyError:
        raise ArchitectureError(f"unknown architecture {arch_id!r}; "
                                f"known: {sorted(REGISTRY)}") from None
    return Detector(spec, seed=seed)


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


@dataclass
class TrainHistory:
    batch_losses: List[float] = field(default_factory=list)
    epochs: List[dict] = field(default_factory=list)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "loss", "train_acc", "val_acc"])
            for row in self.epochs:
                val = "" if row["val_acc"] is None else repr(row["val_acc"])
                writer.writerow([row["epoch"], repr(row["loss"]), repr(row["train_acc"]), val])


def train(detector: Detector, images: np.ndarray, labels: np.ndarray, config: TrainConfig,
          val: Optional[Tuple[np.ndarray, np.ndarray]] = None,
          log=None) -> TrainHistory:
    """Minibatch SGD with momentum on binary cross-entropy, in place."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(config.seed)
    velocity = {n: np.zeros_like(p) for n, p in detector.params.items()}
    history = TrainHistory()

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            params = {n: Tensor(p, requires_grad=True) for n, p in detector.params.items()}
            tape = Tape()
            z = detector.forward(tape, Tensor(images[idx]), params)
            loss = tape.bce_with_logits(z, labels[idx][:, None])
            backward_with_taps(tape, loss)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} in epoch {epoch}")
            for name, p in detector.params.items():
                v = velocity[name]
                v *= config.momentum
                grad = params[name].grad
                if config.weight_decay and name.endswith(".weight"):
                    grad = grad + config.weight_decay * p
                v -= config.lr * grad
                p += v
            losses.append(value)
        history.batch_losses.extend(losses)
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "train_acc": detector.accuracy(images, labels),
            "val_acc": detector.accuracy(*val) if val is not None else None,
        }
        history.epochs.append(row)
        if log is not None:
            log(row)
    return history


# -- serialization ------------------------------------------------------------
#
# layout (little-endian):
#   magic "KRAW" | u16 version | u16 len + arch id | u32 input size | u32 channels
#   | u8 pool | u16 block count | (u32 width, u32 kernel)* | u32 tensor count
#   | per tensor: u16 len + name, u8 ndim, u32 dims*, f64 payload
#   | u32 crc32 of everything above

MAGIC = b"KRAW"
FORMAT_VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def dumps(detector: Detector) -> bytes:
    spec = detector.spec
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), _pack_str(spec.arch_id),
             struct.pack("<IIBH", spec.input_size, spec.channels, int(spec.pool), len(spec.blocks))]
    for width, k in spec.blocks:
        parts.append(struct.pack("<II", width, k))
    parts.append(struct.pack("<I", len(detector.params)))
    for name, arr in detector.params.items():
        parts.append(_pack_str(name))
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise WeightsFormatError("unexpected end of weights data")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def string(self) -> str:
        (n,) = self.take("<H")
        raw = self.buf[self.pos:self.pos + n]
        if len(raw) != n:
            raise WeightsFormatError("unexpected end of weights data")
        self.pos += n
        return raw.decode("utf-8")


def loads(blob: bytes, expected_arch: Optional[str] = None) -> Detector:
    if blob[:4] != MAGIC[:len(blob[:4])]:
        raise WeightsFormatError("not a detector weights file (bad magic)")
    if len(blob) < len(MAGIC) + 6:
        raise ChecksumError("weights data truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("weights checksum mismatch (file truncated or corrupted)")
    r = _Reader(body)
    r.pos = len(MAGIC)
    (version,) = r.take("<H")
    if version != FORMAT_VERSION:
        raise VersionError(f"weights format version {version} != supported {FORMAT_VERSION}")
    arch_id = r.string()
    input_size, channels, pool, nblocks = r.take("<IIBH")
    blocks = tuple(r.take("<II") for _ in range(nblocks))
    spec = ArchSpec(arch_id, blocks, input_size, channels, bool(pool))
    if expected_arch is not None and arch_id != expected_arch:
        raise ArchitectureError(f"weights are for {arch_id!r}, expected {expected_arch!r}")
    known = REGISTRY.get(arch_id)
    if known is not None and known != spec:
        raise ArchitectureError(f"weights for {arch_id!r} do not match the registered layout")
    (count,) = r.take("<I")
    params = {}
    for _ in range(count):
        name = r.string()
        (ndim,) = r.take("<B")
        shape = r.take(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        raw = body[r.pos:r.pos + 8 * n]
        if len(raw) != 8 * n:
            raise WeightsFormatError("unexpected end of weights data")
        r.pos += 8 * n
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise WeightsFormatError("trailing bytes after parameter payload")
    return Detector(spec, params)


def save_weights(detector: Detector, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(detector))


def load_weights(path: str | os.PathLike, expected_arch: Optional[str] = None) -> Detector:
    with open(path, "rb") as fh:
        blob = fh.read()
    return loads(blob, expected_arch)


def gradient_check(arch_id: str, seed: int = 0, probes: int = 10, step: float = 1e-5,
                   batch: int = 2) -> Dict[str, float]:
    """Max relative finite-difference error per parameter tensor of one architecture.

    Biases are drawn at random instead of zero: a zero bias puts every
    all-zero receptive field exactly on the ReLU kink, where one-sided and
    central differences disagree by construction.
    """
    from .tensor import finite_diff_check

    rng = np.random.default_rng(seed)
    detector = build(arch_id, seed=seed)
    for name, p in detector.params.items():
        if name.endswith(".bias"):
            p[...] = rng.normal(scale=0.1, size=p.shape)
    x = rng.uniform(0.0, 1.0, size=(batch,) + detector.input_shape)
    y = (np.arange(batch) % 2).astype(np.float64)[:, None]
    errors = {}
    for name in detector.params:
        probe = Tensor(detector.params[name])

        def forward(tape, name=name, probe=probe):
            params = {n: Tensor(p) for n, p in detector.params.items()}
            params[name] = probe
            return tape.bce_with_logits(detector.forward(tape, Tensor(x), params), y)

        errors[name] = finite_diff_check(forward, probe, step, probes=probes, rng=rng)
    return errors
