"""Deterministic toy "real" and "fake" images.

Real images are smooth colored textures (low-pass filtered noise). Fake
images take the same texture and, inside one roughly centered rectangular
manipulated region, add two generator-style artifacts: a blend with a nearest-neighbor
upsampled half-resolution copy, and a faint checkerboard. Everything is a
pure function of the seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .pnm import quantize, read_pnm, write_ppm

GENERATOR_VERSION = 1
SPLITS = ("train", "val", "test")
LABELS = {0: "real", 1: "fake"}

CHECKER_AMPLITUDE = 0.04
TEXTURE_SIGMA = (1.5, 3.0)
BLEND_WEIGHT = 0.5
# side of the manipulated region as a fraction of the image side; None
# applies the artifact to the whole image
REGION_FRACTION = (0.35, 0.5)
# None draws the checkerboard phase per image
CHECKER_PHASE = None
# how far (in 2-pixel steps) the region center may move off the image center
REGION_JITTER = 2


@dataclass
class LabeledImage:
    pixels: np.ndarray  # C×H×W in [0, 1]
    label: int
    seed: int

    @property
    def label_name(self) -> str:
        return LABELS[self.label]


def _texture(seed: int, size: int) -> Tuple[np.ndarray, np.random.Generator]:
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((3, size, size))
    sigma = rng.uniform(*TEXTURE_SIGMA)
    smooth = np.stack([gaussian_filter(ch, sigma, mode="wrap") for ch in noise])
    smooth /= smooth.std(axis=(1, 2), keepdims=True)
    contrast = rng.uniform(0.08, 0.16)
    base = rng.uniform(0.38, 0.62)
    tint = rng.uniform(-0.06, 0.06, size=(3, 1, 1))
    return base + tint + contrast * smooth, rng


def generate_real(seed: int, size: int = 32) -> LabeledImage:
    tex, _ = _texture(seed, size)
    return LabeledImage(np.clip(tex, 0.0, 1.0), 0, seed)


def generate_fake(seed: int, size: int = 32) -> LabeledImage:
    tex, rng = _texture(seed, size)
    c, h, w = tex.shape
    half = tex.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    upsampled = np.repeat(np.repeat(half, 2, axis=1), 2, axis=2)
    phase = int(rng.integers(2)) if CHECKER_PHASE is None else CHECKER_PHASE
    ii, jj = np.indices((h, w))
    checker = np.where((ii + jj + phase) % 2 == 0, 1.0, -1.0)
    artifact = (1 - BLEND_WEIGHT) * tex + BLEND_WEIGHT * upsampled + CHECKER_AMPLITUDE * checker
    if REGION_FRACTION is None:
        img = artifact
    else:
        img = np.where(manipulated_region(rng, size), artifact, tex)
    return LabeledImage(np.clip(img, 0.0, 1.0), 1, seed)


def manipulated_region(rng: np.random.Generator, size: int) -> np.ndarray:
    """Roughly centered axis-aligned rectangle, even-aligned so 2×2 blocks stay whole."""
    lo, hi = (int(round(f * size / 2)) for f in REGION_FRACTION)
    rh, rw = 2 * rng.integers(lo, hi + 1, size=2)
    dy, dx = 2 * rng.integers(-REGION_JITTER, REGION_JITTER + 1, size=2)
    top = int(np.clip((size - rh) // 2 // 2 * 2 + dy, 0, size - rh))
    left = int(np.clip((size - rw) // 2 // 2 * 2 + dx, 0, size - rw))
    region = np.zeros((size, size), dtype=bool)
    region[top:top + rh, left:left + rw] = True
    return region


def laplacian_energy(image: np.ndarray) -> float:
    """Mean absolute 4-neighbor Laplacian, a high-frequency energy proxy."""
    x = np.asarray(image)
    lap = (-4 * x[:, 1:-1, 1:-1] + x[:, :-2, 1:-1] + x[:, 2:, 1:-1]
           + x[:, 1:-1, :-2] + x[:, 1:-1, 2:])
    return float(np.abs(lap).mean())


@dataclass
class DatasetManifest:
    """Images per class for each split, plus generation parameters."""

    counts: Dict[str, int] = field(default_factory=lambda: {"train": 100, "val": 20, "test": 20})
    size: int = 32
    seed: int = 0
    version: int = GENERATOR_VERSION

    def __post_init__(self):
        for split in SPLITS:
            if self.counts.get(split, 0) <= 0:
                raise ValueError(f"split {split!r} needs a positive count")
        if self.size % 16:
            raise ValueError("image size must be a multiple of 16")

    def split_seeds(self, split: str) -> List[Tuple[int, int]]:
        """(label, seed) pairs for a split, in storage order.

        Seed ranges of different splits never overlap.
        """
        start = self.seed << 32
        for s in SPLITS:
            if s == split:
                break
            start += 2 * self.counts[s]
        pairs = []
        for i in range(self.counts[split]):
            pairs.append((0, start + 2 * i))
            pairs.append((1, start + 2 * i + 1))
        return pairs

    def to_text(self) -> str:
        counts = " ".join(str(self.counts[s]) for s in SPLITS)
        return (f"version = {self.version}\n"
                f"seed = {self.seed}\n"
                f"dims = 3x{self.size}x{self.size}\n"
                f"counts = {counts}\n")

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        try:
            counts = [int(v) for v in kv["counts"].split()]
            size = int(kv["dims"].split("x")[-1])
            manifest = cls(dict(zip(SPLITS, counts)), size, int(kv["seed"]), int(kv["version"]))
        except (KeyError, ValueError, IndexError) as exc:
            raise ValueError(f"malformed manifest: {exc}") from exc
        if manifest.version != GENERATOR_VERSION:
            raise ValueError(f"manifest generator version {manifest.version} "
                             f"!= supported {GENERATOR_VERSION}")
        return manifest


def generate(label: int, seed: int, size: int = 32) -> LabeledImage:
    return generate_fake(seed, size) if label else generate_real(seed, size)


def make_split(manifest: DatasetManifest, split: str):
    """Generate a split in memory, quantized exactly as stored on disk.

    Returns (images N×3×H×W, labels N, ids N).
    """
    pairs = manifest.split_seeds(split)
    images = np.stack([quantize(generate(lab, seed, manifest.size).pixels) for lab, seed in pairs])
    labels = np.array([lab for lab, _ in pairs], dtype=np.int64)
    ids = [f"{LABELS[lab]}_{seed}" for lab, seed in pairs]
    return images, labels, ids


def build_dataset(manifest: DatasetManifest, root: str | os.PathLike) -> int:
    """Write every split as P6 files plus ``manifest.txt``; returns file count."""
    root = Path(root)
    written = 0
    try:
        for split in SPLITS:
            (root / split).mkdir(parents=True, exist_ok=True)
            for lab, seed in manifest.split_seeds(split):
                img = generate(lab, seed, manifest.size)
                write_ppm(root / split / f"{LABELS[lab]}_{seed}.ppm", img.pixels)
                written += 1
        (root / "manifest.txt").write_text(manifest.to_text())
    except OSError as exc:
        raise OSError(f"cannot write dataset under {root}: {exc.strerror or exc}") from exc
    return written


def read_manifest(root: str | os.PathLike) -> DatasetManifest:
    path = Path(root) / "manifest.txt"
    try:
        return DatasetManifest.from_text(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read dataset manifest {path}: {exc.strerror or exc}") from exc


def load_split(root: str | os.PathLike, split: str):
    """Load a stored split; same return layout as :func:`make_split`."""
    root = Path(root)
    manifest = read_manifest(root)
    images, labels, ids = [], [], []
    for lab, seed in manifest.split_seeds(split):
        name = f"{LABELS[lab]}_{seed}"
        path = root / split / f"{name}.ppm"
        try:
            images.append(read_pnm(path))
        except OSError as exc:
            raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
        labels.append(lab)
        ids.append(name)
    return np.stack(images), np.array(labels, dtype=np.int64), ids
