"""Multi-layer key region selection.

For each tapped conv layer the gradient of the detector's score with
respect to every channel of that layer is summed over channels, min-max
normalized, upsampled to image size and thresholded. The per-layer masks
are then intersected, so only pixels that are salient at every depth
survive. Shallow layers have small receptive fields, which is what keeps
the intersection small.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from .detectors import FAKE, Detector, sigmoid, label_from_probability
from .pnm import write_pgm
from .tensor import Tape, Tensor, UnknownTapError, backward_with_taps

OBJECTIVES = ("logit", "probability", "loss")
REDUCTIONS = ("signed", "absolute")
UPSAMPLING = ("bilinear", "nearest")


@dataclass(frozen=True)
class SaliencyOptions:
    """Ablation knobs; the defaults follow the plain signed-gradient recipe."""

    objective: str = "logit"
    reduction: str = "signed"
    upsample: str = "bilinear"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.upsample not in UPSAMPLING:
            raise ValueError(f"upsample must be one of {UPSAMPLING}, got {self.upsample!r}")


@dataclass
class LayerSaliency:
    layer: str
    raw: np.ndarray         # channel-summed gradient at layer resolution
    normalized: np.ndarray  # raw min-max scaled to [0, 1]
    upsampled: np.ndarray   # normalized map resized to image H×W
    degenerate: bool = False


@dataclass
class KeyRegionMask:
    bits: np.ndarray  # H×W bool
    threshold: float
    layers: Tuple[str, ...]

    @property
    def size(self) -> int:
        return int(self.bits.sum())

    @property
    def fraction(self) -> float:
        return self.size / self.bits.size

    def issubset(self, other: "KeyRegionMask") -> bool:
        return not np.any(self.bits & ~other.bits)

    def apply(self, r: np.ndarray) -> np.ndarray:
        """Zero a C×H×W perturbation outside the mask (same mask on every channel)."""
        return r * self.bits[None]


def min_max_normalize(g: np.ndarray) -> Tuple[np.ndarray, bool]:
    lo, hi = g.min(), g.max()
    if hi == lo:
        return np.zeros_like(g, dtype=np.float64), True
    return (g - lo) / (hi - lo), False


def _interp_matrix(n_out: int, n_in: int, mode: str) -> np.ndarray:
    """Rows are convex weights mapping n_in samples to n_out (half-pixel centers)."""
    m = np.zeros((n_out, n_in))
    centers = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    if mode == "nearest":
        src = np.clip(np.floor((np.arange(n_out) + 0.5) * n_in / n_out), 0, n_in - 1).astype(int)
        m[np.arange(n_out), src] = 1.0
        return m
    centers = np.clip(centers, 0.0, n_in - 1)
    lo = np.floor(centers).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = centers - lo
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def upsample(g: np.ndarray, shape: Tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    if g.shape == tuple(shape):
        return g.copy()
    rows = _interp_matrix(shape[0], g.shape[0], mode)
    cols = _interp_matrix(shape[1], g.shape[1], mode)
    # convex weights cannot leave [0, 1]; clip only guards rounding
    return np.clip(rows @ g @ cols.T, 0.0, 1.0)


def tap_gradients(detector: Detector, image: np.ndarray, layers: Sequence[str],
                  objective: str = "logit") -> Dict[str, np.ndarray]:
    """Gradient of the predicted-class score w.r.t. each tapped activation.

    The score is oriented toward the detector's current decision: the logit
    when it says fake, minus the logit when it says real.
    """
    unknown = [name for name in layers if name not in detector.tap_names]
    if unknown:
        raise UnknownTapError(f"{detector.arch_id} has no layers {unknown}; "
                              f"taps are {detector.tap_names}")
    x = Tensor(np.asarray(image, dtype=np.float64)[None], requires_grad=True)
    tape = Tape()
    z = detector.forward(tape, x)
    predicted = int(label_from_probability(sigmoid(z.data[0, 0])))
    sign = 1.0 if predicted == FAKE else -1.0
    if objective == "logit":
        score = tape.scale(tape.sum(z), sign)
    elif objective == "probability":
        score = tape.sum(tape.sigmoid(tape.scale(z, sign)))
    else:
        score = tape.scale(tape.bce_with_logits(z, float(predicted)), -1.0)
    grads = backward_with_taps(tape, score, layers)
    return {name: g[0] for name, g in grads.items()}


def saliency_from_gradient(layer: str, grad: np.ndarray, image_hw: Tuple[int, int],
                           options: SaliencyOptions = SaliencyOptions()) -> LayerSaliency:
    """Channel-reduce a k×h×w tap gradient into a normalized H×W map."""
    g = np.abs(grad) if options.reduction == "absolute" else grad
    raw = g.sum(axis=0)
    normalized, degenerate = min_max_normalize(raw)
    return LayerSaliency(layer, raw, normalized,
                         upsample(normalized, image_hw, options.upsample), degenerate)


def saliency_maps(detector: Detector, image: np.ndarray, layers: Sequence[str],
                  options: SaliencyOptions = SaliencyOptions()) -> Dict[str, LayerSaliency]:
    """All requested layer saliencies from a single backward pass."""
    grads = tap_gradients(detector, image, layers, options.objective)
    hw = np.asarray(image).shape[-2:]
    return {name: saliency_from_gradient(name, grads[name], hw, options) for name in layers}


def layer_saliency(detector: Detector, image: np.ndarray, layer_name: str,
                   options: SaliencyOptions = SaliencyOptions()) -> LayerSaliency:
    return saliency_maps(detector, image, [layer_name], options)[layer_name]


def threshold_mask(saliency: LayerSaliency, t: float) -> KeyRegionMask:
    """Pixels whose upsampled saliency is strictly above ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {t}")
    return KeyRegionMask(saliency.upsampled > t, float(t), (saliency.layer,))


def combine_masks(masks: Iterable[KeyRegionMask]) -> KeyRegionMask:
    masks = list(masks)
    if not masks:
        raise ValueError("need at least one mask")
    bits = masks[0].bits.copy()
    for m in masks[1:]:
        bits &= m.bits
    layers = tuple(name for m in masks for name in m.layers)
    return KeyRegionMask(bits, masks[0].threshold, layers)


def mask_from_saliencies(saliencies: Dict[str, LayerSaliency], t: float) -> KeyRegionMask:
    return combine_masks(threshold_mask(s, t) for s in saliencies.values())


def select_key_region(detector: Detector, image: np.ndarray, layers: Sequence[str], t: float,
                      options: SaliencyOptions = SaliencyOptions()) -> KeyRegionMask:
    """Intersection of the thresholded saliency masks of ``layers``.

    An empty intersection is a valid result, not an error.
    """
    if not layers:
        raise ValueError("need at least one layer")
    return mask_from_saliencies(saliency_maps(detector, image, layers, options), t)


def dump_saliency(directory: str | os.PathLike, saliencies: Dict[str, LayerSaliency],
                  mask: Optional[KeyRegionMask] = None, prefix: str = "") -> None:
    """Write each upsampled map (and optionally the final mask) as P5 images."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, s in saliencies.items():
        write_pgm(directory / f"{prefix}{name}.pgm", s.upsampled)
        write_pgm(directory / f"{prefix}{name}_mask.pgm",
                  (s.upsampled > (mask.threshold if mask else 0.5)).astype(float))
    if mask is not None:
        write_pgm(directory / f"{prefix}mask.pgm", mask.bits.astype(float))
