"""Inner attacks that the key region container can plug in.

All attacks work on a single C×H×W image and push the detector away from a
reference label (by default its current prediction). They return the
perturbation already clipped so that ``image + r`` stays in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .detectors import Detector

METHODS = ("fgsm", "pgd", "deepfool")


@dataclass
class Perturbation:
    r: np.ndarray
    zero_gradient: bool = False
    converged: bool = True
    steps: int = 0


def clip_box(image: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Return r' with image + r' == clamp(image + r, 0, 1).

    Entries already inside the box are returned untouched, which makes the
    operation idempotent.
    """
    image = np.asarray(image, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    candidate = image + r
    inside = (candidate >= 0.0) & (candidate <= 1.0)
    return np.where(inside, r, np.clip(candidate, 0.0, 1.0) - image)


@dataclass(frozen=True)
class InnerAttack:
    """One of FGSM, PGD or binary DeepFool with its hyperparameters."""

    method: str = "pgd"
    eps: float = 0.03
    alpha_step: float = 0.007
    n_steps: int = 10
    overshoot: float = 0.02
    max_steps: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown inner attack {self.method!r}; choose from {METHODS}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.alpha_step <= 0:
            raise ValueError("alpha_step must be positive")
        if self.n_steps < 1 or self.max_steps < 1:
            raise ValueError("step counts must be at least 1")
        if self.overshoot < 0:
            raise ValueError("overshoot must be non-negative")

    def __call__(self, detector: Detector, image: np.ndarray,
                 label: Optional[int] = None) -> Perturbation:
        if self.method == "fgsm":
            return fgsm(detector, image, self.eps, label)
        if self.method == "pgd":
            return pgd(detector, image, self.eps, self.alpha_step, self.n_steps, label)
        return deepfool(detector, image, self.overshoot, self.max_steps, label)


def _loss_gradient(detector: Detector, image: np.ndarray, label: int) -> np.ndarray:
    _, grad, _ = detector.input_gradient(image, objective="loss", label=label)
    return grad


def fgsm(detector: Detector, image: np.ndarray, eps: float = 0.03,
         label: Optional[int] = None) -> Perturbation:
    """Single signed-gradient step that increases the loss of ``label``."""
    image = np.asarray(image, dtype=np.float64)
    if label is None:
        label = detector.predict(image).label
    grad = _loss_gradient(detector, image, label)
    if not np.any(grad):
        return Perturbation(np.zeros_like(image), zero_gradient=True, steps=1)
    return Perturbation(clip_box(image, eps * np.sign(grad)), steps=1)


def pgd(detector: Detector, image: np.ndarray, eps: float = 0.03, alpha_step: float = 0.007,
        n_steps: int = 10, label: Optional[int] = None) -> Perturbation:
    """Iterated signed-gradient ascent projected onto the L∞ ball and the pixel box."""
    image = np.asarray(image, dtype=np.float64)
    if label is None:
        label = detector.predict(image).label
    r = np.zeros_like(image)
    for step in range(n_steps):
        grad = _loss_gradient(detector, image + r, label)
        if step == 0 and not np.any(grad):
            return Perturbation(r, zero_gradient=True, steps=1)
        r = np.clip(r + alpha_step * np.sign(grad), -eps, eps)
        r = clip_box(image, r)
    return Perturbation(r, steps=n_steps)


def deepfool(detector: Detector, image: np.ndarray, overshoot: float = 0.02,
             max_steps: int = 50, label: Optional[int] = None) -> Perturbation:
    """Binary DeepFool: repeated projection onto the linearized boundary z = 0."""
    image = np.asarray(image, dtype=np.float64)
    if label is None:
        label = detector.predict(image).label
    total = np.zeros_like(image)
    for step in range(max_steps):
        candidate = image + clip_box(image, (1.0 + overshoot) * total)
        if detector.predict(candidate).label != label:
            return Perturbation(clip_box(image, (1.0 + overshoot) * total), steps=step)
        z, grad, _ = detector.input_gradient(candidate, objective="logit")
        norm2 = float(np.sum(grad * grad))
        if norm2 == 0.0:
            return Perturbation(clip_box(image, (1.0 + overshoot) * total),
                                zero_gradient=True, converged=False, steps=step)
        total = total - (z / norm2) * grad
    r = clip_box(image, (1.0 + overshoot) * total)
    converged = detector.predict(image + r).label != label
    return Perturbation(r, converged=converged, steps=max_steps)
