"""Key region attack: a masked, threshold-decaying wrapper around an inner attack.

Each round selects key pixels at the current threshold, runs the inner
attack on the current adversarial candidate, keeps only the masked part of
its perturbation and adds it to the running total. The loop stops as soon
as the detector's decision on ``x + r`` differs from its decision on ``x``.
Lowering the threshold each round grows the key region.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .attacks import InnerAttack, clip_box
from .detectors import Detector
from .metrics import p_l0, p_l2
from .mlskrs import KeyRegionMask, SaliencyOptions, mask_from_saliencies, saliency_maps

__all__ = ["KraConfig", "AttackOutcome", "attack", "attack_many", "clip_box", "threshold_schedule"]


@dataclass(frozen=True)
class KraConfig:
    t_alpha: float = 0.8
    t_prime: float = 0.1
    beta: float = 0.1
    layers: Optional[Tuple[str, ...]] = None  # None: every tap of the detector
    inner: InnerAttack = field(default_factory=InnerAttack)
    u_max: int = 100
    recompute_mask_on_candidate: bool = False
    saliency: SaliencyOptions = field(default_factory=SaliencyOptions)

    def __post_init__(self):
        if not 0.0 <= self.t_prime <= self.t_alpha <= 1.0:
            raise ValueError(f"need 0 <= t_prime <= t_alpha <= 1, got "
                             f"t_prime={self.t_prime}, t_alpha={self.t_alpha}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.u_max < 1:
            raise ValueError("u_max must be at least 1")
        if self.layers is not None and not self.layers:
            raise ValueError("layers must be non-empty when given")


def threshold_schedule(config: KraConfig, u: int) -> float:
    """t_u = max(t_alpha - u·beta, t_prime), rounded so the trace reads 0.8, 0.7, …"""
    return max(round(config.t_alpha - u * config.beta, 12), config.t_prime)


@dataclass
class AttackOutcome:
    success: bool
    r: np.ndarray
    iterations: int
    thresholds: List[float]
    mask_sizes: List[int]
    clean_label: int
    adv_label: int
    seconds: float = 0.0
    empty_mask_at_floor: bool = False
    zero_gradient: bool = False
    masks: List[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def p_l0(self) -> float:
        return p_l0(self.r)

    @property
    def p_l2(self) -> float:
        return p_l2(self.r)

    def mask_union(self) -> np.ndarray:
        union = np.zeros(self.r.shape[-2:], dtype=bool)
        for m in self.masks:
            union |= m
        return union

    def to_record(self, image_id: str, timing: bool = True) -> dict:
        return {
            "image_id": image_id,
            "success": self.success,
            "iterations": self.iterations,
            "thresholds": self.thresholds,
            "p_l0": self.p_l0,
            "p_l2": self.p_l2,
            "seconds": self.seconds if timing else None,
        }


def attack(detector: Detector, image: np.ndarray, config: KraConfig = KraConfig(),
           keep_masks: bool = True) -> AttackOutcome:
    """Run the key region attack on one C×H×W image in [0, 1]."""
    start = time.perf_counter()
    x = np.asarray(image, dtype=np.float64)
    layers = list(config.layers) if config.layers is not None else detector.tap_names
    clean_label = detector.predict(x).label
    saliency = None if config.recompute_mask_on_candidate else \
        saliency_maps(detector, x, layers, config.saliency)

    r = np.zeros_like(x)
    thresholds: List[float] = []
    sizes: List[int] = []
    masks: List[np.ndarray] = []
    success = empty_at_floor = zero_grad = False
    adv_label = clean_label
    iterations = 0

    for u in range(config.u_max):
        t = threshold_schedule(config, u)
        if config.recompute_mask_on_candidate:
            saliency = saliency_maps(detector, x + r, layers, config.saliency)
        mask: KeyRegionMask = mask_from_saliencies(saliency, t)
        thresholds.append(t)
        sizes.append(mask.size)
        iterations = u + 1
        if keep_masks:
            masks.append(mask.bits)
        if mask.size == 0:
            if t <= config.t_prime:
                # the threshold cannot drop further, so the attack has failed
                empty_at_floor = True
                break
            # an empty mask leaves r untouched; skipping the inner call is equivalent
            continue
        step = config.inner(detector, x + r, label=clean_label)
        zero_grad |= step.zero_gradient
        r = clip_box(x, r + mask.apply(step.r))
        adv_label = detector.predict(x + r).label
        if adv_label != clean_label:
            success = True
            empty_at_floor = False
            break

    return AttackOutcome(success, r, iterations, thresholds, sizes, clean_label, adv_label,
                         time.perf_counter() - start, empty_at_floor, zero_grad, masks)


def attack_many(detector: Detector, images: Sequence[np.ndarray], config: KraConfig = KraConfig(),
                jobs: int = 1, keep_masks: bool = False) -> List[AttackOutcome]:
    """Attack every image; results are in input order regardless of ``jobs``."""
    if jobs <= 1:
        return [attack(detector, img, config, keep_masks) for img in images]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda img: attack(detector, img, config, keep_masks), images))
