"""Attack success, transfer and perceptibility metrics."""

from __future__ import annotations

import numpy as np


def asr(acc_clean: float, acc_attack: float) -> float:
    """Attack success rate, 1 - acc_attack / acc_clean (unclamped)."""
    if acc_clean == 0:
        raise ZeroDivisionError("ASR is undefined when clean accuracy is 0")
    return 1.0 - acc_attack / acc_clean


def asr_from_counts(correct_clean: int, correct_attack: int, total: int) -> float:
    return asr(correct_clean / total, correct_attack / total)


def clamp_unit(value: float) -> float:
    return min(max(value, 0.0), 1.0)


def atr(asr_target: float, asr_origin: float) -> float:
    """Attack transfer ratio, ASR on the target over ASR on the origin (unclamped)."""
    if asr_origin == 0:
        raise ZeroDivisionError("ATR is undefined when the origin ASR is 0")
    return asr_target / asr_origin


def p_l0(r: np.ndarray, tol: float = 1e-9) -> float:
    """Fraction of H×W pixel positions where any channel of r exceeds tol."""
    r = np.asarray(r)
    if tol < 0:
        raise ValueError("tol must be non-negative")
    changed = np.any(np.abs(r) > tol, axis=0) if r.ndim == 3 else np.abs(r) > tol
    return float(changed.mean())


def p_l2(r: np.ndarray) -> float:
    """Root-mean-square entry of r on the [0, 1] pixel scale."""
    r = np.asarray(r, dtype=np.float64)
    return float(np.sqrt(np.mean(r * r)))


def normalize_for_display(r: np.ndarray) -> np.ndarray:
    """Min-max stretch a perturbation to [0, 1] (stored as 0..255)."""
    r = np.asarray(r, dtype=np.float64)
    lo, hi = r.min(), r.max()
    if hi == lo:
        return np.zeros_like(r)
    return (r - lo) / (hi - lo)
