"""Report figures: perturbation panels and transfer matrices."""

from __future__ import annotations

import os
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import normalize_for_display  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "image.interpolation": "nearest",
}

# PNG metadata is pinned so reruns produce identical bytes
_PNG_META = {"Software": None}


def _hwc(image: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(image).transpose(1, 2, 0), 0.0, 1.0)


def savefig(fig, path: str | os.PathLike) -> None:
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def perturbation_panel(path: str | os.PathLike, images: Sequence[np.ndarray],
                       perturbations: Sequence[np.ndarray],
                       masks: Optional[Sequence[np.ndarray]] = None,
                       captions: Optional[Sequence[str]] = None) -> None:
    """One row per example: clean, stretched perturbation, adversarial, key pixels."""
    n = len(images)
    ncols = 4 if masks is not None else 3
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, ncols, figsize=(1.6 * ncols, 1.6 * n), squeeze=False)
        for i in range(n):
            x, r = np.asarray(images[i]), np.asarray(perturbations[i])
            panels = [(_hwc(x), "clean"),
                      (_hwc(normalize_for_display(r)), "perturbation"),
                      (_hwc(x + r), "adversarial")]
            if masks is not None:
                panels.append((masks[i].astype(float), "key pixels"))
            for ax, (img, title) in zip(axes[i], panels):
                ax.imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=1)
                ax.set_xticks([])
                ax.set_yticks([])
                if i == 0:
                    ax.set_title(title)
            if captions is not None:
                axes[i][0].set_ylabel(captions[i])
        fig.tight_layout()
        savefig(fig, path)


def transfer_heatmap(path: str | os.PathLike, report, attack_id: Optional[str] = None,
                     value: str = "atr") -> None:
    """Origin × target grid of ATR (or ASR) values."""
    rows = [r for r in report.rows if attack_id in (None, r.attack)]
    names = list(dict.fromkeys(r.origin for r in rows))
    grid = np.full((len(names), len(names)), np.nan)
    for r in rows:
        v = getattr(r, value)
        if v is not None:
            grid[names.index(r.origin), names.index(r.target)] = v
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 1.0 * len(names) + 1.5))
        im = ax.imshow(grid, cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
        ax.set_yticks(range(len(names)), names)
        ax.set_xlabel("target detector")
        ax.set_ylabel("origin detector")
        for i in range(len(names)):
            for j in range(len(names)):
                if np.isfinite(grid[i, j]):
                    ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center",
                            color="w" if grid[i, j] < 0.6 else "k")
        fig.colorbar(im, ax=ax, label=value.upper())
        fig.tight_layout()
        savefig(fig, path)


def norm_bars(path: str | os.PathLike, labels: Sequence[str], l0: Sequence[float],
              l2: Sequence[float]) -> None:
    """Side-by-side bars of mean P_L0 and P_L2 per attack."""
    with plt.rc_context(STYLE):
        fig, (a0, a2) = plt.subplots(1, 2, figsize=(6.4, 2.6))
        x = np.arange(len(labels))
        a0.bar(x, l0, color="tab:blue")
        a0.set_ylabel("mean P_L0")
        a2.bar(x, l2, color="tab:orange")
        a2.set_ylabel("mean P_L2")
        for ax in (a0, a2):
            ax.set_xticks(x, labels, rotation=20, ha="right")
        fig.tight_layout()
        savefig(fig, path)
