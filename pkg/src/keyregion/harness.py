"""White-box and transfer experiment runners and their report files."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detectors import Detector
from .kra import AttackOutcome, KraConfig, attack
from .metrics import asr, atr, clamp_unit

log = logging.getLogger(__name__)

CSV_HEADER = ["attack", "origin", "target", "acc_clean", "acc_attack", "asr", "atr",
              "p_l0", "p_l2", "mean_seconds"]


@dataclass
class ReportRow:
    attack: str
    origin: str
    target: str
    acc_clean: float
    acc_attack: float
    asr: float                 # clamped to [0, 1]
    asr_raw: float
    atr: Optional[float]
    p_l0: float
    p_l2: float
    mean_seconds: Optional[float]
    failures: int = 0

    @property
    def white_box(self) -> bool:
        return self.origin == self.target


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


@dataclass
class ExperimentReport:
    rows: List[ReportRow] = field(default_factory=list)
    seed: int = 0
    config: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.attack, r.origin, r.target, _fmt(r.acc_clean), _fmt(r.acc_attack),
                             _fmt(r.asr), _fmt(r.atr), _fmt(r.p_l0), _fmt(r.p_l2),
                             _fmt(r.mean_seconds)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "config": self.config,
                           "rows": [asdict(r) for r in self.rows]}, indent=2, sort_keys=True)

    def write(self, directory: str | os.PathLike, stem: str = "report") -> Tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = directory / f"{stem}.csv", directory / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json() + "\n")
        return csv_path, json_path

    def cell(self, origin: str, target: str, attack_id: Optional[str] = None) -> ReportRow:
        for r in self.rows:
            if r.origin == origin and r.target == target and attack_id in (None, r.attack):
                return r
        raise KeyError((origin, target, attack_id))


def _failed_outcome(detector: Detector, image: np.ndarray) -> AttackOutcome:
    label = detector.predict(image).label
    return AttackOutcome(False, np.zeros_like(image), 0, [], [], label, label)


def _safe_attack(detector: Detector, image: np.ndarray, config: KraConfig) -> Tuple[AttackOutcome, bool]:
    try:
        return attack(detector, image, config, keep_masks=False), False
    except (ArithmeticError, ValueError, FloatingPointError) as exc:
        log.warning("attack raised %s; counted as failure", exc)
        return _failed_outcome(detector, image), True


def run_attacks(detector: Detector, images: np.ndarray, config: KraConfig,
                jobs: int = 1) -> Tuple[List[AttackOutcome], int]:
    """KRA on every image; returns outcomes in input order and the error count."""
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda img: _safe_attack(detector, img, config), images))
    else:
        results = [_safe_attack(detector, img, config) for img in images]
    return [o for o, _ in results], sum(err for _, err in results)


def adversarial_images(images: np.ndarray, outcomes: Sequence[AttackOutcome]) -> np.ndarray:
    return np.stack([img + o.r for img, o in zip(images, outcomes)])


def summarize(attack_id: str, origin: str, target: Detector, target_name: str,
              images: np.ndarray, adversarial: np.ndarray, labels: np.ndarray,
              outcomes: Sequence[AttackOutcome], origin_asr: Optional[float],
              timing: bool, with_atr: bool) -> ReportRow:
    acc_clean = target.accuracy(images, labels)
    acc_attack = target.accuracy(adversarial, labels)
    raw = asr(acc_clean, acc_attack) if acc_clean > 0 else float("nan")
    if origin_asr is None:
        origin_asr = raw
    ratio = None
    if with_atr and origin_asr and np.isfinite(origin_asr) and np.isfinite(raw):
        ratio = atr(raw, origin_asr)
    return ReportRow(
        attack=attack_id, origin=origin, target=target_name,
        acc_clean=acc_clean, acc_attack=acc_attack,
        asr=clamp_unit(raw) if np.isfinite(raw) else float("nan"), asr_raw=raw, atr=ratio,
        p_l0=float(np.mean([o.p_l0 for o in outcomes])),
        p_l2=float(np.mean([o.p_l2 for o in outcomes])),
        mean_seconds=float(np.mean([o.seconds for o in outcomes])) if timing else None,
        failures=sum(not o.success for o in outcomes),
    )


def run_matrix(detectors: Dict[str, Detector], attacks: Dict[str, KraConfig],
               images: np.ndarray, labels: np.ndarray, out_dir: Optional[str | os.PathLike] = None,
               jobs: int = 1, timing: bool = False, seed: int = 0,
               config: Optional[dict] = None) -> ExperimentReport:
    """Generate adversarial examples on every origin, score them on every target.

    Rows are ordered origin-major; the white-box cell of each origin comes
    first. ATR is reported only when more than one detector is present.
    """
    if not detectors:
        raise ValueError("need at least one detector")
    if len(images) == 0:
        raise ValueError("test split is empty")
    report = ExperimentReport(seed=seed, config=dict(config or {}))
    with_atr = len(detectors) > 1
    for attack_id, cfg in attacks.items():
        for origin_name, origin in detectors.items():
            outcomes, errors = run_attacks(origin, images, cfg, jobs)
            if errors:
                log.warning("%s on %s: %d images raised errors", attack_id, origin_name, errors)
            adversarial = adversarial_images(images, outcomes)
            white = summarize(attack_id, origin_name, origin, origin_name, images, adversarial,
                              labels, outcomes, None, timing, with_atr)
            report.rows.append(white)
            for target_name, target in detectors.items():
                if target_name == origin_name:
                    continue
                report.rows.append(summarize(attack_id, origin_name, target, target_name, images,
                                             adversarial, labels, outcomes, white.asr_raw,
                                             timing, with_atr))
    if out_dir is not None:
        report.write(out_dir)
    return report
