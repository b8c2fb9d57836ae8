import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np
import pytest

from keyregion import data, detectors
from keyregion.detectors import TrainConfig, build, load_weights, save_weights, train

TOY_COUNTS = {"train": 1000, "val": 100, "test": 100}
TOY_DETECTORS = ("detector_a", "detector_b", "detector_c")


@dataclass
class Toy:
    manifest: data.DatasetManifest
    test_images: np.ndarray
    test_labels: np.ndarray
    detectors: Dict[str, detectors.Detector]


def _source_digest(train_cfg: TrainConfig) -> str:
    h = hashlib.sha256(repr((TOY_COUNTS, train_cfg)).encode())
    pkg = Path(data.__file__).parent
    for name in ("data.py", "detectors.py", "tensor.py", "pnm.py"):
        h.update((pkg / name).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def toy(request) -> Toy:
    """The seeded toy dataset and three trained detectors.

    Training takes a few minutes, so weights are cached under pytest's cache
    directory keyed by the generator and trainer sources.
    """
    manifest = data.DatasetManifest(dict(TOY_COUNTS))
    train_cfg = TrainConfig()
    cache = Path(request.config.cache.mkdir("keyregion-toy")) / _source_digest(train_cfg)
    cache.mkdir(exist_ok=True)
    split = None
    trained = {}
    for name in TOY_DETECTORS:
        path = cache / f"{name}.krw"
        if not path.exists():
            if split is None:
                split = data.make_split(manifest, "train")[:2], data.make_split(manifest, "val")[:2]
            d = build(name, seed=manifest.seed)
            train(d, *split[0], train_cfg, val=split[1])
            save_weights(d, path)
        trained[name] = load_weights(path, expected_arch=name)
    images, labels, _ = data.make_split(manifest, "test")
    return Toy(manifest, images, labels, trained)


_VERDICTS: List[str] = []


@pytest.fixture(scope="session")
def verdict():
    def record(number: int, name: str, passed: bool, detail: str = "") -> bool:
        tag = "PASS" if passed else "FAIL"
        _VERDICTS.append(f"[{tag}] criterion {number:2d} {name}: {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
