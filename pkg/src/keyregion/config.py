"""Flat key-value run configuration.

Resolution order, lowest to highest: built-in defaults, config file,
``KRA_*`` environment variables, command-line flags.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, get_type_hints

from .attacks import METHODS, InnerAttack
from .data import DatasetManifest
from .detectors import TrainConfig
from .kra import KraConfig
from .mlskrs import OBJECTIVES, REDUCTIONS, UPSAMPLING, SaliencyOptions

ENV_PREFIX = "KRA_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    data_dir: str = "data"
    weights_dir: str = "weights"
    out_dir: str = "runs"
    # dataset
    seed: int = 0
    n_train: int = 100
    n_val: int = 20
    n_test: int = 20
    image_size: int = 32
    # detectors and training
    detector: str = "detector_a"
    detectors: str = "detector_a,detector_b,detector_c"
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    # inner attack
    inner: str = "pgd"
    eps: float = 0.03
    alpha_step: float = 0.007
    n_steps: int = 10
    overshoot: float = 0.02
    max_steps: int = 50
    # key region attack
    t_alpha: float = 0.8
    t_prime: float = 0.1
    beta: float = 0.1
    u_max: int = 100
    layers: str = ""
    recompute_mask: bool = False
    saliency_objective: str = "logit"
    saliency_reduction: str = "signed"
    upsample: str = "bilinear"
    # execution and reporting
    split: str = "test"
    limit: int = 0
    jobs: int = 1
    timing: bool = False
    figures: bool = True
    panel_examples: int = 6
    gradcheck_probes: int = 10
    gradcheck_step: float = 1e-5

    def validate(self) -> "RunConfig":
        choices = {"inner": METHODS, "saliency_objective": OBJECTIVES,
                   "saliency_reduction": REDUCTIONS, "upsample": UPSAMPLING,
                   "split": ("train", "val", "test")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.limit < 0:
            raise ConfigError("limit must be non-negative")
        try:
            self.kra_config()
            self.train_config()
            self.manifest()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # -- views onto the library configs ------------------------------------

    def inner_attack(self) -> InnerAttack:
        return InnerAttack(self.inner, self.eps, self.alpha_step, self.n_steps,
                           self.overshoot, self.max_steps)

    def kra_config(self) -> KraConfig:
        layers = tuple(s.strip() for s in self.layers.split(",") if s.strip()) or None
        return KraConfig(self.t_alpha, self.t_prime, self.beta, layers, self.inner_attack(),
                         self.u_max, self.recompute_mask,
                         SaliencyOptions(self.saliency_objective, self.saliency_reduction,
                                         self.upsample))

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.momentum,
                           self.weight_decay, self.seed)

    def manifest(self) -> DatasetManifest:
        return DatasetManifest({"train": self.n_train, "val": self.n_val, "test": self.n_test},
                               self.image_size, self.seed)

    def detector_list(self):
        return [s.strip() for s in self.detectors.split(",") if s.strip()]

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


FIELD_TYPES: Dict[str, type] = get_type_hints(RunConfig)


def coerce(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown configuration key {key!r}")
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_text(text: str, source: str = "<config>") -> Dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        values[key] = coerce(key, raw)
    return values


def from_environ(environ: Mapping[str, str]) -> Dict[str, object]:
    values = {}
    for name, raw in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            values[key] = coerce(key, raw)
    return values


def resolve(config_file: Optional[str] = None, flags: Optional[Mapping[str, object]] = None,
            environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    merged: Dict[str, object] = {}
    if config_file is not None:
        path = Path(config_file)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
        merged.update(parse_text(text, str(path)))
    merged.update(from_environ(os.environ if environ is None else environ))
    for key, value in (flags or {}).items():
        if value is None:
            continue
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown configuration key {key!r}")
        merged[key] = value
    return dataclasses.replace(RunConfig(), **merged).validate()


def flag_spec() -> Tuple[Tuple[str, type], ...]:
    return tuple((f.name, FIELD_TYPES[f.name]) for f in fields(RunConfig))
