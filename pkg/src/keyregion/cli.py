"""Command-line entry point: ``keyregion <subcommand> [--key value ...]``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data as datasets
from .attacks import METHODS
from .config import ConfigError, RunConfig, flag_spec, resolve
from .detectors import (REGISTRY, ArchitectureError, DivergenceError, WeightsFormatError, build,
                        gradient_check, load_weights, save_weights, train)
from .harness import adversarial_images, run_attacks, run_matrix
from .metrics import asr, normalize_for_display, p_l0, p_l2
from .pnm import write_ppm

log = logging.getLogger("keyregion")

GRADCHECK_TOLERANCE = 1e-4


class RunError(RuntimeError):
    """Runtime or I/O failure (exit status 1)."""


def weights_path(cfg: RunConfig, arch: str) -> Path:
    return Path(cfg.weights_dir) / f"{arch}.krw"


def _write_config(directory: Path, cfg: RunConfig, name: str = "resolved_config.txt") -> None:
    (directory / name).write_text(cfg.to_text())


def _load_detector(cfg: RunConfig, arch: str):
    path = weights_path(cfg, arch)
    try:
        return load_weights(path, expected_arch=arch)
    except FileNotFoundError:
        raise RunError(f"missing weights file {path}; run `keyregion train --detector {arch}`")
    except (OSError, WeightsFormatError, ArchitectureError) as exc:
        raise RunError(f"cannot load {path}: {exc}") from exc


def _load_split(cfg: RunConfig, split: str):
    try:
        images, labels, ids = datasets.load_split(cfg.data_dir, split)
    except (OSError, ValueError) as exc:
        raise RunError(f"cannot load split {split!r} from {cfg.data_dir}: {exc}") from exc
    if cfg.limit:
        images, labels, ids = images[:cfg.limit], labels[:cfg.limit], ids[:cfg.limit]
    return images, labels, ids


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> int:
    manifest = cfg.manifest()
    root = Path(cfg.data_dir)
    try:
        count = datasets.build_dataset(manifest, root)
        _write_config(root, cfg)
    except OSError as exc:
        raise RunError(str(exc)) from exc
    counts = ", ".join(f"{s}={manifest.counts[s]}x2" for s in datasets.SPLITS)
    print(f"wrote {count} images to {root} ({counts}; {manifest.size}x{manifest.size}; "
          f"generator v{manifest.version}; seed {manifest.seed})")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    train_x, train_y, _ = _load_split(cfg, "train")
    val_x, val_y, _ = _load_split(cfg, "val")
    try:
        detector = build(cfg.detector, seed=cfg.seed)
    except ArchitectureError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        history = train(detector, train_x, train_y, cfg.train_config(), val=(val_x, val_y),
                        log=lambda row: log.info("epoch %d loss %.4f train_acc %.4f val_acc %.4f",
                                                 row["epoch"], row["loss"], row["train_acc"],
                                                 row["val_acc"]))
    except DivergenceError as exc:
        raise RunError(str(exc)) from exc
    out = Path(cfg.weights_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_weights(detector, weights_path(cfg, cfg.detector))
        history.write_csv(out / f"{cfg.detector}_history.csv")
        _write_config(out, cfg, f"{cfg.detector}_config.txt")
    except OSError as exc:
        raise RunError(f"cannot write weights under {out}: {exc}") from exc
    last = history.epochs[-1]
    print(f"{cfg.detector}: train_acc={last['train_acc']:.4f} val_acc={last['val_acc']:.4f} "
          f"weights={weights_path(cfg, cfg.detector)}")
    return 0


def _panel(cfg: RunConfig, path: Path, images, outcomes, ids) -> None:
    from .plotting import perturbation_panel

    pick = list(range(min(cfg.panel_examples, len(images))))
    if not pick:
        return
    perturbation_panel(path, [images[i] for i in pick], [outcomes[i].r for i in pick],
                       [np.any(outcomes[i].r != 0, axis=0) for i in pick],
                       [ids[i] for i in pick])


def cmd_attack(cfg: RunConfig) -> int:
    detector = _load_detector(cfg, cfg.detector)
    images, labels, ids = _load_split(cfg, cfg.split)
    kra_cfg = cfg.kra_config()
    outcomes, errors = run_attacks(detector, images, kra_cfg, cfg.jobs)
    adversarial = adversarial_images(images, outcomes)

    out = Path(cfg.out_dir) / f"attack_{cfg.detector}_{cfg.inner}"
    try:
        (out / "adv").mkdir(parents=True, exist_ok=True)
        (out / "pert").mkdir(parents=True, exist_ok=True)
        _write_config(out, cfg)
        with open(out / "outcomes.jsonl", "w") as fh:
            for image_id, outcome in zip(ids, outcomes):
                fh.write(json.dumps(outcome.to_record(image_id, cfg.timing), sort_keys=True) + "\n")
        for image_id, adv, outcome in zip(ids, adversarial, outcomes):
            write_ppm(out / "adv" / f"{image_id}.ppm", adv)
            write_ppm(out / "pert" / f"{image_id}.ppm", normalize_for_display(outcome.r))
    except OSError as exc:
        raise RunError(f"cannot write attack outputs under {out}: {exc}") from exc

    acc_clean = detector.accuracy(images, labels)
    acc_attack = detector.accuracy(adversarial, labels)
    rate = asr(acc_clean, acc_attack) if acc_clean > 0 else None
    flip_rate = float(np.mean([o.success for o in outcomes]))
    summary = {
        "detector": cfg.detector,
        "attack": f"kra-{cfg.inner}",
        "images": len(images),
        "acc_clean": acc_clean,
        "acc_attack": acc_attack,
        "asr": rate,
        "flip_rate": flip_rate,
        "p_l0": float(np.mean([p_l0(o.r) for o in outcomes])),
        "p_l2": float(np.mean([p_l2(o.r) for o in outcomes])),
        "mean_iterations": float(np.mean([o.iterations for o in outcomes])),
        "empty_mask_failures": sum(o.empty_mask_at_floor for o in outcomes),
        "errors": errors,
        "mean_seconds": float(np.mean([o.seconds for o in outcomes])) if cfg.timing else None,
        "config": cfg.to_text().splitlines(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if cfg.figures:
        (out / "figures").mkdir(exist_ok=True)
        _panel(cfg, out / "figures" / "perturbations.png", images, outcomes, ids)

    if all(size == 0 for o in outcomes for size in o.mask_sizes):
        log.warning("every key region mask was empty; check t_alpha/t_prime")
    seconds = np.mean([o.seconds for o in outcomes])
    asr_text = "n/a" if rate is None else f"{rate:.4f}"
    print(f"kra-{cfg.inner} on {cfg.detector} ({len(images)} images): ASR={asr_text} "
          f"flip_rate={flip_rate:.4f} P_L0={summary['p_l0']:.4f} P_L2={summary['p_l2']:.6f} "
          f"mean_seconds={seconds:.3f} -> {out}")
    return 0


def cmd_matrix(cfg: RunConfig) -> int:
    names = cfg.detector_list()
    if not names:
        raise ConfigError("detectors list is empty")
    detectors = {name: _load_detector(cfg, name) for name in names}
    images, labels, _ = _load_split(cfg, cfg.split)
    out = Path(cfg.out_dir) / "matrix"
    attack_id = f"kra-{cfg.inner}"
    try:
        report = run_matrix(detectors, {attack_id: cfg.kra_config()}, images, labels, out,
                            jobs=cfg.jobs, timing=cfg.timing, seed=cfg.seed,
                            config={"resolved": cfg.to_text().splitlines()})
        _write_config(out, cfg)
        if cfg.figures:
            from .plotting import norm_bars, transfer_heatmap

            (out / "figures").mkdir(exist_ok=True)
            if len(names) > 1:
                transfer_heatmap(out / "figures" / "atr.png", report, attack_id)
            transfer_heatmap(out / "figures" / "asr.png", report, attack_id, value="asr")
            white = [r for r in report.rows if r.white_box]
            norm_bars(out / "figures" / "norms.png", [r.origin for r in white],
                      [r.p_l0 for r in white], [r.p_l2 for r in white])
    except OSError as exc:
        raise RunError(f"cannot write matrix outputs under {out}: {exc}") from exc
    sys.stdout.write(report.to_csv())
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    worst_overall = 0.0
    for arch in sorted(REGISTRY):
        errors = gradient_check(arch, cfg.seed, cfg.gradcheck_probes, cfg.gradcheck_step)
        worst = max(errors.values())
        worst_overall = max(worst_overall, worst)
        status = "ok" if worst < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{arch}: max relative error {worst:.3e} over {len(errors)} tensors "
              f"x {cfg.gradcheck_probes} probes [{status}]")
    return 0 if worst_overall < GRADCHECK_TOLERANCE else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "matrix": cmd_matrix,
    "gradcheck": cmd_gradcheck,
}


def _bool_flag(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("-v", "--verbose", action="store_true")
    for key, kind in flag_spec():
        flag = "--" + key.replace("_", "-")
        kwargs = {"dest": key, "default": None, "metavar": kind.__name__.upper()}
        if kind is bool:
            kwargs.update(type=_bool_flag, nargs="?", const=True)
        else:
            kwargs["type"] = kind
        if key == "inner":
            kwargs["choices"] = METHODS
            del kwargs["metavar"]
        common.add_argument(flag, **kwargs)

    parser = argparse.ArgumentParser(prog="keyregion",
                                     description="Key region adversarial attacks on toy fake-image detectors.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate the synthetic real/fake dataset",
        "train": "train one detector",
        "attack": "run the key region attack on one detector",
        "matrix": "white-box and transfer matrix over several detectors",
        "gradcheck": "compare analytic and finite-difference gradients",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {key: getattr(args, key) for key, _ in flag_spec()}
    try:
        cfg = resolve(args.config, flags)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"keyregion: error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write("# resolved configuration\n")
    sys.stdout.write("".join(f"# {line}\n" for line in cfg.to_text().splitlines()))
    try:
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"keyregion: error: {exc}", file=sys.stderr)
        return 2
    except RunError as exc:
        print(f"keyregion: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
