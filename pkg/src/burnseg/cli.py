"""Command-line entry point: ``burnseg {synth,train,predict,eval,recover}``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
error (loss went NaN/Inf).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path


from . import config as cfgmod
from .checkpoint import load_checkpoint
from .data import _read_mask, list_scenes, load_dataset, load_scene, read_manifest, save_scene, split_dataset, write_manifest
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError
from .evaluation import MetricsReport, compute_metrics, predict_scene, recovery_experiment, scenes_to_split, threshold, write_prediction
from .synth import SynthConfig, synth_dataset
from .tensor import Rng
from .training import TrainConfig, fit
from .unet import UNetConfig, build

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("burnseg")


@dataclass
class InferenceConfig:
    tau: float = 0.5
    # 0 means: take the value stored in the checkpoint's training config
    tile_size: int = 0
    tile_stride: int = 0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="seed for every random stream")
    p.add_argument("--config", default=d, metavar="PATH", help="flat key=value config file")
    p.add_argument("--out", default=d, metavar="DIR", help="output directory (default: out)")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="no progress logging")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="burnseg", description="Burn scar segmentation on stacked RGB+NIR rasters.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic dataset (keys: SynthConfig fields)")
    _global_flags(p, suppress=True)

    p = sub.add_parser("train", help="train on a dataset root (keys: TrainConfig and UNetConfig fields)")
    p.add_argument("root", help="dataset root containing scenes/")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    _global_flags(p, suppress=True)

    p = sub.add_parser("predict", help="probability and binary maps for scenes")
    p.add_argument("checkpoint")
    p.add_argument("scenes", nargs="+", help="scene directories or dataset roots")
    _global_flags(p, suppress=True)

    p = sub.add_parser("eval", help="score predicted masks against reference masks")
    p.add_argument("pred", help="prediction directory, dataset root or PNG")
    p.add_argument("ref", help="reference directory, dataset root or PNG")
    p.add_argument("--reference", choices=("mask", "oracle"), default="mask",
                   help="which mask of a dataset root to score against")
    _global_flags(p, suppress=True)

    p = sub.add_parser("recover", help="noisy-label recovery experiment on synthetic scenes")
    _global_flags(p, suppress=True)
    return parser


# ------------------------------------------------------------------ helpers

def _configs(args, *classes):
    values = cfgmod.read_file(args.config) if args.config else {}
    return cfgmod.build_configs(values, *classes, overrides={"seed": args.seed})


def _out(args) -> Path:
    return Path(args.out if args.out else "out")


def _scene_dirs(path: Path) -> list[Path]:
    if (path / "scenes").is_dir():
        return list_scenes(path)
    return [path]


def _collect_masks(path: Path, which: str) -> dict[str, Path]:
    """scene id -> mask PNG for a dataset root, a prediction directory, a
    flat directory of PNGs or a single PNG."""
    if path.is_file():
        return {path.stem: path}
    if not path.is_dir():
        raise DataError(f"no such file or directory: {path}")
    if (path / "scenes").is_dir():
        found = {}
        for d in list_scenes(path):
            f = d / f"{which}.png"
            if not f.exists():
                raise DataError(f"missing reference mask {f}")
            found[d.name] = f
        return found
    found = {}
    for d in sorted(p for p in path.iterdir() if p.is_dir()):
        for name in ("binary.png", f"{which}.png"):
            if (d / name).exists():
                found[d.name] = d / name
                break
    for f in sorted(path.glob("*.png")):
        found.setdefault(f.stem, f)
    if not found:
        raise DataError(f"no mask PNGs found under {path}")
    return found


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    (cfg,) = _configs(args, SynthConfig)
    out = _out(args)
    scenes = synth_dataset(cfg)
    train_sc, val_sc = split_dataset(scenes, 0.2, cfg.seed) if len(scenes) > 1 else (scenes, [])
    val_ids = {s.scene_id for s in val_sc}
    for s in scenes:
        save_scene(s, out / "scenes" / s.scene_id)
    write_manifest(out, [(s.scene_id, "val" if s.scene_id in val_ids else "train", "synthetic") for s in scenes])
    (out / "synth_config.txt").write_text(cfgmod.dump(cfg), encoding="utf-8")
    log.info("wrote %d scenes to %s", len(scenes), out)
    return EXIT_OK


def _train_val(root: Path, scenes, cfg: TrainConfig):
    manifest = read_manifest(root)
    if manifest:
        tr = [s for s in scenes if manifest.get(s.scene_id, {}).get("split") == "train"]
        va = [s for s in scenes if manifest.get(s.scene_id, {}).get("split") == "val"]
        if tr and va:
            return tr, va
    if len(scenes) < 2:
        raise DataError(f"{root}: need at least two scenes to hold one out for validation")
    return split_dataset(scenes, cfg.val_fraction, cfg.seed)


def cmd_train(args) -> int:
    tcfg, ucfg = _configs(args, TrainConfig, UNetConfig)
    root = Path(args.root)
    scenes = load_dataset(root)
    if not scenes:
        raise DataError(f"dataset root has no scenes: {root}")
    train_sc, val_sc = _train_val(root, scenes, tcfg)
    tile = min(tcfg.tile_size, *(s.height for s in scenes), *(s.width for s in scenes))
    stride = min(tcfg.tile_stride, tile)
    train, val = scenes_to_split(train_sc, tile, stride), scenes_to_split(val_sc, tile, stride)
    if args.resume:
        model, state, _ = load_checkpoint(args.resume)
        state.config = tcfg
    else:
        if ucfg.in_channels != scenes[0].n_channels:
            ucfg = UNetConfig(**{**ucfg.to_dict(), "in_channels": scenes[0].n_channels})
        model, state = build(ucfg, Rng(tcfg.seed)), None
    out = _out(args)
    state = fit(model, train, val, tcfg, state=state, out_dir=out)
    last = state.history[-1] if len(state.history) else None
    if last is not None:
        print(f"epochs={len(state.history)}")
        print(f"train_loss={last.train_loss!r}")
        print(f"val_loss={last.val_loss!r}")
    return EXIT_OK


def cmd_predict(args) -> int:
    (icfg,) = _configs(args, InferenceConfig)
    model, state, _ = load_checkpoint(args.checkpoint)
    tile = icfg.tile_size or state.config.tile_size
    stride = icfg.tile_stride or state.config.tile_stride
    out = _out(args)
    for arg in args.scenes:
        for d in _scene_dirs(Path(arg)):
            sample = load_scene(d)
            t = min(tile, sample.height, sample.width)
            prob = predict_scene(model, sample, t, min(stride, t))
            write_prediction(prob, out / sample.scene_id, icfg.tau)
            log.info("%s: wrote %s", sample.scene_id, out / sample.scene_id)
    return EXIT_OK


def cmd_eval(args) -> int:
    (icfg,) = _configs(args, InferenceConfig)
    preds = _collect_masks(Path(args.pred), args.reference)
    refs = _collect_masks(Path(args.ref), args.reference)
    if len(preds) == 1 and len(refs) == 1:
        pairs = [(next(iter(preds)), next(iter(preds.values())), next(iter(refs.values())))]
    else:
        missing = sorted(set(refs) - set(preds))
        if missing:
            raise DataError(f"no prediction for scene(s): {', '.join(missing)}")
        pairs = [(sid, preds[sid], refs[sid]) for sid in sorted(refs)]
    rows = []
    total = MetricsReport(0, 0, 0, 0)
    for sid, p, r in pairs:
        pm, rm = _read_mask(p), _read_mask(r)
        if pm.shape != rm.shape:
            raise DataError(f"{sid}: prediction {p} is {pm.shape}, reference {r} is {rm.shape}")
        m = compute_metrics(threshold(pm, icfg.tau), rm)
        rows.append((sid, m))
        total = total + m
    for k, v in total.as_dict().items():
        print(f"{k}={v}")
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    cols = list(total.as_dict())
    with (out / "metrics.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_id"] + cols)
        for sid, m in rows + [("ALL", total)]:
            w.writerow([sid] + [m.as_dict()[c] for c in cols])
    return EXIT_OK


def cmd_recover(args) -> int:
    scfg, tcfg, ucfg = _configs(args, SynthConfig, TrainConfig, UNetConfig)
    if scfg.label_drop_fraction == 0 and scfg.false_label_count == 0:
        log.info("no label corruption requested; running the clean control")
    report = recovery_experiment(scfg, tcfg, ucfg, out_dir=_out(args))
    for k, v in {**report.summary(), **report.split_summaries()}.items():
        print(f"{k}={v}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "recover": cmd_recover}


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"{exc}\n", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", force=True)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, ContractError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
