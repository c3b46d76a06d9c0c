"""Command line entry point: ``openpixel <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataset as ds
from . import experiment as ex
from . import metrics as mt
from . import network as nw
from . import openset as ops
from .render import render_outputs

log = logging.getLogger("openpixel")


def _tau_arg(text: str) -> float | None:
    if text == "auto":
        return None
    value = float(text)
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError("tau must be 'auto' or lie in [0, 1]")
    return value


def _unknown_arg(text: str) -> str | None:
    return None if text.lower() in ("none", "closed") else text


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset root holding tiles/<id>/")
    p.add_argument("--palette", help="R,G,B,class_name file (default: <data>/palette.txt or ISPRS colours)")
    p.add_argument("--test-fraction", type=float, default=None,
                   help="random test split fraction (default: Vaihingen test patches)")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)


def _add_train(p: argparse.ArgumentParser) -> None:
    d = nw.TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--patches-per-class", type=int, default=d.patches_per_class)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--precision", choices=("float32", "float64"), default=d.precision)


def _train_config(args) -> nw.TrainConfig:
    return nw.TrainConfig(
        lr=args.lr, momentum=args.momentum, batch_size=args.batch_size, epochs=args.epochs,
        patches_per_class=args.patches_per_class, seed=args.seed, precision=args.precision,
    )


def _palette(args) -> dict:
    if args.palette:
        return ds.load_palette(args.palette)
    default = Path(args.data) / "palette.txt"
    return ds.load_palette(default) if default.exists() else dict(ds.DEFAULT_PALETTE)


def _splits(args) -> dict[str, list[str]]:
    train, test = ds.split_tiles(ds.list_tiles(args.data), args.test_fraction, args.seed)
    train, val = ds.hold_out_validation(train, args.val_fraction, args.seed)
    return {"train": train, "val": val, "test": test}


def _scheme(unknown: str | None, classes) -> ds.ClassScheme:
    return ds.make_closed_scheme(classes) if unknown is None else ds.make_loco_scheme(unknown, classes)


def cmd_synth_gen(args) -> None:
    cfg = ds.SynthConfig(
        n_tiles=args.tiles, tile_size=args.size, n_classes=args.classes, seed=args.seed
    )
    tiles = ds.generate_synthetic(cfg)
    ds.write_dataset(tiles, args.out, ds.synthetic_palette(cfg.names))
    log.info("wrote %d tiles to %s", len(tiles), args.out)


def cmd_train(args) -> None:
    palette = _palette(args)
    scheme = _scheme(args.unknown, tuple(palette))
    split = _splits(args)
    tiles = ds.load_tiles(args.data, split["train"], palette)
    cfg = _train_config(args)
    quota = cfg.patches_per_class * max(cfg.epochs, 1)
    x, y = nw.stack_patches(ds.extract_training_patches(tiles, scheme, quota, args.seed))
    params = nw.init_network(scheme.n_known, args.seed, np.dtype(cfg.precision))
    params, report = nw.train(params, x, y, cfg)
    nw.save_checkpoint(params, args.out)
    Path(args.out).with_suffix(".report.json").write_text(
        json.dumps({"config": dataclasses.asdict(cfg), "unknown": args.unknown,
                    "report": dataclasses.asdict(report)}, indent=2) + "\n"
    )


def cmd_predict(args) -> None:
    palette = _palette(args)
    scheme = _scheme(args.unknown, tuple(palette))
    params = nw.load_checkpoint(args.checkpoint, scheme.n_known)
    ids = args.tiles or _splits(args)[args.split]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for tile in ds.load_tiles(args.data, ids, palette):
        probs = nw.predict_image(params, tile.image, args.batch)
        np.save(out / f"{tile.id}.npy", probs)
        pred = ops.threshold_reject(probs, args.tau)
        Image.fromarray(pred, "L").save(out / f"{tile.id}.png")
        log.info("predicted %s", tile.id)


def cmd_sweep(args) -> None:
    palette = _palette(args)
    scheme = ds.make_loco_scheme(args.unknown, tuple(palette))
    files = sorted(Path(args.probs).glob("*.npy"))
    if not files:
        raise FileNotFoundError(f"no .npy probability maps in {args.probs}")
    tiles = {t.id: t for t in ds.load_tiles(args.data, [f.stem for f in files], palette)}
    probs = np.concatenate([np.load(f).reshape(-1, scheme.n_known) for f in files])
    truth = np.concatenate([tiles[f.stem].labels.ravel() for f in files])
    curve = ops.sweep_thresholds(probs, truth, scheme, ops.default_tau_grid(args.step))
    ops.write_curve(curve, args.out)
    print(f"selected tau: {ops.select_threshold(curve):.4f}")


def _read_pred(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint8).copy()


def _pred_files(path: str) -> list[Path]:
    p = Path(path)
    files = sorted(p.glob("*.png")) if p.is_dir() else [p]
    if not files:
        raise FileNotFoundError(f"no prediction maps at {path}")
    return files


def cmd_morph(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f in _pred_files(args.pred):
        Image.fromarray(ops.morph_filter(_read_pred(f), args.side), "L").save(out / f.name)


def cmd_evaluate(args) -> None:
    palette = _palette(args)
    scheme = _scheme(args.unknown, tuple(palette))
    files = _pred_files(args.pred)
    tiles = {t.id: t for t in ds.load_tiles(args.data, [f.stem for f in files], palette)}
    cm = mt.ConfusionMatrix.empty(scheme.n_known)
    for f in files:
        cm = mt.accumulate(_read_pred(f), tiles[f.stem].labels, scheme, cm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "confusion.csv").write_text(cm.to_csv(list(scheme.known) + ["UNKNOWN"]))
    row = mt.metrics_row(args.experiment, args.unknown, args.context, args.tau, cm)
    (out / "metrics.csv").write_text(mt.metrics_csv([row]))
    print(mt.metrics_csv([row]), end="")


def _experiment_config(args, unknown_default=None) -> ex.ExperimentConfig:
    if args.manifest:
        cfg = ex.load_config(args.manifest)
    elif args.config:
        cfg = ex.load_config(args.config)
    else:
        if not args.data:
            raise SystemExit("one of --config, --manifest or --data is required")
        cfg = ex.ExperimentConfig(data_root=args.data)
    if args.data and (args.config or args.manifest):
        cfg.data_root = args.data
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if args.tau is not ...:
        overrides["tau"] = args.tau
    if args.context:
        overrides["contexts"] = args.context
    if args.unknown is not ...:
        overrides["unknown"] = args.unknown
    elif unknown_default is not None:
        overrides["unknown"] = unknown_default
    if args.out:
        overrides["out"] = args.out
    if args.test_fraction is not None:
        overrides["test_fraction"] = args.test_fraction
    if args.epochs is not None:
        cfg.train = dataclasses.replace(cfg.train, epochs=args.epochs)
    cfg = dataclasses.replace(cfg, **overrides)
    log.info("experiment config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


def _print_results(results) -> None:
    print(mt.metrics_csv([r.row() for r in results]), end="")


def cmd_run(args) -> None:
    _print_results(ex.run_experiment(_experiment_config(args)))


def cmd_rotate(args) -> None:
    _print_results(ex.run_rotation(_experiment_config(args, unknown_default="all")))


def cmd_render(args) -> None:
    for path in render_outputs(args.bundle):
        log.info("wrote %s", path)


def _add_experiment(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--manifest", help="re-run from a bundle's manifest.json")
    p.add_argument("--data", help="dataset root (overrides the config)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tau", type=_tau_arg, default=..., help="threshold in [0,1] or 'auto'")
    p.add_argument("--context", action="append", choices=ex.CONTEXTS,
                   help="context to evaluate (repeatable; default: all four)")
    p.add_argument("--unknown", type=_unknown_arg, default=...,
                   help="held-out class, 'all', or 'none' for closed_closed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--test-fraction", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="openpixel", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic tile dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--tiles", type=int, default=8)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train a patch classifier on the training split")
    _add_data(p)
    _add_train(p)
    p.add_argument("--unknown", type=_unknown_arg, required=True,
                   help="class held out of training, or 'none'")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-pixel probability maps and thresholded labels")
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--unknown", type=_unknown_arg, required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--tiles", nargs="*", help="explicit tile ids (overrides --split)")
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--batch", type=int, default=4096)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="threshold sweep over saved probability maps")
    _add_data(p)
    p.add_argument("--probs", required=True, help="directory of <tile>.npy maps")
    p.add_argument("--unknown", required=True)
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("morph", help="erosion filter over UNKNOWN labels")
    p.add_argument("--pred", required=True, help="prediction PNG or directory of them")
    p.add_argument("--side", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_morph)

    p = sub.add_parser("evaluate", help="confusion matrix and metrics for prediction maps")
    _add_data(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--unknown", type=_unknown_arg, required=True)
    p.add_argument("--context", default="open_open", choices=ex.CONTEXTS)
    p.add_argument("--experiment", default="custom")
    p.add_argument("--tau", type=float, default=0.0, help="threshold recorded in the report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="full experiment for one held-out class")
    _add_experiment(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("rotate", help="every class held out in turn")
    _add_experiment(p)
    p.set_defaults(func=cmd_rotate)

    p = sub.add_parser("render", help="colourised maps and sweep plots for a bundle")
    p.add_argument("--bundle", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"openpixel {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
