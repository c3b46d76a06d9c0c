"""Experiment orchestration: the four evaluation contexts over leave-one-class-out rotations.

A run writes a self-describing bundle::

    out/manifest.json                  every setting needed to re-run
    out/metrics.csv                    experiment,unknown_class,context,tau,oa,na,kappa
    out/summary.json                   per-run extras (known-class NA, unknown accuracy)
    out/checkpoints/<key>.opx          trained models, shared across contexts
    out/probs/<key>/<tile>.npy         softmax maps of validation and test tiles
    out/runs/<unknown>/<context>/      predictions/*.png, confusion.csv, metrics.csv, run.json
    out/runs/<unknown>/sweep.csv       threshold sweep on the validation tiles
    out/error_rates_<context>.csv      rotation only: error rate per held-out class
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataset as ds
from . import metrics as mt
from . import network as nw
from . import openset as ops

log = logging.getLogger(__name__)

CONTEXTS = ("closed_closed", "closed_open", "open_open", "open_morph")
METHOD = {
    "closed_closed": "pixelwise_closed",
    "closed_open": "pixelwise",
    "open_open": "openpixel",
    "open_morph": "morph_openpixel",
}


@dataclass
class ExperimentConfig:
    data_root: str
    out: str = "results"
    palette: str | None = None
    unknown: str | None = None  # class name, "all", or None for closed_closed only
    contexts: list[str] = field(default_factory=lambda: list(CONTEXTS))
    train: nw.TrainConfig = field(default_factory=nw.TrainConfig)
    tau: float | None = None  # None: pick by sweeping the validation tiles
    tau_step: float = 0.01
    morph_side: int = 3
    inclusive: bool = True
    test_fraction: float | None = None  # None: Vaihingen test patches
    val_fraction: float = 0.1
    seed: int = 0
    predict_batch: int = 4096

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = nw.TrainConfig(**self.train)
        bad = [c for c in self.contexts if c not in CONTEXTS]
        if bad or not self.contexts:
            raise ValueError(f"contexts must be drawn from {CONTEXTS}, got {self.contexts}")
        if self.tau is not None and not 0 <= self.tau <= 1:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0 < self.tau_step <= 1:
            raise ValueError("tau_step must lie in (0, 1]")
        ops.OpenSetConfig(self.tau or 0.0, self.morph_side, self.inclusive)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path: str | Path) -> ExperimentConfig:
    d = json.loads(Path(path).read_text())
    return ExperimentConfig.from_dict(d.get("config", d))


def _palette(cfg: ExperimentConfig) -> dict[str, tuple[int, int, int]]:
    if cfg.palette:
        return ds.load_palette(cfg.palette)
    default = Path(cfg.data_root) / "palette.txt"
    return ds.load_palette(default) if default.exists() else dict(ds.DEFAULT_PALETTE)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Workspace:
    """Loaded tiles, splits and caches shared by every run of one config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.palette = _palette(cfg)
        self.classes = tuple(self.palette)
        ids = ds.list_tiles(cfg.data_root)
        train, self.test_ids = ds.split_tiles(ids, cfg.test_fraction, cfg.seed)
        self.train_ids, self.val_ids = ds.hold_out_validation(train, cfg.val_fraction, cfg.seed)
        self._tiles: dict[str, ds.LabeledTile] = {}
        self.timing: dict[str, float] = {}

    def tile(self, tile_id: str) -> ds.LabeledTile:
        if tile_id not in self._tiles:
            root = Path(self.cfg.data_root) / "tiles" / tile_id
            self._tiles[tile_id] = ds.load_tile(
                root / "image.png", root / "labels.png", self.palette, tile_id
            )
        return self._tiles[tile_id]

    def model_key(self, scheme: ds.ClassScheme) -> str:
        blob = json.dumps(
            {
                "known": scheme.known,
                "train": dataclasses.asdict(self.cfg.train),
                "tiles": self.train_ids,
                "seed": self.cfg.seed,
            },
            sort_keys=True,
        )
        return "-".join(scheme.known) + "_" + hashlib.sha1(blob.encode()).hexdigest()[:10]

    def model(self, scheme: ds.ClassScheme) -> tuple[str, nw.NetworkParams]:
        """Train the model for this known-class set, or load it if already trained."""
        key = self.model_key(scheme)
        path = self.out / "checkpoints" / f"{key}.opx"
        if path.exists():
            log.info("loading checkpoint %s", path)
            return key, nw.load_checkpoint(path, scheme.n_known)
        tcfg = self.cfg.train
        tiles = [self.tile(i) for i in self.train_ids]
        quota = tcfg.patches_per_class * max(tcfg.epochs, 1)
        x, y = nw.stack_patches(ds.extract_training_patches(tiles, scheme, quota, self.cfg.seed))
        log.info("training %s on %d patches", key, len(y))
        t0 = time.perf_counter()
        params = nw.init_network(scheme.n_known, self.cfg.seed, np.dtype(tcfg.precision))
        params, report = nw.train(params, x, y, tcfg)
        self.timing[f"train/{key}"] = time.perf_counter() - t0
        path.parent.mkdir(parents=True, exist_ok=True)
        nw.save_checkpoint(params, path)
        (path.with_suffix(".report.json")).write_text(_dump(dataclasses.asdict(report)))
        return key, params

    def probs(self, key: str, params: nw.NetworkParams, tile_id: str) -> np.ndarray:
        path = self.out / "probs" / key / f"{tile_id}.npy"
        if path.exists():
            return np.load(path)
        t0 = time.perf_counter()
        p = nw.predict_image(params, self.tile(tile_id).image, self.cfg.predict_batch)
        self.timing[f"predict/{key}/{tile_id}"] = time.perf_counter() - t0
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, p)
        return p


@dataclass
class RunResult:
    experiment: str
    unknown: str | None
    context: str
    tau: float
    cm: mt.ConfusionMatrix
    scheme: ds.ClassScheme
    known_na: float
    unknown_acc: float | None

    def row(self) -> list[str]:
        return mt.metrics_row(self.experiment, self.unknown, self.context, self.tau, self.cm)

    def summary(self) -> dict:
        return {
            "experiment": self.experiment,
            "unknown_class": self.unknown,
            "context": self.context,
            "tau": self.tau,
            "oa": mt.overall_accuracy(self.cm),
            "na": mt.normalized_accuracy(self.cm),
            "known_na": self.known_na,
            "unknown_acc": self.unknown_acc,
            "confusion": self.cm.counts.tolist(),
        }


def _cm_labels(scheme: ds.ClassScheme) -> list[str]:
    return list(scheme.known) + ["UNKNOWN"]


def _known_rows(scheme: ds.ClassScheme, known: tuple[str, ...]) -> list[int]:
    return [scheme.known.index(k) for k in known]


def _write_run(ws: Workspace, run_dir: Path, result: RunResult, preds: dict[str, np.ndarray]) -> None:
    pdir = run_dir / "predictions"
    pdir.mkdir(parents=True, exist_ok=True)
    for tile_id, pred in preds.items():
        Image.fromarray(pred, "L").save(pdir / f"{tile_id}.png")
    (run_dir / "confusion.csv").write_text(result.cm.to_csv(_cm_labels(result.scheme)))
    (run_dir / "metrics.csv").write_text(mt.metrics_csv([result.row()]))
    (run_dir / "run.json").write_text(
        _dump(
            {
                "classes": list(result.scheme.classes),
                "unknown": result.scheme.unknown,
                "palette": {k: list(v) for k, v in ws.palette.items()},
                "context": result.context,
                "tau": result.tau,
                "morph_side": ws.cfg.morph_side if result.context == "open_morph" else None,
                "tiles": list(preds),
            }
        )
    )


def _evaluate(
    ws: Workspace,
    key: str,
    params: nw.NetworkParams,
    scheme: ds.ClassScheme,
    context: str,
    tau: float,
    run_dir: Path,
    report_unknown: str | None,
    known_for_na: tuple[str, ...],
) -> RunResult:
    cm = mt.ConfusionMatrix.empty(scheme.n_known)
    preds = {}
    for tile_id in ws.test_ids:
        tile = ws.tile(tile_id)
        pred = ops.threshold_reject(ws.probs(key, params, tile_id), tau, ws.cfg.inclusive)
        if context == "open_morph":
            pred = ops.morph_filter(pred, ws.cfg.morph_side)
        preds[tile_id] = pred
        cm = mt.accumulate(pred, tile.labels, scheme, cm)
    rec = mt.class_recalls(cm)
    unknown_acc = None
    if scheme.unknown is not None and not np.isnan(rec[-1]):
        unknown_acc = float(rec[-1])
    result = RunResult(
        METHOD[context], report_unknown, context, tau, cm, scheme,
        mt.normalized_accuracy(cm, _known_rows(scheme, known_for_na)), unknown_acc,
    )
    _write_run(ws, run_dir, result, preds)
    return result


def _select_tau(ws: Workspace, key: str, params, scheme: ds.ClassScheme, run_root: Path) -> float:
    if ws.cfg.tau is not None:
        return ws.cfg.tau
    probs = np.concatenate(
        [ws.probs(key, params, i).reshape(-1, scheme.n_known) for i in ws.val_ids]
    )
    truth = np.concatenate([ws.tile(i).labels.ravel() for i in ws.val_ids])
    curve = ops.sweep_thresholds(
        probs, truth, scheme, ops.default_tau_grid(ws.cfg.tau_step), ws.cfg.inclusive
    )
    run_root.mkdir(parents=True, exist_ok=True)
    ops.write_curve(curve, run_root / "sweep.csv")
    tau = ops.select_threshold(curve)
    log.info("selected tau %.4f for unknown=%s", tau, scheme.unknown)
    return tau


def _run_unknown(ws: Workspace, unknown: str, contexts: list[str]) -> list[RunResult]:
    scheme = ds.make_loco_scheme(unknown, ws.classes)
    run_root = ws.out / "runs" / unknown
    key, params = ws.model(scheme)
    results = []
    tau = None
    for context in contexts:
        if context == "closed_closed":
            raise ValueError(
                f"context closed_closed trains on every class; it cannot hold out {unknown!r}"
            )
        if context == "closed_open":
            t = 0.0
        else:
            if tau is None:
                tau = _select_tau(ws, key, params, scheme, run_root)
            t = tau
        results.append(
            _evaluate(ws, key, params, scheme, context, t, run_root / context, unknown, scheme.known)
        )
    return results


def _run_closed(ws: Workspace, report_as: list[str | None]) -> list[RunResult]:
    scheme = ds.make_closed_scheme(ws.classes)
    key, params = ws.model(scheme)
    out = []
    for unknown in report_as:
        known = tuple(c for c in ws.classes if c != unknown)
        name = unknown or "closed"
        out.append(
            _evaluate(ws, key, params, scheme, "closed_closed", 0.0,
                      ws.out / "runs" / name / "closed_closed", unknown, known)
        )
    return out


def _finish(ws: Workspace, results: list[RunResult]) -> None:
    ws.out.mkdir(parents=True, exist_ok=True)
    (ws.out / "metrics.csv").write_text(mt.metrics_csv([r.row() for r in results]))
    (ws.out / "summary.json").write_text(_dump([r.summary() for r in results]))
    (ws.out / "timing.json").write_text(_dump(ws.timing))


def _write_manifest(cfg: ExperimentConfig, ws: Workspace) -> None:
    import platform

    from . import __version__

    ws.out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.to_dict(),
        "splits": {"train": ws.train_ids, "validation": ws.val_ids, "test": ws.test_ids},
        "classes": list(ws.classes),
        "versions": {
            "openpixel": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    (ws.out / "manifest.json").write_text(_dump(manifest))


def run_experiment(cfg: ExperimentConfig) -> list[RunResult]:
    """Train (or reuse) models and evaluate the requested contexts for one held-out class.

    ``cfg.unknown`` None is only valid for the closed_closed context.
    """
    if cfg.unknown == "all":
        return run_rotation(cfg)
    ws = Workspace(cfg)
    if cfg.unknown is None:
        if cfg.contexts != ["closed_closed"]:
            raise ValueError("open-set contexts need an unknown class")
    elif cfg.unknown not in ws.classes:
        raise ValueError(f"unknown class {cfg.unknown!r} is not one of {ws.classes}")
    _write_manifest(cfg, ws)
    results = []
    open_contexts = [c for c in cfg.contexts if c != "closed_closed"]
    if cfg.unknown is not None:
        if "closed_closed" in cfg.contexts:
            raise ValueError(
                f"context closed_closed trains on every class; it cannot hold out {cfg.unknown!r}"
            )
        results += _run_unknown(ws, cfg.unknown, open_contexts)
    else:
        results += _run_closed(ws, [None])
    _finish(ws, results)
    return results


def run_rotation(cfg: ExperimentConfig) -> list[RunResult]:
    """Every class held out in turn; closed_closed rows repeat the all-class model per rotation."""
    ws = Workspace(cfg)
    _write_manifest(cfg, ws)
    results: list[RunResult] = []
    open_contexts = [c for c in cfg.contexts if c != "closed_closed"]
    closed = {}
    if "closed_closed" in cfg.contexts:
        closed = {r.unknown: r for r in _run_closed(ws, list(ws.classes))}
    by_context: dict[str, list[tuple[ds.ClassScheme, mt.ConfusionMatrix]]] = {}
    for unknown in ws.classes:
        try:
            rs = _run_unknown(ws, unknown, open_contexts)
        except Exception as exc:
            raise RuntimeError(f"rotation with unknown class {unknown!r} failed: {exc}") from exc
        rs_by = {r.context: r for r in rs}
        for context in cfg.contexts:
            r = closed[unknown] if context == "closed_closed" else rs_by[context]
            results.append(r)
            if context != "closed_closed":
                by_context.setdefault(context, []).append((r.scheme, r.cm))
    for context, entries in by_context.items():
        names, classes, table = mt.per_class_error_rates(entries, ws.classes)
        (ws.out / f"error_rates_{context}.csv").write_text(mt.error_rates_csv(names, classes, table))
    _finish(ws, results)
    return results


def run_from_manifest(path: str | Path, out: str | None = None) -> list[RunResult]:
    cfg = load_config(path)
    if out is not None:
        cfg.out = out
    return run_experiment(cfg)
