"""Colourised prediction maps and threshold-sweep plots from a result bundle."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import dataset as ds
from .openset import SweepCurve

SERIES = (
    ("acc_all", (0, 0, 0)),
    ("acc_known", (31, 119, 180)),
    ("acc_unknown", (214, 39, 40)),
    ("acc_mean", (44, 160, 44)),
)


def colorize(pred: np.ndarray, known: list[str], palette: dict[str, tuple[int, int, int]]) -> np.ndarray:
    """Training-id prediction map to RGB; UNKNOWN is red, anything else black."""
    table = np.zeros((256, 3), dtype=np.uint8)
    table[:] = ds.IGNORE_COLOR
    for t, name in enumerate(known):
        table[t] = palette[name]
    table[ds.UNKNOWN] = ds.UNKNOWN_COLOR
    return table[pred]


def plot_curve(curve: SweepCurve, size: tuple[int, int] = (480, 320)) -> Image.Image:
    """Line plot of the sweep columns against tau on a white canvas."""
    w, h = size
    left, right, top, bottom = 40, 110, 15, 30
    im = Image.new("RGB", size, (255, 255, 255))
    draw = ImageDraw.Draw(im)
    x0, x1, y0, y1 = left, w - right, h - bottom, top

    def px(tau: float, acc: float) -> tuple[float, float]:
        return x0 + tau * (x1 - x0), y0 + acc * (y1 - y0)

    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        gx, gy = px(v, v)
        draw.line([px(0, v), px(1, v)], fill=(225, 225, 225))
        draw.line([px(v, 0), px(v, 1)], fill=(225, 225, 225))
        draw.text((4, gy - 6), f"{v:.2f}", fill=(0, 0, 0))
        draw.text((gx - 10, y0 + 8), f"{v:.2f}", fill=(0, 0, 0))
    draw.rectangle([x0, y1, x1, y0], outline=(0, 0, 0))
    for i, (name, color) in enumerate(SERIES):
        pts = [
            px(t, a) for t, a in zip(curve.tau, getattr(curve, name)) if a is not None
        ]
        if len(pts) > 1:
            draw.line(pts, fill=color, width=2)
        elif pts:
            draw.ellipse([pts[0][0] - 2, pts[0][1] - 2, pts[0][0] + 2, pts[0][1] + 2], fill=color)
        ly = top + 14 * i
        draw.line([(x1 + 8, ly + 6), (x1 + 24, ly + 6)], fill=color, width=2)
        draw.text((x1 + 28, ly), name, fill=(0, 0, 0))
    return im


def render_outputs(bundle: str | Path) -> list[Path]:
    """Write ``rendered/`` PNGs next to every run's predictions and a plot per sweep.csv."""
    bundle = Path(bundle)
    runs = sorted(bundle.glob("runs/*/*/run.json"))
    sweeps = sorted(bundle.glob("runs/*/sweep.csv"))
    if not runs and not sweeps:
        raise FileNotFoundError(f"{bundle}: no run.json or sweep.csv files to render")
    written = []
    for meta_path in runs:
        meta = json.loads(meta_path.read_text())
        known = [c for c in meta["classes"] if c != meta["unknown"]]
        palette = {k: tuple(v) for k, v in meta["palette"].items()}
        out_dir = meta_path.parent / "rendered"
        out_dir.mkdir(exist_ok=True)
        for tile_id in meta["tiles"]:
            src = meta_path.parent / "predictions" / f"{tile_id}.png"
            if not src.exists():
                raise FileNotFoundError(f"missing prediction map {src}")
            with Image.open(src) as im:
                pred = np.asarray(im)
            dst = out_dir / f"{tile_id}.png"
            Image.fromarray(colorize(pred, known, palette), "RGB").save(dst)
            written.append(dst)
    for sweep in sweeps:
        dst = sweep.with_suffix(".png")
        plot_curve(SweepCurve.from_csv(sweep.read_text())).save(dst)
        written.append(dst)
    return written
