"""Confusion matrices over known ids + UNKNOWN, and the OA / NA / kappa scores."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import IGNORE, UNKNOWN, ClassScheme


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions; the last index stands for UNKNOWN."""

    counts: np.ndarray

    def __post_init__(self):
        c = self.counts
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {c.shape}")
        if not np.issubdtype(c.dtype, np.integer) or (c < 0).any():
            raise ValueError("confusion matrix entries must be non-negative integers")

    @classmethod
    def empty(cls, n_known: int) -> "ConfusionMatrix":
        return cls(np.zeros((n_known + 1, n_known + 1), dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def to_csv(self, labels: Sequence[str]) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["truth\\pred", *labels])
        for name, row in zip(labels, self.counts):
            w.writerow([name, *(int(v) for v in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        return cls(np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int64))


def accumulate(
    pred: np.ndarray,
    truth: np.ndarray,
    scheme: ClassScheme,
    into: ConfusionMatrix | None = None,
) -> ConfusionMatrix:
    """Tally a prediction map (training ids / UNKNOWN) against dataset-id truth."""
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {truth.shape} differ in shape")
    n = scheme.n_known
    t = scheme.remap(truth).ravel()
    p = pred.ravel()
    keep = t != IGNORE
    t, p = t[keep].astype(np.int64), p[keep].astype(np.int64)
    bad = (p >= n) & (p != UNKNOWN)
    if bad.any():
        raise ValueError(f"prediction holds label {int(p[bad][0])} outside the scheme")
    t[t == UNKNOWN] = n
    p[p == UNKNOWN] = n
    counts = np.bincount(t * (n + 1) + p, minlength=(n + 1) ** 2).reshape(n + 1, n + 1)
    cm = ConfusionMatrix(counts.astype(np.int64))
    return cm if into is None else into + cm


def _require_total(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total <= 0:
        raise ValueError("empty confusion matrix: nothing to score")
    return float(total)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    return float(np.trace(cm.counts)) / _require_total(cm)


def class_recalls(cm: ConfusionMatrix) -> np.ndarray:
    """Per-row recall; NaN for classes absent from the ground truth."""
    rows = cm.counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(cm.counts) / np.maximum(rows, 1), np.nan)


def normalized_accuracy(cm: ConfusionMatrix, rows: Sequence[int] | None = None) -> float:
    """Mean recall over the ground-truth classes present (optionally a subset of rows)."""
    _require_total(cm)
    rec = class_recalls(cm)
    if rows is not None:
        rec = rec[list(rows)]
    rec = rec[~np.isnan(rec)]
    if rec.size == 0:
        raise ValueError("no ground-truth class present in the selected rows")
    return float(rec.mean())


def cohen_kappa(cm: ConfusionMatrix) -> float:
    total = _require_total(cm)
    c = cm.counts.astype(np.float64)
    p_o = np.trace(c) / total
    p_e = float(c.sum(axis=1) @ c.sum(axis=0)) / total**2
    if p_e >= 1:
        raise ValueError("kappa undefined: expected agreement is 1 (single-class matrix)")
    return float((p_o - p_e) / (1 - p_e))


def per_class_error_rates(
    experiments: Sequence[tuple[ClassScheme, ConfusionMatrix]],
    classes: Sequence[str] | None = None,
) -> tuple[list[str], list[str], np.ndarray]:
    """Error-rate matrix: one row per held-out-class experiment, one column per dataset class.

    Entry = 1 - recall of that ground-truth class (the held-out class counts
    as correct only when predicted UNKNOWN).  NaN where a class has no pixels.
    """
    if not experiments:
        raise ValueError("no experiments given")
    classes = list(classes or experiments[0][0].classes)
    row_names = []
    table = np.full((len(experiments), len(classes)), np.nan)
    for i, (scheme, cm) in enumerate(experiments):
        if scheme.unknown is None:
            raise ValueError("error-rate rows need a held-out class per experiment")
        row_names.append(scheme.unknown)
        rec = class_recalls(cm)
        for j, name in enumerate(classes):
            idx = scheme.n_known if name == scheme.unknown else scheme.known.index(name)
            table[i, j] = 1.0 - rec[idx]
    missing = set(classes) - set(row_names)
    if missing:
        raise ValueError(f"missing experiments for held-out classes: {sorted(missing)}")
    return row_names, classes, table


def error_rates_csv(row_names: Sequence[str], classes: Sequence[str], table: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["unknown_class", *classes])
    for name, row in zip(row_names, table):
        w.writerow([name, *("" if np.isnan(v) else f"{v:.6f}" for v in row)])
    return buf.getvalue()


METRICS_HEADER = ("experiment", "unknown_class", "context", "tau", "oa", "na", "kappa")


def metrics_row(experiment: str, unknown: str | None, context: str, tau: float, cm: ConfusionMatrix) -> list[str]:
    try:
        kappa = f"{cohen_kappa(cm):.6f}"
    except ValueError:
        kappa = ""
    return [
        experiment,
        unknown or "",
        context,
        f"{tau:.4f}",
        f"{overall_accuracy(cm):.6f}",
        f"{normalized_accuracy(cm):.6f}",
        kappa,
    ]


def metrics_csv(rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    w.writerows(rows)
    return buf.getvalue()
