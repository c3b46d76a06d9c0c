"""Open-set decisions on top of softmax maps: thresholding, threshold sweeps, erosion filter."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .dataset import IGNORE, UNKNOWN, ClassScheme


@dataclass
class OpenSetConfig:
    tau: float = 0.7
    morph_side: int = 3
    inclusive: bool = True  # accept a pixel when max prob >= tau (False: > tau)

    def __post_init__(self):
        if not 0 <= self.tau <= 1:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        _check_side(self.morph_side)


def _check_side(side: int) -> None:
    if side < 3 or side % 2 == 0:
        raise ValueError(f"structuring element side must be odd and >= 3, got {side}")


def threshold_reject(probs: np.ndarray, tau: float, inclusive: bool = True) -> np.ndarray:
    """Argmax labels, or UNKNOWN where the winning probability falls short of ``tau``.

    Works on any ``(..., n_classes)`` array; argmax ties go to the lowest id.
    """
    if not 0 <= tau <= 1:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if probs.shape[-1] >= IGNORE:
        raise ValueError("too many classes for 8-bit prediction maps")
    top = probs.max(axis=-1)
    reject = top < tau if inclusive else top <= tau
    return np.where(reject, UNKNOWN, probs.argmax(axis=-1)).astype(np.uint8)


@dataclass
class SweepCurve:
    tau: list[float]
    acc_all: list[float | None]
    acc_known: list[float | None]
    acc_unknown: list[float | None]
    acc_mean: list[float | None]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau", "acc_all", "acc_known", "acc_unknown", "acc_mean"])
        for row in zip(self.tau, self.acc_all, self.acc_known, self.acc_unknown, self.acc_mean):
            w.writerow(["" if v is None else f"{v:.6f}" for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SweepCurve":
        rows = list(csv.DictReader(io.StringIO(text)))
        get = lambda r, k: None if r[k] == "" else float(r[k])  # noqa: E731
        return cls(
            [float(r["tau"]) for r in rows],
            [get(r, "acc_all") for r in rows],
            [get(r, "acc_known") for r in rows],
            [get(r, "acc_unknown") for r in rows],
            [get(r, "acc_mean") for r in rows],
        )


def _recalls(pred: np.ndarray, truth: np.ndarray, n_known: int) -> tuple[list[float], float | None]:
    known = []
    for c in range(n_known):
        m = truth == c
        if m.any():
            known.append(float((pred[m] == c).mean()))
    u = truth == UNKNOWN
    unknown = float((pred[u] == UNKNOWN).mean()) if u.any() else None
    return known, unknown


def sweep_thresholds(
    probs: np.ndarray,
    truth: np.ndarray,
    scheme: ClassScheme,
    taus,
    inclusive: bool = True,
) -> SweepCurve:
    """Accuracy columns for each threshold.

    ``probs`` is ``(..., n_known)`` and ``truth`` the matching dataset-id
    labels.  acc_known is the mean recall over known classes, acc_unknown the
    fraction of unknown-class pixels rejected, acc_all the mean recall over
    every class present (UNKNOWN included) and acc_mean the average of
    acc_known and acc_unknown.  IGNORE pixels are dropped.
    """
    taus = [float(t) for t in taus]
    if not taus:
        raise ValueError("empty threshold grid")
    if any(not 0 <= t <= 1 for t in taus):
        raise ValueError("thresholds must lie in [0, 1]")
    if any(b <= a for a, b in zip(taus, taus[1:])):
        raise ValueError("thresholds must be strictly increasing")
    if probs.shape[-1] != scheme.n_known or probs.shape[:-1] != truth.shape:
        raise ValueError(f"probabilities {probs.shape} do not fit truth {truth.shape} / scheme")
    remapped = scheme.remap(truth).ravel()
    keep = remapped != IGNORE
    flat = probs.reshape(-1, probs.shape[-1])[keep]
    remapped = remapped[keep]
    curve = SweepCurve([], [], [], [], [])
    for tau in taus:
        pred = threshold_reject(flat, tau, inclusive)
        known, unknown = _recalls(pred, remapped, scheme.n_known)
        per_class = known + ([unknown] if unknown is not None else [])
        k = float(np.mean(known)) if known else None
        curve.tau.append(tau)
        curve.acc_all.append(float(np.mean(per_class)) if per_class else None)
        curve.acc_known.append(k)
        curve.acc_unknown.append(unknown)
        curve.acc_mean.append(None if k is None or unknown is None else (k + unknown) / 2)
    return curve


def select_threshold(curve: SweepCurve) -> float:
    """Threshold with the best acc_mean; the smallest one wins ties."""
    best = None
    for tau, score in zip(curve.tau, curve.acc_mean):
        if score is not None and (best is None or score > best[1]):
            best = (tau, score)
    if best is None:
        raise ValueError("no threshold has a defined mean accuracy (no unknown pixels?)")
    return best[0]


def default_tau_grid(step: float = 0.05) -> list[float]:
    n = int(round(1 / step))
    return [round(i * step, 10) for i in range(n + 1)]


def morph_filter(pred: np.ndarray, side: int = 3) -> np.ndarray:
    """Multi-class erosion of the UNKNOWN region.

    Each UNKNOWN pixel whose ``side`` x ``side`` neighbourhood (clipped to the
    map) holds any known label takes the most frequent known neighbour label,
    lowest id on ties.  Interior UNKNOWN pixels and all known pixels are kept.
    Decisions read the input only, so the result does not depend on scan order.
    """
    _check_side(side)
    if pred.ndim != 2:
        raise ValueError(f"expected an H x W prediction map, got {pred.shape}")
    known_ids = np.unique(pred[pred != UNKNOWN])
    if known_ids.size and known_ids.max() >= IGNORE:
        raise ValueError("prediction map holds labels other than known ids and UNKNOWN")
    out = pred.copy()
    unknown = pred == UNKNOWN
    if not unknown.any() or not known_ids.size:
        return out
    r = side // 2
    h, w = pred.shape
    padded = np.pad(pred, r, constant_values=UNKNOWN)
    best_count = np.zeros((h, w), dtype=np.int32)
    best_label = np.full((h, w), UNKNOWN, dtype=np.uint8)
    for c in known_ids:  # ascending, so strict > keeps the lowest id on ties
        m = (padded == c).astype(np.int32)
        count = sum(m[i : i + h, j : j + w] for i in range(side) for j in range(side))
        better = count > best_count
        best_count[better] = count[better]
        best_label[better] = c
    out[unknown] = best_label[unknown]
    return out


def write_curve(curve: SweepCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(curve.to_csv())
