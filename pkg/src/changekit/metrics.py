"""Binary change-map evaluation: confusion counts and the five scores.

Degenerate-denominator conventions (documented, used by all emitters):
precision, recall and F1 are 0 when their denominators vanish; kappa is 0
when chance agreement equals 1.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp,
                         self.fn + other.fn, self.tn + other.tn)


def confusion(pred: np.ndarray, gt: np.ndarray,
              mask: np.ndarray | None = None) -> Confusion:
    """Count TP/FP/FN/TN over unmasked pixels; positive class = changed."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    if mask is not None:
        mask = np.asarray(mask).astype(bool)
        if mask.shape != pred.shape:
            raise ShapeError(f"mask {mask.shape} vs pred {pred.shape}")
        if not mask.any():
            raise InputError("evaluation mask is empty")
        pred, gt = pred[mask], gt[mask]
    return Confusion(
        tp=int(np.count_nonzero(pred & gt)),
        fp=int(np.count_nonzero(pred & ~gt)),
        fn=int(np.count_nonzero(~pred & gt)),
        tn=int(np.count_nonzero(~pred & ~gt)),
    )


def scores(c: Confusion) -> dict[str, float]:
    """Precision, recall, overall accuracy, F1 and Cohen's kappa."""
    total = c.total
    if total == 0:
        raise InputError("confusion matrix is empty")
    pre = c.tp / (c.tp + c.fp) if c.tp + c.fp > 0 else 0.0
    rec = c.tp / (c.tp + c.fn) if c.tp + c.fn > 0 else 0.0
    oa = (c.tp + c.tn) / total
    f1 = 2 * pre * rec / (pre + rec) if pre + rec > 0 else 0.0
    pe = ((c.tp + c.fp) * (c.tp + c.fn) + (c.fn + c.tn) * (c.fp + c.tn)) / total ** 2
    kappa = (oa - pe) / (1 - pe) if pe < 1.0 else 0.0
    return {"precision": pre, "recall": rec, "accuracy": oa, "f1": f1, "kappa": kappa}


_COLUMNS = ("Pre(%)", "Rec(%)", "OA(%)", "F1", "Kappa")


def _row_values(s: dict[str, float]) -> list[float]:
    return [100.0 * s["precision"], 100.0 * s["recall"], 100.0 * s["accuracy"],
            s["f1"], s["kappa"]]


def scores_table(rows: dict[str, dict[str, float]]) -> str:
    """Human-readable table, one row per named result."""
    name_w = max([len(n) for n in rows] + [6])
    lines = [f"{'Method':<{name_w}}  " + "  ".join(f"{c:>8}" for c in _COLUMNS)]
    for name, s in rows.items():
        vals = _row_values(s)
        cells = [f"{v:8.2f}" for v in vals[:3]] + [f"{v:8.4f}" for v in vals[3:]]
        lines.append(f"{name:<{name_w}}  " + "  ".join(cells))
    return "\n".join(lines)


def write_scores_csv(path, rows: dict[str, dict[str, float]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("method",) + _COLUMNS)
        for name, s in rows.items():
            writer.writerow([name] + [f"{v:.6f}" for v in _row_values(s)])
