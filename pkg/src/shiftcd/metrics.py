"""Confusion counts and accuracy measures for binary change maps (changed = positive)."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError

FIELDS = ("oa", "kappa", "f1", "precision_c", "recall_c", "precision_u", "recall_u", "mdr", "far")
HEADERS = {
    "oa": "OA",
    "kappa": "Kappa",
    "f1": "F1",
    "precision_c": "Pre_c",
    "recall_c": "Rec_c",
    "precision_u": "Pre_u",
    "recall_u": "Rec_u",
    "mdr": "MDR",
    "far": "FAR",
}


class EmptyEvaluationError(NumericError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "ConfusionMatrix":
        """The same matrix with unchanged treated as the positive class."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)

    def as_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion(pred: np.ndarray, ref: np.ndarray, mask: np.ndarray | None = None) -> ConfusionMatrix:
    pred = np.asarray(pred).astype(bool)
    ref = np.asarray(ref).astype(bool)
    if pred.shape != ref.shape:
        raise DimensionError(f"prediction {pred.shape} and reference {ref.shape} differ in shape")
    if mask is not None:
        mask = np.asarray(mask).astype(bool)
        if mask.shape != pred.shape:
            raise DimensionError(f"mask {mask.shape} does not match maps {pred.shape}")
        pred, ref = pred[mask], ref[mask]
    tp = int(np.count_nonzero(pred & ref))
    fp = int(np.count_nonzero(pred & ~ref))
    fn = int(np.count_nonzero(~pred & ref))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionMatrix(tp, fp, fn, tn)


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def f1_from(precision: float, recall: float) -> float | None:
    """Harmonic mean, in whatever units the inputs use."""
    return _ratio(2 * precision * recall, precision + recall)


@dataclass(frozen=True)
class MetricsReport:
    """Fractions in [0, 1]; ``None`` marks a metric whose denominator is zero."""

    counts: ConfusionMatrix
    oa: float
    kappa: float | None
    f1: float | None
    precision_c: float | None
    recall_c: float | None
    precision_u: float | None
    recall_u: float | None
    mdr: float | None
    far: float | None

    def percent(self, name: str) -> float | None:
        value = getattr(self, name)
        return None if value is None else 100.0 * value

    def to_dict(self) -> dict:
        out = {"counts": self.counts.as_dict()}
        out["percent"] = {k: None if self.percent(k) is None else round(self.percent(k), 2) for k in FIELDS}
        out["fraction"] = {k: getattr(self, k) for k in FIELDS}
        return out

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **self.to_dict()}, indent=2, sort_keys=True)


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    n = cm.total
    if n == 0:
        raise EmptyEvaluationError("no pixels to evaluate")
    tp, fp, fn, tn = (float(v) for v in (cm.tp, cm.fp, cm.fn, cm.tn))
    oa = (tp + tn) / n
    expected = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (n * n)
    kappa = _ratio(oa - expected, 1.0 - expected)
    precision_c = _ratio(tp, tp + fp)
    recall_c = _ratio(tp, tp + fn)
    f1 = None if precision_c is None or recall_c is None else f1_from(precision_c, recall_c)
    return MetricsReport(
        counts=cm,
        oa=oa,
        kappa=kappa,
        f1=f1,
        precision_c=precision_c,
        recall_c=recall_c,
        precision_u=_ratio(tn, tn + fn),
        recall_u=_ratio(tn, tn + fp),
        mdr=_ratio(fn, tp + fn),
        far=_ratio(fp, fp + tn),
    )


def format_table(rows: dict[str, MetricsReport]) -> str:
    """Aligned plain-text table of percentages, two decimals, ``-`` for undefined."""
    name_w = max([len("Method")] + [len(k) for k in rows])
    cols = [HEADERS[f] for f in FIELDS]
    widths = [max(len(c), 6) for c in cols]
    lines = ["  ".join([f"{'Method':<{name_w}}"] + [f"{c:>{w}}" for c, w in zip(cols, widths)])]
    for name, rep in rows.items():
        cells = []
        for f, w in zip(FIELDS, widths):
            v = rep.percent(f)
            cells.append(f"{'-' if v is None else f'{v:.2f}':>{w}}")
        lines.append("  ".join([f"{name:<{name_w}}"] + cells))
    return "\n".join(lines)
