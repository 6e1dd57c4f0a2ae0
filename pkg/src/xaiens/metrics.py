"""Ensembling performance (ens), diverseness (div) and exhaustiveness (exh)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

KINDS = ("acc", "f1", "iou")


class UndefinedBaselineError(ValueError):
    pass


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __iter__(self):
        return iter((self.tp, self.fp, self.fn, self.tn))


def pixel_confusion(pred_bin, mask) -> Confusion:
    pred = np.asarray(pred_bin)
    truth = np.asarray(mask)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs mask {truth.shape}")
    pred = pred.astype(bool)
    truth = truth.astype(bool)
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return Confusion(tp, fp, fn, pred.size - tp - fp - fn)


def metric_from_confusion(c: Confusion, kind: str) -> float:
    if kind == "iou":
        denom = c.tp + c.fp + c.fn
        return 1.0 if denom == 0 else c.tp / denom
    if kind == "f1":
        denom = 2 * c.tp + c.fp + c.fn
        return 1.0 if denom == 0 else 2 * c.tp / denom
    if kind == "acc":
        return (c.tp + c.tn) / c.total
    raise ValueError(f"unknown metric kind {kind!r}")


def ens_metric(pred_bin, mask, kind: str) -> float:
    """IoU, F1 or pixel accuracy of a binarized explanation against a mask.

    An empty prediction on an empty mask scores 1 for iou and f1.
    """
    return metric_from_confusion(pixel_confusion(pred_bin, mask), kind)


def div_metric(train_val: float, valid_val: float) -> float:
    """Diverseness: one minus the train/validation gap (unclamped)."""
    return 1.0 - train_val + valid_val


def exh_metric(ens_val: float, baseline_val: float) -> float:
    """Exhaustiveness: ``ens_val`` relative to the original-image baseline."""
    if baseline_val == 0:
        raise UndefinedBaselineError("baseline performance is 0; exhaustiveness undefined")
    return ens_val / baseline_val


@dataclass(frozen=True)
class MetricReport:
    split: str
    ens_acc: float
    ens_f1: float
    ens_iou: float
    loss: float
    n: int = 0

    def __getitem__(self, kind: str) -> float:
        return getattr(self, f"ens_{kind}")

    def as_dict(self) -> dict:
        return asdict(self)


def report_from_confusion(split: str, confusion: Confusion, loss: float, n: int) -> MetricReport:
    return MetricReport(
        split=split,
        ens_acc=metric_from_confusion(confusion, "acc"),
        ens_f1=metric_from_confusion(confusion, "f1"),
        ens_iou=metric_from_confusion(confusion, "iou"),
        loss=loss,
        n=n,
    )


@dataclass(frozen=True)
class DerivedMetrics:
    div_acc: float
    div_f1: float
    div_iou: float
    exh_iou: float = math.nan


def derived_metrics(train: MetricReport, valid: MetricReport, baseline_iou: float | None = None) -> DerivedMetrics:
    exh = math.nan
    if baseline_iou is not None:
        exh = exh_metric(valid.ens_iou, baseline_iou)
    return DerivedMetrics(
        div_acc=div_metric(train.ens_acc, valid.ens_acc),
        div_f1=div_metric(train.ens_f1, valid.ens_f1),
        div_iou=div_metric(train.ens_iou, valid.ens_iou),
        exh_iou=exh,
    )
