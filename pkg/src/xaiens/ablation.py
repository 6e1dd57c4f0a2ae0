"""Disable-one-input study of a trained ensembler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from .data import Dataset
from .ensembler import XAIEnsembler, disable_input
from .explainers import ExplanationSet
from .metrics import MetricReport
from .reports import write_csv
from .training import evaluate_split

ABLATION_COLUMNS = ("method", "diff_acc", "diff_f1", "diff_iou", "quot_acc", "quot_f1", "quot_iou")
_KINDS = ("acc", "f1", "iou")


class AblationError(ValueError):
    pass


@dataclass(frozen=True)
class AblationRow:
    method: str
    index: int
    ablated: MetricReport
    diff_acc: float
    diff_f1: float
    diff_iou: float
    quot_acc: float
    quot_f1: float
    quot_iou: float

    def cells(self) -> list:
        return [self.method, self.diff_acc, self.diff_f1, self.diff_iou, self.quot_acc, self.quot_f1, self.quot_iou]


@dataclass(frozen=True)
class AblationReport:
    rows: tuple[AblationRow, ...]
    baseline: MetricReport
    split: str

    def to_csv(self, path, digest: str = ""):
        notes = [
            f"split: {self.split}",
            f"full: ens_acc={self.baseline.ens_acc!r} ens_f1={self.baseline.ens_f1!r} ens_iou={self.baseline.ens_iou!r}",
            "averaged over the images of this split only",
        ]
        return write_csv(path, ABLATION_COLUMNS, [r.cells() for r in self.rows], digest, notes)


def _quotient(ablated: float, full: float) -> float:
    return ablated / full if full != 0 else math.nan


def ablate(
    model: XAIEnsembler,
    sets: Mapping[str, ExplanationSet],
    dataset: Dataset,
    split: str = "test",
    smoothing: float = 1.0,
) -> AblationReport:
    """Zero each input explanation in turn and compare with the full model.

    ``diff = full - ablated`` and ``quot = ablated / full`` per metric; a
    zero full-model value leaves the quotient undefined (NaN). Rows are
    ordered by ``diff_iou``, largest first.
    """
    p = model.cfg.p
    if p < 2:
        raise AblationError("ablation needs at least two input explanations")
    full = evaluate_split(model, sets, dataset, split, smoothing)
    first = next(iter(sets.values()))
    rows = []
    for j in range(p):
        ablated = evaluate_split(model, sets, dataset, split, smoothing, transform=lambda s, j=j: disable_input(s, j))
        diffs = {k: getattr(full, f"ens_{k}") - getattr(ablated, f"ens_{k}") for k in _KINDS}
        quots = {k: _quotient(getattr(ablated, f"ens_{k}"), getattr(full, f"ens_{k}")) for k in _KINDS}
        rows.append(
            AblationRow(
                method=first.methods[j],
                index=j,
                ablated=ablated,
                **{f"diff_{k}": v for k, v in diffs.items()},
                **{f"quot_{k}": v for k, v in quots.items()},
            )
        )
    rows.sort(key=lambda r: -r.diff_iou)
    return AblationReport(tuple(rows), full, split)
