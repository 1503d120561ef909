"""Per-class Dice, structure volumes, per-fold aggregation and report output."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .grid import LabelGrid
from .labelspace import LabelTable


@dataclass
class ClassScore:
    class_id: int
    name: str
    dice: float
    pred_volume_mm3: float
    ref_volume_mm3: float
    present_in_reference: bool
    both_empty: bool = False


def _check_geometry(a, b):
    if a.shape != b.shape:
        raise ValueError(f"geometry mismatch: {a.shape} vs {b.shape}")


def dice(pred, ref) -> float:
    """2|A and B| / (|A| + |B|); 1.0 when both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    _check_geometry(pred, ref)
    a = int(np.count_nonzero(pred))
    b = int(np.count_nonzero(ref))
    if a + b == 0:
        return 1.0
    inter = int(np.count_nonzero(pred & ref))
    return 2.0 * inter / (a + b)


def class_volume(lbl: LabelGrid, class_id: int) -> float:
    return int(np.count_nonzero(lbl.data == class_id)) * lbl.voxel_volume


def evaluate_case(pred: LabelGrid, ref: LabelGrid, table: LabelTable) -> list:
    """One :class:`ClassScore` per ranked class of ``table`` (consolidated ids)."""
    if pred.dims != ref.dims:
        raise ValueError(f"geometry mismatch: pred {pred.dims} vs ref {ref.dims}")
    # one pass over the voxels: joint histogram of (pred, ref) labels
    top = int(max(pred.data.max(), ref.data.max())) + 1
    joint = np.bincount(
        pred.data.ravel().astype(np.int64) * top + ref.data.ravel().astype(np.int64),
        minlength=top * top,
    ).reshape(top, top)
    pred_counts = joint.sum(axis=1)
    ref_counts = joint.sum(axis=0)
    vv_pred, vv_ref = pred.voxel_volume, ref.voxel_volume
    scores = []
    for cid in table.ranked_ids():
        a = int(pred_counts[cid]) if cid < top else 0
        b = int(ref_counts[cid]) if cid < top else 0
        inter = int(joint[cid, cid]) if cid < top else 0
        both_empty = a + b == 0
        d = 1.0 if both_empty else 2.0 * inter / (a + b)
        scores.append(ClassScore(cid, table.name(cid), d, a * vv_pred, b * vv_ref, b > 0, both_empty))
    return scores


def _mean(values):
    values = list(values)
    return sum(values) / len(values) if values else math.nan


@dataclass
class ReportRow:
    class_id: object
    structure: str
    n_present: int
    avg_ref_volume_mm3: float
    fold_means: list
    mean: float


@dataclass
class EvaluationReport:
    folds: list  # fold names in column order
    rows: list  # ReportRow per class, then the summary row
    cases: dict = field(default_factory=dict)  # fold -> case -> [ClassScore]

    @property
    def columns(self) -> list:
        return (["class_id", "structure", "n_present", "avg_ref_volume_mm3"]
                + [f"fold_{i + 1}" for i in range(len(self.folds))] + ["mean"])

    def overall_mean(self) -> float:
        return self.rows[-1].mean

    def to_records(self) -> list:
        recs = []
        for r in self.rows:
            rec = {
                "class_id": r.class_id,
                "structure": r.structure,
                "n_present": r.n_present,
                "avg_ref_volume_mm3": _num(r.avg_ref_volume_mm3),
            }
            for i, v in enumerate(r.fold_means):
                rec[f"fold_{i + 1}"] = _num(v)
            rec["mean"] = _num(r.mean)
            recs.append(rec)
        return recs

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        w.writeheader()
        for rec in self.to_records():
            w.writerow({k: _fmt(v) for k, v in rec.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "columns": self.columns,
            "folds": self.folds,
            "rows": self.to_records(),
            "cases": {
                fold: {case: [asdict(s) for s in scores] for case, scores in sorted(cases.items())}
                for fold, cases in self.cases.items()
            },
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def _num(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return round(v, 6) if isinstance(v, float) else v


def _fmt(v):
    if v is None:
        return ""
    return v


def aggregate(reports: Mapping[str, Mapping[str, Sequence[ClassScore]]], present_only: bool = True) -> EvaluationReport:
    """Aggregate per-case scores grouped as ``{fold: {case: [ClassScore]}}``.

    A fold's class mean averages that class's Dice over the fold's cases
    (only cases where the class is in the reference unless ``present_only``
    is false).  The class mean is the mean of its fold means; the summary
    row averages the class rows column by column.
    """
    if not reports or not any(reports.values()):
        raise ValueError("aggregate needs at least one case report")
    folds = list(reports)
    class_order = []
    names = {}
    for fold in folds:
        for scores in reports[fold].values():
            for s in scores:
                if s.class_id not in names:
                    class_order.append(s.class_id)
                    names[s.class_id] = s.name

    rows = []
    for cid in class_order:
        fold_means = []
        ref_vols = []
        n_present = 0
        for fold in folds:
            vals = []
            for scores in reports[fold].values():
                for s in scores:
                    if s.class_id != cid:
                        continue
                    if s.present_in_reference:
                        n_present += 1
                        ref_vols.append(s.ref_volume_mm3)
                    if s.present_in_reference or not present_only:
                        vals.append(s.dice)
            fold_means.append(_mean(vals))
        finite = [v for v in fold_means if not math.isnan(v)]
        rows.append(ReportRow(cid, names[cid], n_present, _mean(ref_vols), fold_means, _mean(finite)))

    summary_folds = []
    for i in range(len(folds)):
        summary_folds.append(_mean(v for r in rows if not math.isnan(v := r.fold_means[i])))
    n_cases = sum(len(c) for c in reports.values())
    summary = ReportRow("mean", "All Structures", n_cases, math.nan, summary_folds,
                        _mean(v for v in summary_folds if not math.isnan(v)))
    rows.append(summary)
    cases = {fold: dict(reports[fold]) for fold in folds}
    return EvaluationReport(folds=folds, rows=rows, cases=cases)
