"""Manifest-driven orchestration of the two-phase pipeline.

Per case the stages run in a fixed order:

    fuse phase-1 -> resample to native -> pharynx relabel -> mandible filter
    -> crop box -> fuse phase-2 -> merge -> write

Predictions are dense label maps; the final map and the optional reference
use consolidated ids.  Evaluation runs when every case has a reference.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, _backend
from .fusion import FusionConfig, staple_fuse
from .grid import LabelGrid, Orientation, VoxelBox, crop
from .labelspace import LabelTable, apply_remap, builtin_table
from .metrics import EvaluationReport, aggregate, evaluate_case
from .postprocess import PostprocessConfig, filter_small_mandible, relabel_touching_pharynx
from .preprocess import PreprocessConfig, resample_labels_to_reference
from .roi import MergePolicy, RoiExpansion, compute_phase2_box, merge_phase2
from .volume_io import read_header, read_volume, write_volume

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
CLEANUP_ORDERS = ("pharynx-first", "mandible-first")


class ManifestError(ValueError):
    pass


def _build(cls, values: Optional[dict]):
    """Instantiate a config dataclass from a dict, rejecting unknown keys."""
    values = dict(values or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ManifestError(f"unknown {cls.__name__} keys: {unknown}")
    for k, v in values.items():
        if isinstance(v, list):
            values[k] = tuple(v)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"invalid {cls.__name__}: {exc}") from exc


@dataclass(frozen=True)
class CaseSpec:
    case_id: str
    image: Path
    phase1: tuple
    phase2: tuple = ()
    reference: Optional[Path] = None
    fold: str = "1"

    def files(self) -> list:
        out = [self.image, *self.phase1, *self.phase2]
        if self.reference is not None:
            out.append(self.reference)
        return out


@dataclass
class PipelineManifest:
    cases: list
    output_dir: Path
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    postprocess: PostprocessConfig = field(default_factory=PostprocessConfig)
    roi: RoiExpansion = field(default_factory=RoiExpansion)
    merge: MergePolicy = field(default_factory=MergePolicy)
    cleanup_order: str = "pharynx-first"
    label_table: Optional[Path] = None
    keep_intermediates: bool = False
    orientation: Orientation = Orientation()

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path = Path(".")) -> "PipelineManifest":
        if not isinstance(doc, dict):
            raise ManifestError("manifest must be a JSON object")
        version = doc.get("manifest_version")
        if version != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest_version {version!r} (expected {MANIFEST_VERSION})")

        def path(p):
            p = Path(p)
            return p if p.is_absolute() else base_dir / p

        raw_cases = doc.get("cases")
        if not raw_cases:
            raise ManifestError("manifest lists no cases")
        cases, seen = [], set()
        for i, c in enumerate(raw_cases):
            try:
                cid = str(c["id"])
                image = path(c["image"])
                phase1 = tuple(path(p) for p in c["phase1"])
            except (KeyError, TypeError) as exc:
                raise ManifestError(f"case {i}: missing field {exc}") from exc
            if cid in seen:
                raise ManifestError(f"duplicate case id {cid!r}")
            seen.add(cid)
            phase2 = tuple(path(p) for p in c.get("phase2", []))
            if not phase1:
                raise ManifestError(f"case {cid}: need at least one phase-1 prediction")
            if phase2 and len(phase2) != len(phase1):
                raise ManifestError(f"case {cid}: phase-1 has {len(phase1)} predictions, phase-2 has {len(phase2)}")
            ref = c.get("reference")
            cases.append(CaseSpec(cid, image, phase1, phase2, path(ref) if ref else None, str(c.get("fold", "1"))))

        order = doc.get("cleanup_order", "pharynx-first")
        if order not in CLEANUP_ORDERS:
            raise ManifestError(f"cleanup_order must be one of {CLEANUP_ORDERS}")
        table = doc.get("label_table")
        return cls(
            cases=cases,
            output_dir=path(doc.get("output_dir", "out")),
            preprocess=_build(PreprocessConfig, doc.get("preprocess")),
            fusion=_build(FusionConfig, doc.get("fusion")),
            postprocess=_build(PostprocessConfig, doc.get("postprocess")),
            roi=_build(RoiExpansion, doc.get("roi")),
            merge=_build(MergePolicy, doc.get("merge")),
            cleanup_order=order,
            label_table=path(table) if table else None,
            keep_intermediates=bool(doc.get("keep_intermediates", False)),
            orientation=Orientation.from_flags(doc.get("orientation", "")),
        )

    @classmethod
    def load(cls, path) -> "PipelineManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc, path.parent)

    def validate_files(self) -> None:
        missing = [str(p) for c in self.cases for p in c.files() if not p.is_file()]
        if missing:
            raise ManifestError("missing input files: " + ", ".join(missing))

    def table(self) -> LabelTable:
        return LabelTable.load(self.label_table) if self.label_table else builtin_table()


def default_config() -> dict:
    """Resolved defaults of every configurable stage, JSON-ready."""
    return {
        "version": __version__,
        "manifest_version": MANIFEST_VERSION,
        "preprocess": dataclasses.asdict(PreprocessConfig()),
        "fusion": dataclasses.asdict(FusionConfig()),
        "postprocess": dataclasses.asdict(PostprocessConfig()),
        "roi": dataclasses.asdict(RoiExpansion()),
        "merge": dataclasses.asdict(MergePolicy()),
        "cleanup_order": "pharynx-first",
        "backend": _backend.NAME,
        "num_threads": _backend.num_threads(),
    }


def phase2_crop(pred: LabelGrid, box: VoxelBox, native_dims) -> LabelGrid:
    """Phase-2 predictions may be given as box-sized crops or as native-size maps."""
    if pred.dims == box.widths:
        return pred
    if pred.dims == tuple(native_dims):
        return crop(pred, box)
    raise ValueError(f"phase-2 prediction dims {pred.dims} match neither box widths {box.widths} "
                     f"nor native dims {tuple(native_dims)}")


class _Timer:
    def __init__(self, record: dict):
        self.record = record

    def stage(self, name, **params):
        rec = {"stage": name, "params": params}
        self.record["stages"].append(rec)
        return _StageClock(rec)


class _StageClock:
    def __init__(self, rec):
        self.rec = rec

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self.rec

    def __exit__(self, *exc):
        self.rec["seconds"] = round(time.perf_counter() - self.t0, 4)
        return False


def run_case(case: CaseSpec, m: PipelineManifest, table: LabelTable, record: dict) -> LabelGrid:
    """Run every stage for one case; returns the final consolidated label map."""
    timer = _Timer(record)
    out_dir = m.output_dir
    L = table.n_dense
    native = read_header(case.image)

    def keep(grid, name):
        if m.keep_intermediates:
            d = out_dir / "intermediates" / case.case_id
            d.mkdir(parents=True, exist_ok=True)
            write_volume(grid, d / f"{name}.nii.gz")

    with timer.stage("fuse_phase1", k=len(case.phase1), **dataclasses.asdict(m.fusion)) as rec:
        preds = [read_volume(p, kind="label", orientation=m.orientation) for p in case.phase1]
        res = staple_fuse(preds, m.fusion, n_labels=L)
        rec["iterations"], rec["converged"] = res.iterations, res.converged
        fused = res.consensus
    keep(fused, "phase1_fused")

    with timer.stage("resample_native", dims=list(native.dims), spacing=list(native.spacing)) as rec:
        rec["applied"] = fused.dims != native.dims or not np.allclose(fused.spacing, native.spacing, atol=1e-6)
        if rec["applied"]:
            fused = resample_labels_to_reference(fused, (native.dims, native.spacing))
    keep(fused, "phase1_native")

    cfg = m.postprocess
    steps = [("relabel_pharynx", relabel_touching_pharynx), ("filter_mandible", filter_small_mandible)]
    if m.cleanup_order == "mandible-first":
        steps.reverse()
    cleaned = fused
    for name, fn in steps:
        with timer.stage(name, **dataclasses.asdict(cfg)):
            cleaned = fn(cleaned, cfg)
    keep(cleaned, "phase1_clean")

    with timer.stage("phase2_box", **dataclasses.asdict(m.roi)) as rec:
        box = compute_phase2_box(cleaned, cfg.mandible_id, m.roi)
        rec["box"] = box.to_list()
        rec["widths"] = list(box.widths)

    merged = cleaned
    if case.phase2:
        with timer.stage("fuse_phase2", k=len(case.phase2)) as rec:
            crops = [phase2_crop(read_volume(p, kind="label", orientation=m.orientation), box, native.dims) for p in case.phase2]
            res2 = staple_fuse(crops, m.fusion, n_labels=L)
            rec["iterations"], rec["converged"] = res2.iterations, res2.converged
        keep(res2.consensus, "phase2_fused")
        with timer.stage("merge", **dataclasses.asdict(m.merge)):
            merged = merge_phase2(cleaned, res2.consensus, box, m.merge)

    with timer.stage("write"):
        final = apply_remap(merged, table, "to-challenge")
        path = out_dir / f"{case.case_id}_labels.nii.gz"
        write_volume(final, path)
        record["output"] = str(path)
    return final


@dataclass
class PipelineResult:
    outputs: dict  # case id -> output path
    failures: dict  # case id -> error message
    report: Optional[EvaluationReport]
    log_path: Path

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0


def run_pipeline(manifest: PipelineManifest) -> PipelineResult:
    """Process every case; per-case failures are logged and do not stop the run."""
    manifest.validate_files()
    table = manifest.table()
    out_dir = manifest.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    run_log = {
        "version": __version__,
        "backend": _backend.NAME,
        "num_threads": _backend.num_threads(),
        "cleanup_order": manifest.cleanup_order,
        "cases": [],
    }
    outputs, failures, finals = {}, {}, {}
    for case in manifest.cases:
        record = {"case": case.case_id, "fold": case.fold, "stages": []}
        run_log["cases"].append(record)
        try:
            finals[case.case_id] = run_case(case, manifest, table, record)
            outputs[case.case_id] = Path(record["output"])
            record["status"] = "ok"
        except Exception as exc:  # per-case isolation: log and move on
            log.error("case %s failed: %s", case.case_id, exc)
            record["status"] = "error"
            record["error"] = f"{type(exc).__name__}: {exc}"
            failures[case.case_id] = record["error"]

    report = None
    with_ref = [c for c in manifest.cases if c.reference is not None and c.case_id in finals]
    if with_ref:
        scores = {}
        for case in with_ref:
            ref = read_volume(case.reference, kind="label")
            scores.setdefault(case.fold, {})[case.case_id] = evaluate_case(finals[case.case_id], ref, table)
        report = aggregate({fold: scores[fold] for fold in sorted(scores)})
        (out_dir / "report.csv").write_text(report.to_csv())
        (out_dir / "report.json").write_text(report.to_json())
        run_log["report"] = ["report.csv", "report.json"]

    log_path = out_dir / "run_log.json"
    log_path.write_text(json.dumps(run_log, indent=2, default=str) + "\n")
    return PipelineResult(outputs, failures, report, log_path)
