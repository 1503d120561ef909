"""Command-line entry point: ``cbctseg <subcommand> ...``.

Exit codes: 0 success, 1 processing error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .fusion import FusionConfig, majority_vote, staple_fuse
from .grid import ImageGrid, Orientation, VoxelBox
from .labelspace import LabelTable, apply_remap, builtin_table
from .metrics import aggregate, evaluate_case
from .phantom import PhantomSpec, generate_phantom, phantom_metadata, rng_for, simulate_raters
from .pipeline import PipelineManifest, default_config, run_pipeline
from .postprocess import PostprocessConfig, cleanup, min_voxels_from_mm3
from .preprocess import PreprocessConfig, clip_intensity, resample
from .roi import MergePolicy, RoiExpansion, compute_phase2_box, merge_phase2, volume_reduction
from .volume_io import read_volume, write_volume

log = logging.getLogger("cbctseg")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2



def _triple(kind):
    def parse(text):
        parts = re.split(r"[,x ]+", text.strip())
        if len(parts) == 1:
            parts = parts * 3
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(f"expected 1 or 3 values, got {text!r}")
        try:
            return tuple(kind(p) for p in parts)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def _orientation(text):
    try:
        return Orientation.from_flags(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _table(args) -> LabelTable:
    return LabelTable.load(args.table) if getattr(args, "table", None) else builtin_table()


def _stem(path: Path) -> str:
    name = path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return path.stem


def _case_id(path: Path) -> str:
    return re.sub(r"_(labels|reference|ref|seg)$", "", _stem(path))


def _volumes(directory: Path) -> list:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.name.endswith((".nii", ".nii.gz")))


# subcommands


def cmd_preprocess(args):
    grid = read_volume(args.input, kind="label" if args.labels else "image", orientation=args.orientation)
    cfg = PreprocessConfig(clip_lo=args.clip[0], clip_hi=args.clip[1], spacing=args.spacing)
    if args.labels:
        out = resample(grid, cfg.spacing, "nearest")
    else:
        out = resample(clip_intensity(grid, cfg.clip_lo, cfg.clip_hi), cfg.spacing, args.mode)
    write_volume(out, args.output)
    print(f"{args.input} {grid.dims} -> {args.output} {out.dims} at {list(out.spacing)} mm")


def cmd_remap(args):
    lbl = read_volume(args.input, kind="label", orientation=args.orientation)
    out = apply_remap(lbl, _table(args), args.direction, args.on_unknown)
    write_volume(out, args.output)


def cmd_fuse(args):
    raters = [read_volume(p, kind="label", orientation=args.orientation) for p in args.inputs]
    n_labels = args.n_labels
    if n_labels is None and not args.no_table:
        n_labels = _table(args).n_dense
    if args.method == "majority":
        write_volume(majority_vote(raters, n_labels), args.output)
        return
    cfg = FusionConfig(max_iters=args.max_iters, tol=args.tol, prior=args.prior)
    res = staple_fuse(raters, cfg, n_labels=n_labels, return_max_posterior=args.posteriors is not None)
    write_volume(res.consensus, args.output)
    if args.posteriors:
        write_volume(_float_grid(res.max_posterior, res.consensus), args.posteriors, dtype=np.float32)
    print(f"staple: {res.iterations} iterations, converged={res.converged}")


def _float_grid(values, like):
    return ImageGrid(values.astype(np.float64), like.spacing, like.orientation, like.affine)


def cmd_postprocess(args):
    lbl = read_volume(args.input, kind="label", orientation=args.orientation)
    min_vox = args.min_mandible_voxels
    if args.min_mandible_mm3 is not None:
        min_vox = min_voxels_from_mm3(args.min_mandible_mm3, lbl.spacing)
    cfg = PostprocessConfig(connectivity=args.connectivity, min_mandible_voxels=min_vox,
                            pharynx_policy=args.pharynx_policy)
    write_volume(cleanup(lbl, cfg, args.order), args.output)


def cmd_roi(args):
    lbl = read_volume(args.input, kind="label", orientation=args.orientation)
    exp = RoiExpansion(*args.expand)
    box = compute_phase2_box(lbl, args.mandible_id, exp)
    if args.print_box or not args.json:
        print(box)
    if args.json:
        doc = {"box": box.to_list(), "widths": list(box.widths), "dims": list(lbl.dims),
               "volume_reduction": round(volume_reduction(lbl.dims, box), 4)}
        Path(args.json).write_text(json.dumps(doc, indent=2) + "\n")


def cmd_merge(args):
    p1 = read_volume(args.phase1, kind="label", orientation=args.orientation)
    p2 = read_volume(args.phase2, kind="label", orientation=args.orientation)
    box = _read_box(args.box)
    policy = MergePolicy(nerve_ids=tuple(args.nerve_ids), clear_phase1_nerves=not args.keep_phase1_nerves,
                         override_all=not args.background_only)
    write_volume(merge_phase2(p1, p2, box, policy), args.output)


def _read_box(text):
    p = Path(text)
    if p.is_file():
        return VoxelBox.from_list(json.loads(p.read_text())["box"])
    return VoxelBox.parse(text)


def cmd_evaluate(args):
    pred_dir, ref_dir = Path(args.pred_dir), Path(args.ref_dir)
    table = _table(args)
    refs = {_case_id(p): p for p in _volumes(ref_dir)}
    subdirs = sorted(d for d in pred_dir.iterdir() if d.is_dir())
    groups = [(d.name, d) for d in subdirs] if subdirs else [("1", pred_dir)]
    scores = {}
    for fold, d in groups:
        for p in _volumes(d):
            cid = _case_id(p)
            if cid not in refs:
                raise FileNotFoundError(f"no reference for prediction {p} in {ref_dir}")
            pred = read_volume(p, kind="label")
            ref = read_volume(refs[cid], kind="label")
            scores.setdefault(fold, {})[cid] = evaluate_case(pred, ref, table)
    if not scores:
        raise FileNotFoundError(f"no predictions found under {pred_dir}")
    report = aggregate(scores, present_only=not args.include_absent)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    base = out.with_suffix("") if out.suffix in (".csv", ".json") else out
    base.with_suffix(".csv").write_text(report.to_csv())
    base.with_suffix(".json").write_text(report.to_json())
    print(f"mean Dice over {len(report.rows) - 1} classes: {report.overall_mean():.4f}")


def cmd_phantom(args):
    table = _table(args)
    n_cases = args.cases
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_cases):
        seed = args.seed + i
        cp = prefix if n_cases == 1 else prefix.parent / f"{prefix.name}_case{i + 1:02d}"
        entries.append(_write_phantom_case(cp, seed, args, table))
    if args.manifest or n_cases > 1:
        doc = {
            "manifest_version": 1,
            "output_dir": f"{prefix.name}_out",
            "postprocess": {"min_mandible_voxels": args.min_mandible_voxels},
            "cases": [dict(e, fold=str(i % args.folds + 1)) for i, e in enumerate(entries)],
        }
        path = prefix.parent / f"{prefix.name}_manifest.json"
        path.write_text(json.dumps(doc, indent=2) + "\n")
        print(f"manifest: {path}")


def _write_phantom_case(cp: Path, seed: int, args, table) -> dict:
    spec = PhantomSpec(dims=args.dims, spacing=args.spacing, seed=seed, n_teeth=args.teeth)
    img, ref = generate_phantom(spec)
    name = cp.name
    files = {"image": f"{name}_image.nii.gz", "reference": f"{name}_reference.nii.gz"}
    write_volume(img, cp.parent / files["image"])
    write_volume(ref, cp.parent / files["reference"])
    dense = apply_remap(ref, table, "to-dense")
    if args.flip_range:
        rates = rng_for(seed, 7).uniform(args.flip_range[0], args.flip_range[1], args.raters)
    else:
        rates = np.full(args.raters, args.flip_rate)
    phase1 = simulate_raters(dense, args.raters, rates, args.boundary_steps, seed)
    nerve_ids = [table.dense(n) for n in (51, 52, 53)]
    nerves_only = dense.with_data(np.where(np.isin(dense.data, nerve_ids), dense.data, 0).astype(dense.data.dtype))
    phase2 = simulate_raters(nerves_only, args.raters, rates, 0, seed + 100_000)
    entry = {"id": name, "image": files["image"], "reference": files["reference"], "phase1": [], "phase2": []}
    for j, (r1, r2) in enumerate(zip(phase1, phase2)):
        f1, f2 = f"{name}_phase1_rater{j + 1}.nii.gz", f"{name}_phase2_rater{j + 1}.nii.gz"
        write_volume(r1, cp.parent / f1)
        write_volume(r2, cp.parent / f2)
        entry["phase1"].append(f1)
        entry["phase2"].append(f2)
    meta = phantom_metadata(spec) | {"flip_rates": [float(r) for r in rates], "boundary_steps": args.boundary_steps}
    (cp.parent / f"{name}_phantom.json").write_text(json.dumps(meta, indent=2) + "\n")
    return entry


def cmd_run(args):
    manifest = PipelineManifest.load(args.manifest)
    if args.output_dir:
        manifest.output_dir = Path(args.output_dir)
    if args.keep_intermediates:
        manifest.keep_intermediates = True
    if args.cleanup_order:
        manifest.cleanup_order = args.cleanup_order
    res = run_pipeline(manifest)
    for cid, path in res.outputs.items():
        print(f"{cid}: {path}")
    for cid, err in res.failures.items():
        print(f"{cid}: FAILED {err}", file=sys.stderr)
    if res.report is not None:
        print(f"mean Dice: {res.report.overall_mean():.4f}")
    return res.exit_code


# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbctseg", description="CBCT dental label-map pipeline tools.")
    p.add_argument("--version", action="version", version=f"cbctseg {__version__}")
    p.add_argument("--dump-defaults", action="store_true", help="print the resolved default configuration as JSON")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", metavar="<command>")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--orientation", type=_orientation, default=Orientation(),
                        help="flipped axes of the stored arrays, e.g. 'y' (default: canonical)")
    common.add_argument("--table", help="label table CSV (default: built-in consolidated table)")

    s = sub.add_parser("preprocess", parents=[common], help="clip intensities and resample to isotropic spacing")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--spacing", type=_triple(float), default=PreprocessConfig().spacing)
    s.add_argument("--clip", type=float, nargs=2, metavar=("LO", "HI"), default=(-1000.0, 3800.0))
    s.add_argument("--mode", choices=("trilinear", "nearest"), default="trilinear")
    s.add_argument("--labels", action="store_true", help="input is a label map (nearest resampling, no clip)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("remap", parents=[common], help="convert between challenge and dense label ids")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--direction", choices=("to-dense", "to-challenge"), required=True)
    s.add_argument("--on-unknown", choices=("error", "background"), default="error")
    s.set_defaults(func=cmd_remap)

    s = sub.add_parser("fuse", parents=[common], help="fuse K label maps with STAPLE or majority vote")
    s.add_argument("--in", dest="inputs", nargs="+", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--method", choices=("staple", "majority"), default="staple")
    s.add_argument("--max-iters", type=int, default=FusionConfig().max_iters)
    s.add_argument("--tol", type=float, default=FusionConfig().tol)
    s.add_argument("--prior", choices=("vote-frequency", "uniform"), default="vote-frequency")
    s.add_argument("--n-labels", type=int, help="size of the label space (default: from the label table)")
    s.add_argument("--no-table", action="store_true", help="size the label space from the data instead")
    s.add_argument("--posteriors", help="write the per-voxel maximum posterior as a float32 volume")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("postprocess", parents=[common], help="pharynx relabel and small-mandible filter")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=26)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--min-mandible-voxels", type=int, default=PostprocessConfig().min_mandible_voxels)
    g.add_argument("--min-mandible-mm3", type=float)
    s.add_argument("--pharynx-policy", choices=("non-largest-touching", "any-touching"),
                   default="non-largest-touching")
    s.add_argument("--order", choices=("pharynx-first", "mandible-first"), default="pharynx-first")
    s.set_defaults(func=cmd_postprocess)

    s = sub.add_parser("roi", parents=[common], help="compute the mandible-anchored phase-2 crop box")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--print-box", action="store_true", help="print the box as x0,y0,z0:x1,y1,z1")
    s.add_argument("--json", help="also write the box, widths and volume reduction to this file")
    s.add_argument("--mandible-id", type=int, default=1)
    s.add_argument("--expand", type=int, nargs=4, metavar=("XMINUS", "XPLUS", "YPOST", "ZSUP"),
                   default=(110, 110, 100, 90))
    s.set_defaults(func=cmd_roi)

    s = sub.add_parser("merge", parents=[common], help="write phase-2 nerve labels back into the phase-1 map")
    s.add_argument("--phase1", required=True)
    s.add_argument("--phase2", required=True)
    s.add_argument("--box", required=True, help="x0,y0,z0:x1,y1,z1 or a JSON file written by 'roi --json'")
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--nerve-ids", type=int, nargs="+", default=list(MergePolicy().nerve_ids))
    s.add_argument("--keep-phase1-nerves", action="store_true")
    s.add_argument("--background-only", action="store_true", help="only fill phase-1 background voxels")
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("evaluate", parents=[common], help="per-class Dice report against references")
    s.add_argument("--pred-dir", required=True, help="predictions; subdirectories are treated as folds")
    s.add_argument("--ref-dir", required=True)
    s.add_argument("--out", dest="output", required=True, help="report path; both .csv and .json are written")
    s.add_argument("--include-absent", action="store_true", help="average classes absent from a reference too")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("phantom", parents=[common], help="write a synthetic phantom case with noisy raters")
    s.add_argument("--dims", type=_triple(int), default=PhantomSpec().dims)
    s.add_argument("--spacing", type=_triple(float), default=PhantomSpec().spacing)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-prefix", required=True)
    s.add_argument("--raters", type=int, default=5)
    s.add_argument("--flip-rate", type=float, default=0.05)
    s.add_argument("--flip-range", type=float, nargs=2, metavar=("LO", "HI"),
                   help="draw each rater's flip rate uniformly from this range")
    s.add_argument("--boundary-steps", type=int, default=0)
    s.add_argument("--teeth", type=int, default=PhantomSpec().n_teeth)
    s.add_argument("--cases", type=int, default=1, help="number of cases; >1 also writes a manifest")
    s.add_argument("--folds", type=int, default=1, help="folds to spread the cases over in the manifest")
    s.add_argument("--manifest", action="store_true", help="write a run manifest even for one case")
    s.add_argument("--min-mandible-voxels", type=int, default=1000,
                   help="mandible threshold written into the manifest (phantom scale)")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("run", help="run the full two-phase pipeline from a JSON manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", dest="output_dir")
    s.add_argument("--keep-intermediates", action="store_true")
    s.add_argument("--cleanup-order", choices=("pharynx-first", "mandible-first"))
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: --help/--version exit 0, errors exit 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.dump_defaults:
        print(json.dumps(default_config(), indent=2))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        code = args.func(args)
    except (OSError, ValueError, TypeError, KeyError) as exc:
        print(f"cbctseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK if code is None else int(code)


if __name__ == "__main__":
    sys.exit(main())
