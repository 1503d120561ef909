import json

import numpy as np
import pytest

from cbctseg.cli import main
from cbctseg.pipeline import ManifestError, PipelineManifest, run_pipeline
from cbctseg.volume_io import read_volume


@pytest.fixture(scope="module")
def clean_phantom(tmp_path_factory):
    d = tmp_path_factory.mktemp("clean")
    assert main(["phantom", "--dims", "64,64,40", "--out-prefix", str(d / "p"), "--cases", "2",
                 "--flip-rate", "0"]) == 0
    return d


def _manifest(d):
    doc = json.loads((d / "p_manifest.json").read_text())
    # absolute paths let a patched copy live in another directory
    for case in doc["cases"]:
        for key in ("image", "reference"):
            case[key] = str(d / case[key])
        for key in ("phase1", "phase2"):
            case[key] = [str(d / p) for p in case[key]]
    return doc


def _write(d, doc, name="m.json"):
    (d / name).write_text(json.dumps(doc))
    return d / name


def test_noiseless_raters_reproduce_reference(clean_phantom, tmp_path):
    doc = _manifest(clean_phantom)
    doc["output_dir"] = str(tmp_path / "out")
    res = run_pipeline(PipelineManifest.from_dict(doc, clean_phantom))
    assert res.exit_code == 0
    for case in doc["cases"]:
        out = read_volume(res.outputs[case["id"]])
        ref = read_volume(clean_phantom / case["reference"])
        assert np.array_equal(out.data, ref.data)
    for row in res.report.rows:
        if row.n_present:
            assert row.mean == 1.0


def test_stage_log_order(clean_phantom, tmp_path):
    doc = _manifest(clean_phantom)
    doc["output_dir"] = str(tmp_path / "out")
    res = run_pipeline(PipelineManifest.from_dict(doc, clean_phantom))
    log = json.loads(res.log_path.read_text())
    stages = [s["stage"] for s in log["cases"][0]["stages"]]
    assert stages == ["fuse_phase1", "resample_native", "relabel_pharynx", "filter_mandible",
                      "phase2_box", "fuse_phase2", "merge", "write"]
    assert all("seconds" in s for s in log["cases"][0]["stages"])


def test_mandible_first_order_flag(clean_phantom, tmp_path):
    doc = _manifest(clean_phantom)
    doc["output_dir"] = str(tmp_path / "out")
    doc["cleanup_order"] = "mandible-first"
    res = run_pipeline(PipelineManifest.from_dict(doc, clean_phantom))
    stages = [s["stage"] for s in json.loads(res.log_path.read_text())["cases"][0]["stages"]]
    assert stages.index("filter_mandible") < stages.index("relabel_pharynx")


def test_missing_file_fails_before_processing(clean_phantom, tmp_path):
    doc = _manifest(clean_phantom)
    doc["output_dir"] = str(tmp_path / "out")
    doc["cases"][1]["phase1"][0] = "nope.nii.gz"
    m = PipelineManifest.from_dict(doc, clean_phantom)
    with pytest.raises(ManifestError, match="nope.nii.gz"):
        run_pipeline(m)
    assert not (tmp_path / "out").exists()
    path = _write(tmp_path, dict(doc, output_dir=str(tmp_path / "out")))
    assert main(["run", "--manifest", str(path)]) == 1


def test_failing_case_does_not_stop_others(clean_phantom, tmp_path):
    doc = _manifest(clean_phantom)
    doc["output_dir"] = str(tmp_path / "out")
    # the second case gets a threshold no mandible passes, so its crop box has no anchor
    doc["cases"][1]["phase1"] = [doc["cases"][1]["phase1"][0]]
    doc["cases"][1]["phase2"] = [doc["cases"][1]["phase2"][0]]
    doc["postprocess"] = {"min_mandible_voxels": 10**9}
    res = run_pipeline(PipelineManifest.from_dict(doc, clean_phantom))
    assert res.exit_code == 1
    assert set(res.failures) == {"p_case01", "p_case02"}
    doc["postprocess"] = {"min_mandible_voxels": 1000}
    doc["cases"][0]["phase2"] = doc["cases"][0]["phase2"][:2]  # K mismatch caught at load
    with pytest.raises(ManifestError):
        PipelineManifest.from_dict(doc, clean_phantom)


def test_one_bad_case_among_good(clean_phantom, tmp_path):
    doc = _manifest(clean_phantom)
    doc["output_dir"] = str(tmp_path / "out")
    # a phase-2 prediction of the wrong size only breaks its own case
    tiny = tmp_path / "tiny.nii.gz"
    from cbctseg.grid import LabelGrid
    from cbctseg.volume_io import write_volume
    write_volume(LabelGrid(np.zeros((3, 3, 3), dtype=np.uint16)), tiny)
    doc["cases"][1]["phase2"] = [str(tiny)] * len(doc["cases"][1]["phase1"])
    path = _write(tmp_path, doc)
    assert main(["run", "--manifest", str(path)]) == 1
    assert (tmp_path / "out" / "p_case01_labels.nii.gz").exists()
    assert not (tmp_path / "out" / "p_case02_labels.nii.gz").exists()
    log = json.loads((tmp_path / "out" / "run_log.json").read_text())
    assert [c["status"] for c in log["cases"]] == ["ok", "error"]


@pytest.mark.parametrize("patch, msg", [
    ({"manifest_version": 2}, "manifest_version"),
    ({"cases": []}, "no cases"),
    ({"fusion": {"speed": 3}}, "unknown"),
    ({"cleanup_order": "random"}, "cleanup_order"),
    ({"roi": {"posterior": -1}}, "RoiExpansion"),
])
def test_manifest_validation(clean_phantom, patch, msg):
    doc = dict(_manifest(clean_phantom), **patch)
    with pytest.raises(ManifestError, match=msg):
        PipelineManifest.from_dict(doc, clean_phantom)
