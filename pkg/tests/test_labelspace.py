import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cbctseg.grid import LabelGrid
from cbctseg.labelspace import (
    CONSOLIDATED,
    LabelTable,
    UnknownLabelError,
    apply_remap,
    builtin_table,
)

TABLE = builtin_table()
CONSOLIDATED_IDS = sorted(CONSOLIDATED)


def test_table_shape():
    assert TABLE.n_dense == 47
    assert len(TABLE.ranked_ids()) == 43
    assert sorted(TABLE.dense(c) for c in CONSOLIDATED_IDS) == list(range(47))
    assert [TABLE.challenge(d) for d in range(47)] == CONSOLIDATED_IDS


def test_names_and_pulp():
    assert TABLE.name(1) == "Lower Jawbone"
    assert TABLE.name(7) == "Pharynx"
    for src in range(111, 149):
        assert TABLE.dense(src) == TABLE.dense(50)
    assert TABLE.challenge(TABLE.dense(111)) == 50
    assert TABLE.name(111) == "Tooth Pulp"


def test_restorations_unranked():
    for cid in (8, 9, 10):
        assert cid in TABLE.consolidated_ids()
        assert cid not in TABLE.ranked_ids()


def test_canal_order_override():
    assert [TABLE.dense(s) for s in (103, 104, 105)] == [TABLE.dense(n) for n in (51, 52, 53)]
    swapped = builtin_table({103: 52, 104: 51, 105: 53})
    assert swapped.dense(103) == TABLE.dense(52)
    with pytest.raises(ValueError):
        builtin_table({103: 51, 104: 51, 105: 53})


def test_remap_examples():
    bg = LabelGrid(np.zeros((3, 3, 3), dtype=np.uint16))
    assert apply_remap(bg, TABLE, "to-dense") == bg
    g = LabelGrid(np.array([111, 148, 1], dtype=np.uint16).reshape(3, 1, 1))
    assert apply_remap(g, TABLE, "to-dense").data.ravel().tolist() == [TABLE.dense(50)] * 2 + [1]


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint16, (4, 3, 3), elements=st.sampled_from(CONSOLIDATED_IDS)))
def test_round_trip_on_consolidated_grids(data):
    g = LabelGrid(data)
    dense = apply_remap(g, TABLE, "to-dense")
    assert dense.data.max() < TABLE.n_dense
    assert apply_remap(dense, TABLE, "to-challenge") == g


def test_unknown_labels():
    g = LabelGrid(np.array([1, 99, 99], dtype=np.uint16).reshape(3, 1, 1))
    with pytest.raises(UnknownLabelError, match=r"id 99 \(2 voxels\)"):
        apply_remap(g, TABLE, "to-dense")
    out = apply_remap(g, TABLE, "to-dense", on_unknown="background")
    assert out.data.ravel().tolist() == [1, 0, 0]
    with pytest.raises(UnknownLabelError):
        apply_remap(LabelGrid(np.full((1, 1, 1), 47, dtype=np.uint16)), TABLE, "to-challenge")


def test_manifest_round_trip(tmp_path):
    text = TABLE.to_manifest()
    assert LabelTable.from_manifest("challenge_id,dense_id,name,ranked\n# comment\n" + text) == TABLE
    path = tmp_path / "table.csv"
    path.write_text(text)
    assert LabelTable.load(path) == TABLE


def test_manifest_validation():
    with pytest.raises(ValueError):
        LabelTable.from_manifest("0,0,Background\n")
    with pytest.raises(ValueError):
        LabelTable.from_manifest("0,0,Background,0\n5,2,Gap,1\n")
    with pytest.raises(ValueError):
        LabelTable.from_manifest("0,0,Background,0\n1,1,A,1\n1,1,B,1\n")
