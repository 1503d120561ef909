import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cbctseg.grid import LabelGrid
from cbctseg.labelspace import builtin_table
from cbctseg.metrics import ClassScore, aggregate, class_volume, dice, evaluate_case
from cbctseg.phantom import PhantomSpec, generate_phantom

from oracles import set_dice, voxel_set

TABLE = builtin_table()
COLUMNS = ["class_id", "structure", "n_present", "avg_ref_volume_mm3", "fold_1", "fold_2", "mean"]


def test_dice_examples():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    a[0:2, 0:2, 0:2] = True
    b[1:3, 0:2, 0:2] = True
    assert dice(a, b) == 0.5
    assert dice(a, a) == 1.0
    assert dice(a, np.roll(a, 2, axis=0)) == 0.0
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0
    with pytest.raises(ValueError):
        dice(a, a[:3])


@settings(max_examples=60, deadline=None)
@given(arrays(np.bool_, (5, 4, 3)), arrays(np.bool_, (5, 4, 3)))
def test_dice_matches_set_oracle(a, b):
    assert math.isclose(dice(a, b), set_dice(voxel_set(a), voxel_set(b)), abs_tol=1e-12)


def test_class_volume():
    data = np.zeros((10, 10, 10), dtype=np.uint16)
    assert class_volume(LabelGrid(data + 3, (0.3,) * 3), 3) == pytest.approx(27.0)
    assert class_volume(LabelGrid(data, (0.3,) * 3), 3) == 0.0
    one = LabelGrid(np.full((1, 1, 1), 5, dtype=np.uint16), (0.6,) * 3)
    assert class_volume(one, 5) == pytest.approx(0.216)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint16, (4, 4, 3), elements=st.sampled_from([0, 1, 7, 31, 50])),
       arrays(np.uint16, (4, 4, 3), elements=st.sampled_from([0, 1, 7, 31, 50])))
def test_evaluate_case_matches_oracle(p, r):
    scores = evaluate_case(LabelGrid(p), LabelGrid(r), TABLE)
    assert [s.class_id for s in scores] == TABLE.ranked_ids()
    for s in scores:
        expect = set_dice(voxel_set(p == s.class_id), voxel_set(r == s.class_id))
        assert math.isclose(s.dice, expect, abs_tol=1e-12)
        assert s.present_in_reference == bool(np.any(r == s.class_id))


def test_evaluate_phantom_identity_and_background():
    _, ref = generate_phantom(PhantomSpec())
    present = set(np.unique(ref.data)) - {0}
    for s in evaluate_case(ref, ref, TABLE):
        if s.class_id in present:
            assert s.dice == 1.0
    blank = ref.with_data(np.zeros(ref.dims, dtype=np.uint16))
    for s in evaluate_case(blank, ref, TABLE):
        if s.class_id in present:
            assert s.dice == 0.0
    with pytest.raises(ValueError):
        evaluate_case(ref, LabelGrid(np.zeros((2, 2, 2), dtype=np.uint16)), TABLE)


def _score(cid, d, present=True, vol=1.0):
    return ClassScore(cid, TABLE.name(cid), d, vol, vol if present else 0.0, present)


def test_aggregate_two_folds():
    rep = aggregate({"a": {"c1": [_score(1, 0.8)]}, "b": {"c2": [_score(1, 0.9)]}})
    assert rep.rows[0].mean == pytest.approx(0.85)
    assert rep.rows[0].n_present == 2
    assert rep.columns == COLUMNS
    assert rep.rows[-1].class_id == "mean"


def test_aggregate_single_case():
    scores = [_score(1, 0.7), _score(7, 0.5)]
    rep = aggregate({"1": {"c": scores}})
    assert [r.mean for r in rep.rows[:-1]] == [0.7, 0.5]
    assert rep.overall_mean() == pytest.approx(0.6)


def test_aggregate_absent_classes():
    scores = {"1": {"c1": [_score(1, 0.9), _score(7, 1.0, present=False)],
                    "c2": [_score(1, 0.7), _score(7, 0.4)]}}
    rep = aggregate(scores)
    assert rep.rows[1].mean == pytest.approx(0.4)
    assert rep.rows[1].n_present == 1
    rep_all = aggregate(scores, present_only=False)
    assert rep_all.rows[1].mean == pytest.approx(0.7)
    with pytest.raises(ValueError):
        aggregate({})


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(0, 1), min_size=1, max_size=4), min_size=1, max_size=5))
def test_grand_mean_within_fold_range(folds):
    reports = {str(i): {f"c{i}_{j}": [_score(1, d)] for j, d in enumerate(ds)} for i, ds in enumerate(folds)}
    rep = aggregate(reports)
    fm = rep.rows[0].fold_means
    assert min(fm) - 1e-12 <= rep.rows[0].mean <= max(fm) + 1e-12


def test_csv_and_json_carry_the_same_content():
    rep = aggregate({"1": {"c": [_score(1, 0.75), _score(7, 0.5, present=False)]},
                     "2": {"d": [_score(1, 0.25), _score(7, 1.0)]}})
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    doc = json.loads(rep.to_json())
    assert list(rows[0]) == COLUMNS == doc["columns"]
    assert len(rows) == len(doc["rows"])
    for r, j in zip(rows, doc["rows"]):
        for k in COLUMNS:
            v = j[k]
            assert r[k] == ("" if v is None else str(v))
