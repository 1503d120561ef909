import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbctseg.fusion import FusionConfig, majority_vote, staple_fuse
from cbctseg.grid import LabelGrid

from conftest import backend_available, label_grid
from oracles import brute_force_staple, majority_label

def _raters_from_rows(rows, dims):
    return [LabelGrid(np.asarray(r, dtype=np.uint16).reshape(dims, order="F")) for r in rows]


def _random_instance(rng, n_vox, n_labels, k, noise):
    truth = rng.integers(0, n_labels, n_vox)
    rows = []
    for _ in range(k):
        r = truth.copy()
        flip = rng.random(n_vox) < noise
        r[flip] = rng.integers(0, n_labels, flip.sum())
        rows.append(r)
    return rows


# majority vote


def test_majority_tie_goes_low():
    votes = [2, 2, 3, 3, 1]
    raters = [label_grid(np.full((1, 1, 1), v)) for v in votes]
    assert majority_vote(raters).data[0, 0, 0] == 2


def test_majority_two_raters_disagreeing_everywhere():
    a = label_grid(np.full((2, 2, 2), 3))
    b = label_grid(np.full((2, 2, 2), 1))
    assert np.all(majority_vote([a, b]).data == 1)


def test_majority_identical_raters(rng):
    a = label_grid(rng.integers(0, 5, (4, 3, 2)))
    assert majority_vote([a, a, a]) == a


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.integers(0, 5), min_size=1, max_size=7), min_size=1, max_size=20))
def test_majority_matches_counter(columns):
    k = len(columns[0])
    columns = [c[:k] + [0] * (k - len(c)) for c in columns]
    rows = np.array(columns, dtype=np.uint16).T  # (k, n)
    raters = _raters_from_rows(rows, (len(columns), 1, 1))
    got = majority_vote(raters).data.ravel(order="F")
    assert got.tolist() == [majority_label(c) for c in columns]


# STAPLE against the brute-force oracle


def test_staple_matches_oracle_on_random_instances(backend):
    rng = np.random.default_rng(7)
    for trial in range(50):
        n_vox = int(rng.integers(1, 101))
        L = int(rng.integers(2, 5))
        k = int(rng.integers(3, 6))
        rows = _random_instance(rng, n_vox, L, k, rng.uniform(0.05, 0.4))
        cons, post, theta, iters = brute_force_staple(rows, L)
        res = staple_fuse(_raters_from_rows(rows, (n_vox, 1, 1)), n_labels=L, return_posteriors=True,
                          backend=backend)
        got_post = res.posteriors.reshape(n_vox, L, order="F")
        np.testing.assert_allclose(got_post, np.array(post), atol=1e-6, rtol=0, err_msg=f"trial {trial}")
        assert res.consensus.flat().tolist() == cons, f"trial {trial}"
        np.testing.assert_allclose(res.raters.theta, np.array(theta), atol=1e-6, rtol=0)
        assert res.iterations == iters


def test_staple_27_voxel_two_agree(backend):
    # each rater dissents on every third voxel with the same shifted label
    rng = np.random.default_rng(3)
    L = 4
    maj = rng.integers(0, L, 27)
    rows = np.tile(maj, (3, 1))
    rows[np.arange(27) % 3, np.arange(27)] = (maj + 1) % L
    res = staple_fuse(_raters_from_rows(rows, (3, 3, 3)), n_labels=L, return_posteriors=True, backend=backend)
    assert np.array_equal(res.consensus.flat(), maj)
    cons, post, _, _ = brute_force_staple(rows.tolist(), L)
    np.testing.assert_allclose(res.posteriors.reshape(27, L, order="F"), post, atol=1e-6)


def test_staple_27_voxel_random_dissent_follows_oracle(backend):
    # with irregular dissent EM may overrule the majority on so few voxels; it must still match the oracle
    rng = np.random.default_rng(3)
    L = 4
    maj = rng.integers(0, L, 27)
    rows = np.tile(maj, (3, 1))
    rows[rng.integers(0, 3, 27), np.arange(27)] = (maj + rng.integers(1, L, 27)) % L
    res = staple_fuse(_raters_from_rows(rows, (3, 3, 3)), n_labels=L, return_posteriors=True, backend=backend)
    cons, post, _, _ = brute_force_staple(rows.tolist(), L)
    assert res.consensus.flat().tolist() == cons
    np.testing.assert_allclose(res.posteriors.reshape(27, L, order="F"), post, atol=1e-6)


def test_identical_raters_fixed_point(backend, rng):
    a = label_grid(rng.integers(0, 6, (5, 4, 3)))
    res = staple_fuse([a, a, a, a], n_labels=6, backend=backend)
    assert res.consensus == a
    present = np.unique(a.data)
    for j in range(4):
        np.testing.assert_allclose(res.raters.theta[j][np.ix_(present, present)], np.eye(present.size), atol=1e-6)


def test_single_rater_is_returned(backend, rng):
    a = label_grid(rng.integers(0, 6, (5, 4, 3)))
    res = staple_fuse([a], n_labels=6, return_posteriors=True, backend=backend)
    assert res.consensus == a
    assert np.array_equal(res.posteriors.argmax(axis=-1), a.data)


def test_posteriors_normalised(backend):
    rng = np.random.default_rng(11)
    rows = _random_instance(rng, 300, 5, 4, 0.3)
    res = staple_fuse(_raters_from_rows(rows, (10, 10, 3)), n_labels=5, return_posteriors=True,
                      return_max_posterior=True, backend=backend)
    np.testing.assert_allclose(res.posteriors.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(res.max_posterior, res.posteriors.max(axis=-1), atol=1e-12)


def test_loglik_monotone(backend):
    rng = np.random.default_rng(5)
    rows = _random_instance(rng, 2000, 6, 5, 0.25)
    res = staple_fuse(_raters_from_rows(rows, (20, 10, 10)), n_labels=6, backend=backend)
    steps = np.diff(res.loglik)
    assert np.all(steps >= -1e-9 * np.abs(res.loglik[1:]).max())


def test_rater_permutation_invariance(backend):
    rng = np.random.default_rng(9)
    rows = _random_instance(rng, 500, 4, 5, 0.2)
    raters = _raters_from_rows(rows, (10, 10, 5))
    perm = [3, 0, 4, 1, 2]
    a = staple_fuse(raters, n_labels=4, backend=backend)
    b = staple_fuse([raters[p] for p in perm], n_labels=4, backend=backend)
    assert a.consensus == b.consensus
    np.testing.assert_allclose(a.raters.theta[perm], b.raters.theta, atol=1e-9)


def test_agreement_dominance(backend):
    rng = np.random.default_rng(21)
    for _ in range(20):
        rows = np.array(_random_instance(rng, 400, 5, 4, rng.uniform(0.05, 0.3)))
        res = staple_fuse(_raters_from_rows(rows, (400, 1, 1)), n_labels=5, backend=backend)
        agree = np.all(rows == rows[0], axis=0)
        assert np.array_equal(res.consensus.flat()[agree], rows[0][agree])


def test_grouped_and_ungrouped_agree(backend):
    rng = np.random.default_rng(13)
    rows = _random_instance(rng, 3000, 7, 5, 0.15)
    raters = _raters_from_rows(rows, (30, 10, 10))
    a = staple_fuse(raters, FusionConfig(group_patterns=True), n_labels=7, return_posteriors=True, backend=backend)
    b = staple_fuse(raters, FusionConfig(group_patterns=False), n_labels=7, return_posteriors=True, backend=backend)
    assert a.consensus == b.consensus
    np.testing.assert_allclose(a.posteriors, b.posteriors, atol=1e-9)
    assert a.iterations == b.iterations


def test_backends_agree():
    if not backend_available("cython"):
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(17)
    rows = _random_instance(rng, 4000, 9, 5, 0.2)
    raters = _raters_from_rows(rows, (20, 20, 10))
    for group in (True, False):
        cfg = FusionConfig(group_patterns=group)
        a = staple_fuse(raters, cfg, n_labels=9, return_posteriors=True, backend="python")
        b = staple_fuse(raters, cfg, n_labels=9, return_posteriors=True, backend="cython")
        assert a.consensus == b.consensus
        np.testing.assert_allclose(a.posteriors, b.posteriors, atol=1e-9)


def test_deterministic_repeat(backend):
    rng = np.random.default_rng(19)
    rows = _random_instance(rng, 5000, 6, 5, 0.2)
    raters = _raters_from_rows(rows, (25, 20, 10))
    a = staple_fuse(raters, n_labels=6, return_posteriors=True, backend=backend)
    b = staple_fuse(raters, n_labels=6, return_posteriors=True, backend=backend)
    assert np.array_equal(a.posteriors, b.posteriors)
    assert np.array_equal(a.raters.theta, b.raters.theta)


# errors


def test_no_raters_is_error():
    with pytest.raises(ValueError):
        staple_fuse([])


def test_geometry_mismatch_is_error():
    a = label_grid(np.zeros((2, 2, 2)))
    b = label_grid(np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        staple_fuse([a, b])
    with pytest.raises(ValueError):
        majority_vote([a, b])


def test_label_out_of_range_is_error():
    a = label_grid(np.full((2, 2, 2), 9))
    with pytest.raises(ValueError):
        staple_fuse([a, a], n_labels=5)


def test_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(init_diagonal=0.4)
    with pytest.raises(ValueError):
        FusionConfig(prior="nope")
    with pytest.raises(ValueError):
        FusionConfig(tol=0)
