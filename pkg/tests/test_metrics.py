import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from labelqa.metrics import (MetricSample, average_ranks, boundary, dsc, evaluate, lcc,
                             map_at_k, nsd, srocc)

from conftest import (ap_at_k_oracle, boundary_oracle, dsc_oracle, metric_fixture_suite,
                      nsd_oracle, pearson_oracle, rank_oracle)


def _samples(pred, act, cls=None):
    cls = cls if cls is not None else [0] * len(pred)
    return [MetricSample(float(p), float(a), int(c)) for p, a, c in zip(pred, act, cls)]


def test_dsc_examples():
    a = np.zeros((2, 2), bool)
    b = np.zeros((2, 2), bool)
    a[0, 0] = a[0, 1] = True
    b[0, 1] = b[1, 1] = True
    assert dsc(a, b) == 0.5
    assert dsc(a, a) == 1.0
    assert dsc(a, ~a) == 0.0
    assert dsc(np.zeros((3, 3)), np.zeros((3, 3))) is None
    with pytest.raises(ValueError):
        dsc(np.zeros((2, 2)), np.zeros((2, 3)))


def test_nsd_examples():
    a = np.zeros((30, 6, 6), bool)
    b = np.zeros_like(a)
    a[2:4, 2:4, 2:4] = True
    b[14:16, 2:4, 2:4] = True
    assert nsd(a, a, (1, 1, 1), 0.5) == 1.0
    assert nsd(a, b, (1.0, 1.0, 1.0), 1.0) == 0.0
    assert nsd(a, np.zeros_like(a), (1, 1, 1), 1.0) is None


def test_overlapping_boxes_match_pair_oracle():
    a = np.zeros((8, 9, 7), bool)
    b = np.zeros_like(a)
    a[1:6, 2:7, 1:5] = True
    b[2:8, 1:6, 2:7] = True
    assert nsd(a, b, (1, 1, 1), 1.0) == pytest.approx(nsd_oracle(a, b, (1, 1, 1), 1.0), abs=1e-12)


def test_default_tolerance_is_one_voxel():
    a = np.zeros((10, 10), bool)
    b = np.zeros_like(a)
    a[2:6, 2:6] = True
    b[3:7, 2:6] = True
    assert nsd(a, b, (2.0, 0.5)) == nsd(a, b, (2.0, 0.5), 2.0)


def test_fixture_suite_matches_oracles():
    for a, b, spacing, tol in metric_fixture_suite():
        assert dsc(a, b) == dsc_oracle(a, b)
        assert sorted(map(tuple, np.argwhere(boundary(a)).tolist())) == sorted(boundary_oracle(a))
        assert abs(nsd(a, b, spacing, tol) - nsd_oracle(a, b, spacing, tol)) <= 1e-9


def test_lcc_examples(rng):
    x = np.linspace(0.05, 0.95, 10)
    assert lcc(_samples(x, x)) == pytest.approx(1.0, abs=1e-15)
    assert lcc(_samples(1 - x, x)) == pytest.approx(-1.0, abs=1e-15)
    p, a = rng.random(20), rng.random(20)
    assert abs(lcc(_samples(p, a)) - pearson_oracle(p, a)) <= 1e-12
    assert lcc(_samples([0.5] * 4, x[:4])) is None
    assert lcc(_samples([0.5], [0.5])) is None


def test_srocc_examples_and_ties(rng):
    a = rng.random(15)
    assert srocc(_samples(a ** 3, a)) == pytest.approx(1.0)
    assert srocc(_samples(1 - a, a)) == pytest.approx(-1.0)
    p = [0.5, 0.5, 0.2, 0.9, 0.5, 0.1]
    q = [0.3, 0.4, 0.4, 0.8, 0.1, 0.2]
    assert average_ranks(p).tolist() == rank_oracle(p)
    assert abs(srocc(_samples(p, q)) - pearson_oracle(rank_oracle(p), rank_oracle(q))) <= 1e-12
    assert srocc(_samples([0.5, 0.5], [0.1, 0.2])) is None


def test_map_examples():
    act = np.linspace(0.1, 0.9, 12)
    assert map_at_k(_samples(act, act), 5) == 1.0
    assert map_at_k(_samples(1 - act, act), 5) == 0.0
    # 6-sample group, k=2: relevant items at predicted ranks 1 and 3
    actual = [0.1, 0.2, 0.5, 0.6, 0.7, 0.8]
    pred = [0.1, 0.6, 0.2, 0.7, 0.8, 0.9]
    assert map_at_k(_samples(pred, actual), 2) == 0.5


def test_map_per_class_and_small_groups(rng):
    p, a = rng.random(30), rng.random(30)
    cls = [0] * 12 + [1] * 15 + [2] * 3
    with pytest.warns(UserWarning, match="skipped"):
        got = map_at_k(_samples(p, a, cls), 5)
    want = np.mean([ap_at_k_oracle(list(p[:12]), list(a[:12]), 5),
                    ap_at_k_oracle(list(p[12:27]), list(a[12:27]), 5)])
    assert abs(got - want) <= 1e-9
    with pytest.warns(UserWarning):
        assert map_at_k(_samples(p[:3], a[:3]), 5) is None
    with pytest.raises(ValueError):
        map_at_k(_samples(p, a), 0)


def test_metric_sample_validation():
    with pytest.raises(ValueError):
        MetricSample(1.2, 0.5)
    with pytest.raises(ValueError):
        MetricSample(float("nan"), 0.5)


def test_evaluate_keys(rng):
    m = evaluate(_samples(rng.random(20), rng.random(20)))
    assert set(m) == {"lcc", "srocc", "map5", "map10"}


masks = st.integers(0, 2**31).map(lambda s: np.random.default_rng(s).random((5, 6, 4)) < 0.4)


@settings(max_examples=60, deadline=None)
@given(masks, masks, st.integers(0, 2**31))
def test_dsc_symmetry_and_permutation_invariance(a, b, seed):
    if not (a.any() or b.any()):
        return
    assert dsc(a, b) == dsc(b, a)
    if a.any():
        assert dsc(a, a) == 1.0
    perm = np.random.default_rng(seed).permutation(a.size)
    assert dsc(a.ravel()[perm], b.ravel()[perm]) == dsc(a, b)


vals = st.lists(st.floats(0.0, 1.0), min_size=3, max_size=25)


@settings(max_examples=80, deadline=None)
@given(vals, st.integers(0, 2**31))
def test_rank_and_affine_invariances(p, seed):
    r = np.random.default_rng(seed)
    a = r.random(len(p))
    s = _samples(p, a)
    rho = srocc(s)
    if rho is not None:
        assert srocc(_samples(np.sqrt(p), a)) == pytest.approx(rho, abs=1e-9)
    r0 = lcc(s)
    if r0 is not None and np.ptp(p) > 1e-6:
        q = 0.25 + 0.5 * np.asarray(p)
        assert lcc(_samples(q, a)) == pytest.approx(r0, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=10, max_size=20, unique=True),
       st.integers(0, 2**31))
def test_map_invariant_to_monotone_prediction_transform(p, seed):
    a = np.random.default_rng(seed).random(len(p))
    base = map_at_k(_samples(p, a), 5)
    assert map_at_k(_samples(np.asarray(p) ** 2, a), 5) == base
    assert base == ap_at_k_oracle(p, list(a), 5)
