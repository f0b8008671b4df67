import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from labelqa.selection import (CandidatePool, IOCounter, ProbabilityVolume, SelectionError,
                               entropy_score, mc_variance_score, per_class_uncertainty,
                               scan_uncertainty, select_active, select_semisup,
                               simulate_selection_benefit, write_selection_json)


def _random_probs(rng, shape, k=None):
    full = (k,) + shape if k else shape
    x = rng.gamma(0.7, size=full)
    return x / x.sum(axis=-4, keepdims=True)


def _entropy_oracle(p):
    C, X, Y, Z = p.shape
    vals = []
    for i in range(X):
        for j in range(Y):
            for k in range(Z):
                col = [float(p[c, i, j, k]) for c in range(C)]
                if max(col[1:]) >= col[0]:
                    vals.append(-sum(q * math.log(q) for q in col if q > 0))
    return sum(vals) / len(vals) if vals else 0.0


def _variance_oracle(stack):
    K = stack.shape[0]
    total, count = 0.0, 0
    for idx in np.ndindex(stack.shape[1:]):
        xs = [float(stack[(k,) + idx]) for k in range(K)]
        mu = sum(xs) / K
        total += sum((x - mu) ** 2 for x in xs) / K
        count += 1
    return total / count


def test_entropy_examples():
    onehot = np.zeros((3, 4, 4, 2), np.float32)
    onehot[1] = 1
    assert entropy_score(ProbabilityVolume(onehot)) == 0.0
    uniform = np.full((4, 3, 3, 3), 0.25, np.float32)
    assert entropy_score(ProbabilityVolume(uniform)) == pytest.approx(math.log(4), abs=1e-7)
    bg = np.zeros((2, 2, 2, 2), np.float32)
    bg[0] = 1
    assert entropy_score(ProbabilityVolume(bg)) == 0.0


def test_entropy_matches_oracle(rng):
    p = ProbabilityVolume(_random_probs(rng, (4, 5, 6, 3)))
    assert entropy_score(p) == pytest.approx(_entropy_oracle(p.probs.astype(np.float64)),
                                             abs=1e-9)


def test_entropy_maximal_only_for_uniform(rng):
    uniform = entropy_score(ProbabilityVolume(np.full((3, 4, 4, 4), 1 / 3, np.float32)))
    for _ in range(5):
        assert entropy_score(ProbabilityVolume(_random_probs(rng, (3, 4, 4, 4)))) < uniform


def test_mc_variance_examples(rng):
    p = _random_probs(rng, (3, 4, 4, 4)).astype(np.float32)
    assert mc_variance_score([ProbabilityVolume(p)] * 3) == 0.0
    a = np.array([0.8, 0.2], np.float32).reshape(2, 1, 1, 1)
    b = np.array([0.2, 0.8], np.float32).reshape(2, 1, 1, 1)
    got = mc_variance_score([ProbabilityVolume(a), ProbabilityVolume(b)])
    assert got == pytest.approx(0.09, abs=1e-7)


def test_mc_variance_matches_oracle(rng):
    stack = _random_probs(rng, (3, 4, 3, 5), k=4).astype(np.float32)
    got = mc_variance_score(ProbabilityVolume(stack))
    assert got == pytest.approx(_variance_oracle(stack.astype(np.float64)), abs=1e-9)


def test_mc_variance_errors(rng):
    a = ProbabilityVolume(_random_probs(rng, (2, 3, 3, 3)))
    b = ProbabilityVolume(_random_probs(rng, (2, 3, 3, 4)))
    with pytest.raises(SelectionError):
        mc_variance_score([a, b])
    with pytest.raises(SelectionError):
        mc_variance_score([a])


def test_probability_validation():
    with pytest.raises(SelectionError):
        ProbabilityVolume(np.full((2, 2, 2, 2), 0.6, np.float32))
    bad = np.full((2, 2, 2, 2), 0.5, np.float32)
    bad[0, 0, 0, 0], bad[1, 0, 0, 0] = -0.1, 1.1
    with pytest.raises(SelectionError):
        ProbabilityVolume(bad)


def test_probability_file_round_trip(tmp_path, rng):
    p = ProbabilityVolume(_random_probs(rng, (3, 4, 5, 6), k=2), {1: "liver", 2: "spleen"})
    header, payload = p.save(tmp_path / "prob")
    counter = IOCounter()
    back = ProbabilityVolume.load(tmp_path / "prob", counter)
    assert np.array_equal(back.probs, p.probs) and back.classes == p.classes
    assert counter.bytes == payload.stat().st_size == 4 * 2 * 3 * 4 * 5 * 6
    payload.write_bytes(payload.read_bytes()[:-4])
    with pytest.raises(SelectionError):
        ProbabilityVolume.load(tmp_path / "prob")


def test_per_class_and_scan_aggregation():
    p = np.zeros((3, 2, 1, 1), np.float32)
    p[:, 0, 0, 0] = [0.2, 0.8, 0.0]
    p[:, 1, 0, 0] = [0.1, 0.3, 0.6]
    prob = ProbabilityVolume(p)
    per = per_class_uncertainty(prob, "entropy")
    h1 = -(0.2 * math.log(0.2) + 0.8 * math.log(0.8))
    h2 = -(0.1 * math.log(0.1) + 0.3 * math.log(0.3) + 0.6 * math.log(0.6))
    assert per == pytest.approx({1: h1, 2: h2})
    assert scan_uncertainty(prob, "entropy") == pytest.approx((h1 + h2) / 2)


POOL = CandidatePool.from_arrays(["a", "b", "c"], segae=[0.9, 0.3, 0.6])


def test_selection_examples():
    assert select_active(POOL, "segae", 2) == ["b", "c"]
    assert select_active(POOL, "segae", 3) == ["b", "c", "a"]
    assert select_semisup(POOL, "segae", 1) == ["a"]
    assert select_semisup(POOL, "segae", 0) == []
    tie = CandidatePool.from_arrays(["b", "a"], segae=[0.5, 0.5])
    assert select_active(tie, "segae", 2) == ["a", "b"]
    unc = CandidatePool.from_arrays(["a", "b", "c"], entropy=[0.1, 0.7, 0.4])
    assert select_active(unc, "entropy", 2) == ["b", "c"]
    assert select_semisup(unc, "entropy", 2) == ["a", "c"]


def test_selection_errors():
    with pytest.raises(SelectionError):
        select_active(POOL, "entropy", 1)
    with pytest.raises(SelectionError):
        select_active(POOL, "segae", 4)
    with pytest.raises(SelectionError):
        select_active(POOL, "nonsense", 1)
    with pytest.raises(SelectionError):
        CandidatePool.from_arrays(["a", "a"], segae=[0.1, 0.2])


def test_random_selection_is_seeded():
    pool = CandidatePool.from_arrays([f"v{i}" for i in range(20)], segae=np.linspace(0, 1, 20))
    assert select_semisup(pool, "random", 5, seed=3) == select_semisup(pool, "random", 5, seed=3)
    assert select_active(pool, "random", 5, seed=3) != select_active(pool, "random", 5, seed=4)


def test_absent_scores_go_last():
    pool = CandidatePool.from_arrays(["a", "b", "c"], segae=[0.4, np.nan, 0.8])
    assert select_active(pool, "segae", 3) == ["a", "c", "b"]
    assert select_semisup(pool, "segae", 3) == ["c", "a", "b"]


scores = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=25)


@given(scores, st.randoms(use_true_random=False))
def test_active_and_semisup_are_reverses(values, rnd):
    ids = [f"id{i:02d}" for i in range(len(values))]
    pool = CandidatePool.from_arrays(ids, segae=values)
    n = len(ids)
    assert select_active(pool, "segae", n) == select_semisup(pool, "segae", n)[::-1]
    perm = list(range(n))
    rnd.shuffle(perm)
    shuffled = CandidatePool.from_arrays([ids[i] for i in perm], segae=[values[i] for i in perm])
    assert select_active(shuffled, "segae", n) == select_active(pool, "segae", n)


def test_simulation_random_tracks_pool_mean_and_oracle_is_best(rng):
    truth = rng.beta(5, 2, size=200)
    pool = CandidatePool.from_arrays([f"v{i:03d}" for i in range(200)], truth,
                                     segae=truth + rng.normal(0, 0.05, 200))
    res = simulate_selection_benefit(pool, ["random", "oracle", "segae"], 20, trials=200, seed=1)
    r = res["methods"]["random"]
    assert abs(r["mean"] - res["pool_mean"]) <= 2 * r["se"]
    assert all(o >= s for o, s in zip(res["methods"]["oracle"]["values"],
                                      res["methods"]["segae"]["values"]))
    act = simulate_selection_benefit(pool, ["oracle", "random"], 20, trials=50, mode="active")
    assert act["methods"]["oracle"]["mean"] > act["methods"]["random"]["mean"]


def test_selection_json(tmp_path):
    import json
    write_selection_json(["b"], POOL, "segae", 1, tmp_path / "s.json")
    data = json.loads((tmp_path / "s.json").read_text())
    assert data["ids"] == ["b"] and data["scores"] == [0.3] and data["method"] == "segae"
