import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from labelqa.degrade import (DegradationError, DegradationSpec, SynthesisConfig,
                             apply_degradation, balanced_indices, bin_counts,
                             checkpoint_strengths, read_dataset, resample_balanced,
                             synthesize_dataset, write_dataset)
from labelqa.metrics import dsc
from labelqa.volume_io import LabeledVolume, SlicePair

from conftest import convex_mask, dilate_oracle, erode_oracle


def test_erode_zero_is_identity(rng):
    m = rng.random((9, 9)) < 0.5
    out = apply_degradation(m, DegradationSpec("erode", 0))
    assert np.array_equal(out, m) and out is not m


def test_square_erosion_example():
    m = np.zeros((9, 9), bool)
    m[2:7, 2:7] = True
    out = apply_degradation(m, DegradationSpec("erode", 1))
    assert out.sum() == 9 and out[3:6, 3:6].all()
    assert dsc(out, m) == pytest.approx(2 * 9 / (9 + 25))
    assert np.array_equal(out, erode_oracle(m, 1))


@pytest.mark.parametrize("t", [1, 2, 3])
def test_morphology_matches_oracle(rng, t):
    for shape in ((10, 11), (6, 7, 5)):
        m = rng.random(shape) < 0.6
        assert np.array_equal(apply_degradation(m, DegradationSpec("erode", t)),
                              erode_oracle(m, t))
        assert np.array_equal(apply_degradation(m, DegradationSpec("dilate", t)),
                              dilate_oracle(m, t))


def test_closing_contains_original(rng):
    for _ in range(10):
        m = convex_mask(rng, (24, 24))
        d = apply_degradation(m, DegradationSpec("dilate", 1))
        c = apply_degradation(d, DegradationSpec("erode", 1))
        assert not np.any(m & ~c)
        assert np.array_equal(c, erode_oracle(dilate_oracle(m, 1), 1))


def test_drop_components_by_count():
    m = np.zeros((10, 30), bool)
    for k in range(4):
        m[2:5, 1 + 7 * k:4 + 7 * k] = True
    out = apply_degradation(m, DegradationSpec("drop_components", 0.5, seed=3))
    assert out.sum() == m.sum() // 2
    assert not np.any(out & ~m)
    assert not apply_degradation(m, DegradationSpec("drop_components", 1.0)).any()


def test_boundary_noise_only_touches_band(rng):
    m = convex_mask(rng, (30, 30))
    out = apply_degradation(m, DegradationSpec("boundary_noise", 1.0, seed=1))
    interior = erode_oracle(m, 1)
    outside = ~dilate_oracle(m, 1)
    assert np.array_equal(out[interior], m[interior])
    assert np.array_equal(out[outside], m[outside])
    assert np.array_equal(apply_degradation(m, DegradationSpec("boundary_noise", 0.0)), m)


def test_shift_moves_mask():
    m = np.zeros((12, 12), bool)
    m[4:7, 4:7] = True
    out = apply_degradation(m, DegradationSpec("shift", 2, seed=5))
    assert out.sum() == 9 and not np.array_equal(out, m)
    moved = [np.array_equal(out, np.roll(m, s, axis=a)) for a in (0, 1) for s in (2, -2)]
    assert any(moved)
    assert not apply_degradation(m, DegradationSpec("shift", 20, seed=5)).any()


def test_checkpoint_schedule_decays():
    strengths = [checkpoint_strengths(e) for e in (10, 20, 50, 100, 500)]
    assert all(a >= b for a, b in zip(strengths, strengths[1:]))
    assert checkpoint_strengths(1) == (0.9, 1.0, 20)


def test_spec_validation():
    with pytest.raises(DegradationError):
        DegradationSpec("blur", 1)
    with pytest.raises(DegradationError):
        DegradationSpec("erode", 1.5)
    with pytest.raises(DegradationError):
        DegradationSpec("boundary_noise", 1.5)
    with pytest.raises(DegradationError):
        DegradationSpec("erode", -1)
    with pytest.raises(DegradationError):
        apply_degradation(np.zeros((4, 4)), DegradationSpec("erode", 1))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["erode", "dilate", "drop_components", "boundary_noise", "shift",
                        "checkpoint_schedule"]),
       st.integers(0, 2**31), st.integers(0, 2**31))
def test_shape_kept_and_deterministic(kind, seed, mseed):
    m = np.random.default_rng(mseed).random((9, 8, 5)) < 0.5
    m[4, 4, 2] = True
    sev = {"erode": 2, "dilate": 2, "drop_components": 0.5, "boundary_noise": 0.3,
           "shift": 3, "checkpoint_schedule": 20}[kind]
    spec = DegradationSpec(kind, sev, seed)
    a = apply_degradation(m, spec)
    assert a.shape == m.shape and a.dtype == bool
    assert np.array_equal(a, apply_degradation(m, spec))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_erosion_dilation_monotone_on_convex(seed):
    r = np.random.default_rng(seed)
    m = convex_mask(r, (36, 36))
    prev_e = prev_d = 1.0
    for t in range(0, 8):
        e = apply_degradation(m, DegradationSpec("erode", t))
        if e.any():
            d = dsc(e, m)
            assert d <= prev_e
            prev_e = d
        d = dsc(apply_degradation(m, DegradationSpec("dilate", t)), m)
        assert d <= prev_d
        prev_d = d


# synthesis --------------------------------------------------------------------

def _cube_volume():
    gt = np.zeros((16, 16, 16), np.uint16)
    gt[3:10, 4:12, 2:9] = 1
    gt[9:14, 2:7, 7:15] = 2
    img = np.random.default_rng(0).integers(-300, 300, size=gt.shape).astype(np.int16)
    return LabeledVolume(img, gt, classes={1: "liver", 2: "spleen"}, id="cube")


def test_pair_count_matches_enumeration():
    vol = _cube_volume()
    cfg = SynthesisConfig(severity_grid={"erode": [0, 1, 2], "dilate": [1, 2]}, size=32)
    pairs = synthesize_dataset([vol], cfg)
    present = sum(len(set(np.nonzero(vol.ground_truth == c)[2].tolist())) for c in (1, 2))
    assert present == 7 + 8
    assert len(pairs) == present * 5


def test_severity_zero_gives_perfect_dsc_and_erasure_gives_zero():
    vol = _cube_volume()
    pairs = synthesize_dataset([vol], SynthesisConfig(severity_grid={"erode": [0]}, size=32))
    assert pairs and all(p.true_dsc == 1.0 for p in pairs)
    pairs = synthesize_dataset([vol], SynthesisConfig(severity_grid={"erode": [0, 1, 2, 6]},
                                                      size=32))
    d = [p.true_dsc for p in pairs]
    assert min(d) == 0.0 and max(d) == 1.0
    assert any(p.empty_mask for p in pairs)
    assert min(x for x in d if x > 0) <= 0.5


def test_dsc_range_on_phantoms():
    from labelqa.synthetic import make_phantoms
    cfg = SynthesisConfig(severity_grid={"erode": [0, 1, 2, 3, 5, 8]}, size=32)
    d = np.array([p.true_dsc for p in synthesize_dataset(make_phantoms(2), cfg)])
    assert d.max() == 1.0
    assert d[d > 0].min() <= 0.05 or d.min() == 0.0


def test_empty_class_warns(caplog):
    vol = _cube_volume()
    vol.classes[5] = "pancreas"
    synthesize_dataset([vol], SynthesisConfig(severity_grid={"erode": [0]}, size=32))
    assert "class 5 is empty" in caplog.text


def test_synthesis_needs_ground_truth():
    vol = _cube_volume()
    vol.ground_truth = None
    with pytest.raises(ValueError):
        synthesize_dataset([vol], SynthesisConfig(severity_grid={"erode": [0]}, size=32))


def _pairs(dscs):
    z = np.zeros((4, 4), np.float32)
    return [SlicePair(z, z.astype(np.uint8), 1, float(d), slice_index=i)
            for i, d in enumerate(dscs)]


def test_resample_uniform_input_is_permutation():
    d = np.repeat(np.arange(10) / 10 + 0.05, 3)
    cfg = SynthesisConfig(samples_per_bin=3, seed=4)
    pairs = _pairs(d)
    out = resample_balanced(pairs, cfg)
    assert sorted(p.slice_index for p in out) == list(range(30))


def test_resample_skewed_input(caplog):
    r = np.random.default_rng(0)
    d = np.concatenate([r.uniform(0.9, 1.0, 900), r.uniform(0.0, 0.9, 100)])
    cfg = SynthesisConfig(samples_per_bin=50, seed=1)
    idx = balanced_indices(d, cfg)
    counts = bin_counts(d[idx], 10)
    assert counts.max() <= 50
    assert set(counts[counts > 0].tolist()) == {50}
    assert np.array_equal(idx, balanced_indices(d, cfg))
    idx = balanced_indices(np.full(20, 0.95), cfg)
    assert bin_counts(np.full(20, 0.95)[idx], 10).tolist() == [0] * 9 + [50]
    assert "has no source samples" in caplog.text


def test_dataset_round_trip_and_bytes(tmp_path):
    vol = _cube_volume()
    cfg = SynthesisConfig(severity_grid={"erode": [0, 1], "boundary_noise": [0.3]}, size=32)
    pairs = synthesize_dataset([vol], cfg)
    write_dataset(pairs, tmp_path / "a", extra={"config": {"seed": 0}})
    write_dataset(synthesize_dataset([vol], cfg), tmp_path / "b", extra={"config": {"seed": 0}})
    for f in ("records.bin", "index.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    back = read_dataset(tmp_path / "a")
    assert len(back) == len(pairs)
    for p, q in zip(pairs, back):
        assert np.array_equal(p.pixels, q.pixels) and np.array_equal(p.mask, q.mask)
        assert (p.true_dsc, p.class_id, p.slice_index) == (q.true_dsc, q.class_id, q.slice_index)
