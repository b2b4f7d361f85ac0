import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcseg.datapipe import (
    BatchComposer, DatasetSplit, PatchSpec, SyntheticSpec, Transform, augment, compose_batch,
    foreground_crop_box, generate_synthetic, load_case, make_split, normalize_intensity,
    preprocess, read_manifest, sample_patch, synthetic_case, write_manifest,
    write_synthetic_dataset,
)
from mcseg.volumes import LabelMask, Volume


def test_preprocess_crop_box_example():
    m = np.zeros((64, 64, 64), np.uint8)
    m[10:21, 10:21, 10:21] = 1
    assert foreground_crop_box(m, 5) == (slice(5, 26),) * 3
    v, y = preprocess(Volume(np.random.default_rng(0).normal(size=m.shape)), LabelMask(m), 5)
    assert v.shape == y.shape == (21, 21, 21)
    assert y.data.sum() == m.sum()


def test_crop_clamps_to_bounds_and_rejects_empty():
    m = np.zeros((10, 10, 10), np.uint8)
    m[0, 9, 4] = 1
    assert foreground_crop_box(m, 3) == (slice(0, 4), slice(6, 10), slice(1, 8))
    with pytest.raises(ValueError):
        foreground_crop_box(np.zeros((4, 4, 4)), 1)


def test_normalization_statistics_and_constant_volume():
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = rng.normal(rng.uniform(-50, 50), rng.uniform(0.1, 20), size=(9, 7, 5))
        z = normalize_intensity(x).astype(np.float64)
        assert abs(z.mean()) < 1e-5 and abs(z.var() - 1) < 1e-4
    assert not normalize_intensity(np.full((4, 4, 4), 3.7)).any()


def test_sample_patch_whole_volume_and_reproducible():
    v = np.arange(4 * 5 * 6, dtype=np.float32).reshape(4, 5, 6)
    p, l = sample_patch(v, v > 10, PatchSpec((4, 5, 6)), np.random.default_rng(0))
    assert np.array_equal(p, v) and np.array_equal(l, v > 10)
    spec = PatchSpec((2, 3, 3))
    a = sample_patch(v, v, spec, np.random.default_rng(5))
    b = sample_patch(v, v, spec, np.random.default_rng(5))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[0], a[1])
    with pytest.raises(ValueError):
        sample_patch(v, None, PatchSpec((5, 5, 5)), np.random.default_rng(0))


def test_sample_patch_corner_frequency():
    v = np.zeros((3, 2, 2), np.float32)
    v[1] = 1                            # corner 0 -> first slice 0, corner 1 -> first slice 1
    rng = np.random.default_rng(2)
    hits = sum(sample_patch(v, None, PatchSpec((2, 2, 2)), rng)[0][0, 0, 0] for _ in range(1000))
    assert abs(hits / 1000 - 0.5) <= 0.05


def test_augment_identity_when_disabled():
    x = np.random.default_rng(0).normal(size=(4, 4, 3))
    out, lab = augment(x, x > 0, PatchSpec(rot90_inplane=False, flips=False), np.random.default_rng(0))
    assert np.array_equal(out, x) and np.array_equal(lab, x > 0)


def test_half_turn_twice_is_identity():
    x = np.random.default_rng(0).normal(size=(4, 5, 3))
    t = Transform(2)
    assert np.array_equal(t.apply(t.apply(x)), x)


transforms = st.builds(Transform, st.integers(0, 3), st.booleans(), st.booleans())


@settings(max_examples=64, deadline=None)
@given(t=transforms, u=transforms)
def test_transforms_form_a_group(t, u):
    x = np.random.default_rng(3).normal(size=(4, 4, 3))
    y = (x > 0).astype(np.uint8)
    assert np.array_equal(t.invert(t.apply(x)), x)
    # the composition of two transforms is again one of the 16 transforms
    composed = u.apply(t.apply(x))
    assert any(np.array_equal(composed, Transform(k, a, b).apply(x))
               for k in range(4) for a in (False, True) for b in (False, True))
    assert t.apply(y).sum() == y.sum()
    # volume and mask move identically
    assert np.array_equal(t.apply(x) > 0, t.apply(y).astype(bool))


def _pools(n_lab, n_unl, shape=(6, 6, 4)):
    rng = np.random.default_rng(0)
    lab = [(f"L{i}", rng.normal(size=shape).astype(np.float32), rng.random(shape) > 0.5)
           for i in range(n_lab)]
    unl = [(f"U{i}", rng.normal(size=shape).astype(np.float32)) for i in range(n_unl)]
    return lab, unl


def test_compose_batch_minimal_pools():
    lab, unl = _pools(2, 2)
    b = compose_batch(lab, unl, 0, PatchSpec((4, 4, 4)))
    assert sorted(b.ids[:2]) == ["L0", "L1"] and sorted(b.ids[2:]) == ["U0", "U1"]
    assert b.labeled.tolist() == [True, True, False, False]
    assert b.images.shape == b.labels.shape == (4, 1, 4, 4, 4)
    assert not b.labels[2:].any()
    with pytest.raises(ValueError):
        compose_batch([], unl, 0)


def test_labeled_counts_over_epochs():
    lab, unl = _pools(3, 5)
    comp = BatchComposer(lab, unl, PatchSpec((4, 4, 4)), seed=1)
    iters = 30
    counts = Counter()
    for _ in range(iters):
        b = comp.next_batch()
        assert b.labeled.sum() == 2
        counts.update(b.ids[:2])
    target = math.ceil(iters * 2 / 3)
    assert all(abs(counts[f"L{i}"] - target) <= 1 for i in range(3))


def test_composer_state_resume():
    lab, unl = _pools(3, 4)
    a = BatchComposer(lab, unl, PatchSpec((4, 4, 4)), seed=9)
    for _ in range(3):
        a.next_batch()
    state = a.get_state()
    expected = [a.next_batch() for _ in range(4)]
    b = BatchComposer(lab, unl, PatchSpec((4, 4, 4)), seed=123)
    b.set_state(state)
    for e in expected:
        got = b.next_batch()
        assert got.ids == e.ids and np.array_equal(got.images, e.images)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 60), ratio=st.floats(0.01, 1.0), seed=st.integers(0, 2**16))
def test_split_disjoint_and_ratio(n, ratio, seed):
    ids = [f"c{i}" for i in range(n + 3)]
    s = make_split(ids[:n], ids[n:], ratio, seed)
    assert not set(s.labeled) & set(s.unlabeled)
    assert not (set(s.labeled) | set(s.unlabeled)) & set(s.validation)
    assert len(s.labeled) + len(s.unlabeled) == n
    assert len(s.labeled) == max(1, round(ratio * n))


def test_split_example_and_manifest_roundtrip(tmp_path):
    s = make_split([f"c{i}" for i in range(32)], ["v0"], 0.1, seed=0)
    assert len(s.labeled) == 3 and len(s.unlabeled) == 29
    write_manifest(s, tmp_path / "split.txt")
    back = read_manifest(tmp_path / "split.txt")
    assert (back.labeled, back.unlabeled, back.validation) == (s.labeled, s.unlabeled, s.validation)
    (tmp_path / "bad.txt").write_text("c1 teacher\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "bad.txt")
    with pytest.raises(ValueError):
        DatasetSplit(("a",), ("a",), ())


SMALL = SyntheticSpec(shape=(24, 24, 24), count=4, seed=3)


def test_synthetic_degenerate_generator_gives_mask():
    v, m = synthetic_case(replace(SMALL, blur_sigma=0.0, noise_sigma=0.0), 1)
    assert np.array_equal(v.data, m.data.astype(np.float32))


def test_synthetic_deterministic():
    a, b = generate_synthetic(SMALL), generate_synthetic(SMALL)
    for (va, ma), (vb, mb) in zip(a, b):
        assert va.data.tobytes() == vb.data.tobytes() and ma == mb
    assert synthetic_case(SMALL, 0)[0].data.tobytes() != synthetic_case(SMALL, 1)[0].data.tobytes()


def test_synthetic_foreground_fraction_default_spec():
    spec = SyntheticSpec()
    fractions = [synthetic_case(spec, i)[1].data.mean() for i in range(100)]
    assert min(fractions) > 0.02 and max(fractions) < 0.5


def test_synthetic_rejects_tiny_radius():
    with pytest.raises(ValueError):
        synthetic_case(replace(SMALL, radius_range=(0.05, 0.1)), 0)


def test_write_synthetic_dataset(tmp_path):
    split = write_synthetic_dataset(replace(SMALL, count=10), tmp_path, n_validation=2,
                                    labeled_ratio=0.25)
    assert split.validation == ("case008", "case009")
    assert len(split.labeled) == 2 and len(split.unlabeled) == 6
    v, m = load_case(tmp_path, "case003")
    ref_v, ref_m = synthetic_case(replace(SMALL, count=10), 3)
    assert v.data.tobytes() == ref_v.data.tobytes() and m == ref_m
    assert read_manifest(tmp_path / "split.txt").labeled == split.labeled
