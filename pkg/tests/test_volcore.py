import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dinomix.volcore import (
    ClassStats,
    DatasetSplit,
    PhantomError,
    PhantomSpec,
    VolumeFormatError,
    compute_class_stats,
    generate_dataset,
    generate_phantom,
    load_dataset,
    load_volume,
    make_split,
    read_manifest,
    store_volume,
)


def brute_force_ellipsoid_count(dims, center, axes):
    n = 0
    for p in itertools.product(*(range(d) for d in dims)):
        if sum(((x - c) / a) ** 2 for x, c, a in zip(p, center, axes)) <= 1.0:
            n += 1
    return n


SPEC = PhantomSpec(dims=(16, 24, 24), fractions=(0.1, 0.01), contrasts=(0.4, 0.7))


def test_phantom_is_deterministic():
    a = generate_phantom(7, SPEC)
    b = generate_phantom(7, SPEC)
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1].tobytes() == b[1].tobytes()
    c = generate_phantom(8, SPEC)
    assert c[1].tobytes() != a[1].tobytes()


def test_phantom_ellipsoid_matches_lattice_count():
    center = (7.5, 7.5, 7.5)
    spec = PhantomSpec(dims=(16, 16, 16), fractions=(0.01,), contrasts=(0.5,),
                       semi_axes=((2, 2, 2),), centers=(center,))
    _, labels = generate_phantom(0, spec)
    expected = brute_force_ellipsoid_count((16, 16, 16), center, (2, 2, 2))
    assert expected > 0
    assert int((labels == 1).sum()) == expected


def test_phantom_fraction_ratio():
    spec = PhantomSpec(dims=(32, 64, 64), fractions=(0.10, 0.001), contrasts=(0.3, 0.6))
    for seed in range(3):
        _, labels = generate_phantom(seed, spec)
        ratio = (labels == 1).sum() / (labels == 2).sum()
        assert 75 <= ratio <= 125


def test_phantom_background_is_complement():
    _, labels = generate_phantom(3, SPEC)
    stats = compute_class_stats([labels], SPEC.num_classes)
    assert stats.counts[0] == labels.size - stats.counts[1:].sum()


def test_phantom_intensity_offsets():
    spec = PhantomSpec(dims=(16, 24, 24), fractions=(0.1, 0.05), contrasts=(0.4, 0.7), noise=0.0)
    vol, labels = generate_phantom(1, spec)
    assert vol.dtype == np.float32 and labels.dtype == np.uint8
    np.testing.assert_allclose(vol[labels == 0], 0.1, atol=1e-6)
    np.testing.assert_allclose(vol[labels == 2], 0.8, atol=1e-6)


def test_phantom_that_cannot_fit_names_class():
    spec = PhantomSpec(dims=(8, 8, 8), fractions=(0.01, 0.02), contrasts=(0.3, 0.5),
                       semi_axes=(None, (6, 2, 2)))
    with pytest.raises(PhantomError, match="class 2"):
        generate_phantom(0, spec)


@pytest.mark.parametrize("kw", [dict(fractions=(0.6, 0.5)), dict(fractions=(0.1, -0.1)),
                                dict(contrasts=(0.1,))])
def test_invalid_phantom_spec(kw):
    args = dict(dims=(8, 8, 8), fractions=(0.1, 0.1), contrasts=(0.3, 0.5))
    args.update(kw)
    with pytest.raises(PhantomError):
        generate_phantom(0, PhantomSpec(**args))


# class stats ---------------------------------------------------------------


def test_class_stats_examples():
    zeros = np.zeros((2, 2, 2), np.uint8)
    assert compute_class_stats([zeros], 2).counts.tolist() == [8, 0]
    three = zeros.copy()
    three.flat[[0, 3, 5]] = 1
    s = compute_class_stats([three], 2)
    assert s.counts.tolist() == [5, 3] and s.total_voxels == 8
    assert compute_class_stats([three, three], 2).counts.tolist() == [10, 6]


def test_class_stats_rejects_out_of_range():
    with pytest.raises(ValueError, match="3"):
        compute_class_stats([np.full((2, 2, 2), 3, np.uint8)], 2)


labels_strategy = hnp.arrays(np.uint8, hnp.array_shapes(min_dims=3, max_dims=3, max_side=5),
                             elements=st.integers(0, 3))


@given(labels_strategy, labels_strategy)
def test_class_stats_additivity(a, b):
    s = compute_class_stats([a, b], 4)
    assert s == compute_class_stats([a], 4) + compute_class_stats([b], 4)
    assert s.counts.sum() == s.total_voxels


# DMXV format ---------------------------------------------------------------


def test_store_byte_layout(tmp_path):
    p = tmp_path / "one.dmxv"
    store_volume(np.zeros((1, 1, 1), np.float32), p)
    raw = p.read_bytes()
    assert len(raw) == 4 + 1 + 1 + 12 + 4
    assert raw[:4] == b"DMXV" and raw[4] == 1 and raw[5] == 0
    assert raw[6:18] == (1).to_bytes(4, "little") * 3


def test_store_label_dtype_code(tmp_path):
    p = tmp_path / "lbl.dmxv"
    store_volume(np.ones((2, 3, 4), np.uint8), p)
    raw = p.read_bytes()
    assert raw[5] == 1
    assert raw[6:18] == b"".join(n.to_bytes(4, "little") for n in (2, 3, 4))
    assert len(raw) == 18 + 24


def test_roundtrip_random_volume(tmp_path):
    v = np.random.default_rng(0).standard_normal((4, 5, 6)).astype(np.float32)
    p = tmp_path / "v.dmxv"
    store_volume(v, p)
    out = load_volume(p)
    assert out.dtype == np.float32 and out.shape == (4, 5, 6)
    assert out.tobytes() == v.tobytes()


def test_load_bad_magic(tmp_path):
    p = tmp_path / "bad.dmxv"
    p.write_bytes(b"XXXX" + bytes(14) + bytes(4))
    with pytest.raises(VolumeFormatError, match="unrecognized format"):
        load_volume(p)


def test_load_length_mismatch(tmp_path):
    p = tmp_path / "short.dmxv"
    store_volume(np.zeros((2, 2, 2), np.float32), p)
    p.write_bytes(p.read_bytes()[:-4])  # 7 payload values
    with pytest.raises(VolumeFormatError, match="truncated/oversized"):
        load_volume(p)
    store_volume(np.zeros((2, 2, 2), np.float32), p)
    p.write_bytes(p.read_bytes() + bytes(4))
    with pytest.raises(VolumeFormatError, match="truncated/oversized"):
        load_volume(p)


@settings(max_examples=40, deadline=None)
@given(
    st.one_of(
        hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6),
                   elements=st.floats(-1e6, 1e6, width=32)),
        hnp.arrays(np.uint8, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6)),
    )
)
def test_roundtrip_property(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("rt") / "x.dmxv"
    store_volume(arr, p)
    out = load_volume(p)
    assert out.dtype == arr.dtype and out.shape == arr.shape
    assert out.tobytes() == arr.tobytes()


# splits and manifests --------------------------------------------------------


def test_split_disjoint():
    split = make_split(16, 0.2, 2, 4)
    assert len(split.labeled) == 3 and len(split.unlabeled) == 13
    split.validate()
    bad = DatasetSplit(labeled=["a"], unlabeled=["a"])
    with pytest.raises(ValueError, match="'a'"):
        bad.validate()


def test_dataset_manifest_roundtrip(tmp_path):
    split = make_split(3, 0.34, 1, 1)
    manifest = generate_dataset(tmp_path / "ds", 5, SPEC, split)
    split2, files = read_manifest(manifest)
    assert split2 == split
    ds = load_dataset(manifest)
    assert ds.num_classes == 3
    assert [c.case_id for c in ds.section("test")] == split.test
    for cid, (img, lbl) in files.items():
        assert img.exists() and lbl.exists()
