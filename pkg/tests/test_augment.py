import numpy as np
import pytest

from dinomix.augment import apply_strong, apply_weak, minmax_normalize


@pytest.fixture
def pair():
    rng = np.random.default_rng(0)
    v = rng.random((10, 12, 14)).astype(np.float32)
    l = rng.integers(0, 4, size=v.shape).astype(np.uint8)
    return v, l


def test_full_crop_without_flip_is_identity(pair):
    v, l = pair
    wv, wl, rec = apply_weak(v, l, seed=3, crop_dims=v.shape, flip=False)
    assert rec.origin == (0, 0, 0) and rec.flips == (False, False, False)
    np.testing.assert_array_equal(wv, v)
    np.testing.assert_array_equal(wl, l)


def test_weak_is_deterministic(pair):
    v, l = pair
    a = apply_weak(v, l, seed=11, crop_dims=(6, 7, 8))
    b = apply_weak(v, l, seed=11, crop_dims=(6, 7, 8))
    assert a[2] == b[2]
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


@pytest.mark.parametrize("seed", range(5))
def test_weak_coordinate_map(pair, seed):
    v, l = pair
    wv, wl, rec = apply_weak(v, l, seed=seed, crop_dims=(6, 7, 8))
    rng = np.random.default_rng(100 + seed)
    for _ in range(100):
        p = tuple(int(rng.integers(n)) for n in wl.shape)
        q = rec.source_index(p)
        assert wl[p] == l[q]
        assert wv[p] == v[q]
    for o, c, n in zip(rec.origin, rec.crop_dims, v.shape):
        assert o + c <= n


def test_weak_rejects_oversized_crop(pair):
    v, l = pair
    with pytest.raises(ValueError, match="axis 2"):
        apply_weak(v, l, seed=0, crop_dims=(4, 4, 20))


def test_strong_gamma_one_is_normalisation(pair):
    v, _ = pair
    out, rec = apply_strong(v * 3 + 1, seed=0, gamma=1.0)
    assert rec.gamma == 1.0
    np.testing.assert_allclose(out, minmax_normalize(v * 3 + 1), rtol=0, atol=0)
    assert out.min() == 0.0 and out.max() == 1.0


def test_strong_hand_example():
    out, _ = apply_strong(np.array([0, 0.25, 1], np.float32).reshape(1, 1, 3), seed=0, gamma=2.0)
    np.testing.assert_allclose(out.ravel(), [0, 0.0625, 1], atol=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_strong_preserves_order_and_geometry(pair, seed):
    v, _ = pair
    out, rec = apply_strong(v, seed=seed)
    assert out.shape == v.shape
    assert 0.7 <= rec.gamma <= 1.5
    order = np.argsort(v.ravel(), kind="stable")
    assert np.all(np.diff(out.ravel()[order]) >= 0)


def test_strong_constant_input_gives_zeros():
    out, _ = apply_strong(np.full((2, 3, 4), 5.0, np.float32), seed=0)
    assert np.all(out == 0)
