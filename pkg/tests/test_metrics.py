import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmldm.errors import ValidationError
from gmldm.metrics import difference_saliency, evaluate_pairs, pearson, ssim3d
from gmldm.volumes import PhantomSpec, generate_phantom, region_atlas


def test_pearson_examples():
    a = np.random.default_rng(0).random((5, 6, 7))
    assert pearson(a, a) == pytest.approx(1.0, abs=1e-12)
    assert pearson(a, -a) == pytest.approx(-1.0, abs=1e-12)
    # by hand: deviations (-1.5,-.5,.5,1.5) and (-1.75,.25,1.25,.25) give 3.5 / sqrt(5 * 4.75)
    assert pearson([1, 2, 3, 4], [2, 4, 5, 4]) == pytest.approx(3.5 / np.sqrt(23.75), abs=1e-12)
    assert pearson([1, 2, 3, 4], [2, 4, 5, 4]) == pytest.approx(0.7181848464596, abs=1e-12)


def test_pearson_constant_raises():
    with pytest.raises(ValidationError):
        pearson(np.ones(10), np.arange(10.0))
    with pytest.raises(ValidationError):
        pearson(np.ones(3), np.ones(4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.01, 100), st.floats(-100, 100))
def test_pearson_affine_invariance(seed, s, t):
    rng = np.random.default_rng(seed)
    a, b = rng.random(200), rng.random(200)
    assert pearson(a, s * b + t) == pytest.approx(pearson(a, b), abs=1e-10)


def test_pearson_mask():
    a = np.random.default_rng(1).random((4, 4, 4))
    mask = np.zeros(a.shape, bool)
    mask[:2] = True
    assert pearson(a, a * 2, mask) == pytest.approx(1.0, abs=1e-12)


def naive_ssim(a, b, w=7, c1=1e-4, c2=9e-4):
    vals = []
    for i in range(a.shape[0] - w + 1):
        for j in range(a.shape[1] - w + 1):
            for k in range(a.shape[2] - w + 1):
                x = a[i : i + w, j : j + w, k : k + w]
                y = b[i : i + w, j : j + w, k : k + w]
                mx, my = x.mean(), y.mean()
                vx, vy = x.var(), y.var()
                cxy = ((x - mx) * (y - my)).mean()
                vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_naive_reimplementation():
    rng = np.random.default_rng(42)
    a, b = rng.random((8, 8, 8)), rng.random((8, 8, 8))
    assert ssim3d(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-7)
    c, d = rng.random((9, 10, 8)), rng.random((9, 10, 8))
    assert ssim3d(c, d) == pytest.approx(naive_ssim(c, d), abs=1e-7)


def test_ssim_identity_symmetry_shift():
    rng = np.random.default_rng(3)
    a, b = rng.random((10, 9, 8)), rng.random((10, 9, 8))
    assert ssim3d(a, a) == pytest.approx(1.0, abs=1e-9)
    assert ssim3d(a, b) == pytest.approx(ssim3d(b, a), abs=1e-10)
    flat = np.full((8, 8, 8), 0.4)
    assert ssim3d(flat, flat + 0.1) < 1.0


def test_ssim_too_small():
    with pytest.raises(ValidationError):
        ssim3d(np.zeros((6, 8, 8)), np.zeros((6, 8, 8)))


def test_evaluate_pairs_self(tmp_path):
    vols = [generate_phantom(PhantomSpec(shape=(12, 12, 12), n_components=8, n_regions=3), i)[0] for i in range(3)]
    rep = evaluate_pairs(vols, vols)
    assert rep.pearson == pytest.approx(1.0, abs=1e-12) and rep.ssim == pytest.approx(1.0, abs=1e-9)
    assert rep.n_voxels == 12**3
    rep.write_csv(tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["subject_id", "pearson", "ssim"] and len(rows) == 4
    with pytest.raises(ValidationError):
        evaluate_pairs(vols, vols[:2])


def _atlas():
    return region_atlas(4, (16, 16, 16))


def test_saliency_identical_sets_zero():
    rng = np.random.default_rng(0)
    s = [rng.random((16, 16, 16)) for _ in range(3)]
    m = difference_saliency(s, s, _atlas())
    assert np.all(m.volume.data == 0)
    assert all(v == 0 for v in m.region_scores.values())


def test_saliency_localizes_region_and_is_order_invariant(tmp_path):
    atlas = _atlas()
    rng = np.random.default_rng(1)
    base = [rng.random(atlas.shape) * 0.1 for _ in range(4)]
    shifted = [b + 0.3 * (atlas == 3) for b in base]
    m = difference_saliency(shifted, base, atlas)
    assert m.ranking[0] == 3
    m2 = difference_saliency(shifted[::-1], base[::-1], atlas)
    assert np.allclose(m.volume.data, m2.volume.data, atol=1e-12)
    assert np.all(m.volume.data >= 0)
    labeled = atlas >= 0
    weighted = sum(m.region_scores[r] * m.region_sizes[r] for r in m.region_scores) / labeled.sum()
    assert weighted == pytest.approx(m.volume.data[labeled].mean(), abs=1e-9)
    m.write(tmp_path)
    assert (tmp_path / "saliency.vol").exists()
    assert next(csv.reader(open(tmp_path / "saliency_regions.csv"))) == ["rank", "region", "score", "n_voxels"]


def test_saliency_shape_mismatch():
    with pytest.raises(ValidationError):
        difference_saliency([np.zeros((16, 16, 16))], [np.zeros((16, 16, 15))], _atlas())
    with pytest.raises(ValidationError):
        difference_saliency([], [np.zeros((16, 16, 16))], _atlas())
