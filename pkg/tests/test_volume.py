from __future__ import annotations

import numpy as np
import pytest

from pds import AtlasMask, ModalityPair, Series4, Volume3
from pds.volume import normalize, resample_trilinear, segment_time_axis


def test_volume_construction_and_freeze():
    data = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    v = Volume3((2, 3, 4), (1.0, 2.0, 3.0), data)
    assert v.dims == (2, 3, 4)
    assert v.spacing == (1.0, 2.0, 3.0)
    assert v.n_voxels == 24
    assert v.data.dtype == np.float64
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0  # frozen buffer


def test_volume_rejects_bad_inputs():
    ok = np.zeros((2, 2, 2))
    with pytest.raises(ValueError):
        Volume3((2, 2), (1, 1, 1), ok)
    with pytest.raises(ValueError):
        Volume3((2, 2, 2), (1, 0, 1), ok)
    with pytest.raises(ValueError):
        Volume3((2, 2, 2), (1, 1, 1), np.zeros((2, 2, 3)))
    bad = ok.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        Volume3((2, 2, 2), (1, 1, 1), bad)


def test_with_data_keeps_geometry():
    v = Volume3((2, 2, 2), (1.0, 1.5, 2.0), np.zeros((2, 2, 2)))
    w = v.with_data(np.ones((2, 2, 2)))
    assert w.dims == v.dims and w.spacing == v.spacing
    assert float(w.data.sum()) == 8.0


def test_series_frames_and_validation():
    frames = np.arange(2 * 8, dtype=np.float64).reshape(2, 2, 2, 2)
    s = Series4((2, 2, 2), (1, 1, 1), 2, frames)
    f1 = s.frame(1)
    assert isinstance(f1, Volume3)
    assert np.array_equal(f1.data, frames[1])
    with pytest.raises(ValueError):
        Series4((2, 2, 2), (1, 1, 1), 3, frames)
    with pytest.raises(ValueError):
        Series4((2, 2, 2), (1, 1, 1), 0, frames[:0])


def test_atlas_mask_regions():
    labels = np.zeros((2, 2, 2), dtype=np.int32)
    labels[0, 0, 0] = 1
    labels[1, 1, 1] = 2
    m = AtlasMask((2, 2, 2), labels)
    assert m.n_regions == 2
    b = m.binary()
    assert b.dtype == np.float64
    assert float(b.sum()) == 2.0
    assert set(np.unique(b)) == {0.0, 1.0}


def test_atlas_mask_rejects_bad_labels():
    with pytest.raises(ValueError):
        AtlasMask((2, 2, 2), np.zeros((2, 2, 2)))  # float labels
    neg = np.zeros((2, 2, 2), dtype=np.int32)
    neg[0, 0, 0] = -1
    with pytest.raises(ValueError):
        AtlasMask((2, 2, 2), neg)
    sparse = np.zeros((2, 2, 2), dtype=np.int32)
    sparse[0, 0, 0] = 3  # declares regions 1..3 but only 3 present
    with pytest.raises(ValueError, match="empty region"):
        AtlasMask((2, 2, 2), sparse)


def test_modality_pair_class_tags():
    v = Volume3((2, 2, 2), (1, 1, 1), np.zeros((2, 2, 2)))
    ModalityPair(v, v, "s", "NC")
    with pytest.raises(ValueError):
        ModalityPair(v, v, "s", "XX")


def test_normalize_three_values():
    v = Volume3((1, 1, 3), (1, 1, 1), np.array([[[2.0, 4.0, 6.0]]]))
    out = normalize(v)
    assert np.array_equal(out.data, [[[0.0, 0.5, 1.0]]])


def test_normalize_constant_maps_to_zero():
    v = Volume3((2, 2, 2), (1, 1, 1), np.full((2, 2, 2), 3.7))
    assert np.array_equal(normalize(v).data, np.zeros((2, 2, 2)))


def test_normalize_is_idempotent():
    rng = np.random.default_rng(5)
    v = Volume3((4, 4, 4), (1, 1, 1), rng.normal(size=(4, 4, 4)))
    once = normalize(v)
    twice = normalize(once)
    assert float(once.data.min()) == 0.0
    assert float(once.data.max()) == 1.0
    assert np.array_equal(once.data, twice.data)


def test_segment_time_axis_runs_longer_first():
    frames = np.arange(7, dtype=np.float64)[:, None, None, None] * np.ones((7, 2, 2, 2))
    s = Series4((2, 2, 2), (1, 1, 1), 7, frames)
    segs = segment_time_axis(s, 2)
    # 7 frames over 2 runs -> lengths (4, 3), longer first
    assert len(segs) == 2
    assert float(segs[0].data[0, 0, 0]) == np.mean([0, 1, 2, 3])
    assert float(segs[1].data[0, 0, 0]) == np.mean([4, 5, 6])


def test_segment_time_axis_weighted_mean_identity():
    rng = np.random.default_rng(11)
    nt = 10
    frames = rng.normal(size=(nt, 3, 3, 3))
    s = Series4((3, 3, 3), (1, 1, 1), nt, frames)
    for n in (1, 2, 3, 4, 7, 10):
        segs = segment_time_axis(s, n)
        base, extra = divmod(nt, n)
        lengths = [base + (1 if i < extra else 0) for i in range(n)]
        assert sum(lengths) == nt
        assert max(lengths) - min(lengths) <= 1
        recon = sum(L * seg.data for L, seg in zip(lengths, segs)) / nt
        assert np.allclose(recon, frames.mean(axis=0), atol=1e-12)


def test_segment_time_axis_identity_and_errors():
    frames = np.arange(3 * 8, dtype=np.float64).reshape(3, 2, 2, 2)
    s = Series4((2, 2, 2), (1, 1, 1), 3, frames)
    segs = segment_time_axis(s, 3)
    for i, seg in enumerate(segs):
        assert np.array_equal(seg.data, frames[i])
    with pytest.raises(ValueError):
        segment_time_axis(s, 4)
    with pytest.raises(ValueError):
        segment_time_axis(s, 0)


def test_resample_identity_when_dims_match():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(5, 6, 7))
    out = resample_trilinear(data, (5, 6, 7))
    assert np.array_equal(out, data)


def test_resample_constant_stays_constant():
    data = np.full((4, 4, 4), 0.37)
    out = resample_trilinear(data, (7, 3, 9))
    assert out.shape == (7, 3, 9)
    assert np.allclose(out, 0.37, atol=1e-12)


def test_resample_is_affine_in_values():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(6, 5, 4))
    a, b = 2.5, -0.7
    lhs = resample_trilinear(a * data + b, (9, 7, 6))
    rhs = a * resample_trilinear(data, (9, 7, 6)) + b
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_resample_preserves_range():
    rng = np.random.default_rng(4)
    data = rng.uniform(0.2, 0.8, size=(8, 8, 8))
    out = resample_trilinear(data, (5, 11, 3))
    assert out.min() >= data.min() - 1e-12
    assert out.max() <= data.max() + 1e-12
