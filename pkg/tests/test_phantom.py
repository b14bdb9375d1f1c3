from __future__ import annotations

import numpy as np
import pytest

from pds import PhantomConfig, make_phantom_pair
from pds.config import DataError, PhantomCmdConfig
from pds.phantom import load_dataset, region_offsets, write_dataset


def test_pair_is_deterministic():
    cfg = PhantomConfig(dims=(12, 12, 12), k_regions=4)
    a, mf_a, md_a = make_phantom_pair(3, cfg)
    b, mf_b, md_b = make_phantom_pair(3, cfg)
    assert np.array_equal(a.f_vol.data, b.f_vol.data)
    assert np.array_equal(a.d_vol.data, b.d_vol.data)
    assert np.array_equal(mf_a.labels, mf_b.labels)
    assert np.array_equal(md_a.labels, md_b.labels)


def test_different_subjects_differ():
    cfg = PhantomConfig(dims=(12, 12, 12), k_regions=4)
    a, _, _ = make_phantom_pair(0, cfg)
    b, _, _ = make_phantom_pair(1, cfg)
    assert not np.array_equal(a.f_vol.data, b.f_vol.data)


def test_background_is_zero_and_values_bounded():
    cfg = PhantomConfig(dims=(16, 16, 16), k_regions=5)
    pair, mask_f, mask_d = make_phantom_pair(2, cfg)
    bg_f = mask_f.labels == 0
    bg_d = mask_d.labels == 0
    assert np.all(pair.f_vol.data[bg_f] == 0.0)
    assert np.all(pair.d_vol.data[bg_d] == 0.0)
    assert pair.f_vol.data.min() >= 0.0 and pair.f_vol.data.max() <= 1.0
    assert pair.d_vol.data.min() >= 0.0 and pair.d_vol.data.max() <= 1.0
    # foreground is strictly positive (clip floor is 0.02)
    assert pair.f_vol.data[~bg_f].min() >= 0.02


def test_masks_cover_every_region():
    cfg = PhantomConfig(dims=(10, 10, 10), dims_d=(8, 8, 8), k_regions=6)
    _, mask_f, mask_d = make_phantom_pair(0, cfg)
    assert mask_f.dims == (10, 10, 10)
    assert mask_d.dims == (8, 8, 8)
    assert mask_f.n_regions == 6 and mask_d.n_regions == 6
    for r in range(1, 7):
        assert np.any(mask_f.labels == r)
        assert np.any(mask_d.labels == r)


def test_offset_correlation_tracks_class():
    cfg_nc = PhantomConfig(k_regions=16, class_tag="NC")
    cfg_ad = PhantomConfig(k_regions=16, class_tag="AD")
    corr_nc = []
    corr_ad = []
    for seed in range(10):
        f, d = region_offsets(seed, cfg_nc)
        corr_nc.append(np.corrcoef(f, d)[0, 1])
        f, d = region_offsets(seed, cfg_ad)
        corr_ad.append(np.corrcoef(f, d)[0, 1])
    assert np.mean(corr_nc) > 0.5
    assert np.mean(corr_ad) < -0.5


def test_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(class_tag="XX")
    with pytest.raises(ValueError):
        PhantomConfig(k_regions=0)
    with pytest.raises(ValueError):
        PhantomConfig(offset_scale=-0.1)
    with pytest.raises(ValueError):
        PhantomConfig.from_dict({"dims": [8, 8, 8], "bogus": 1})


def test_write_dataset_layout(tmp_path):
    cfg = PhantomCmdConfig(out_dir=str(tmp_path), n_subjects=4, dims=(8, 8, 8),
                           k_regions=3, seed=5)
    index = write_dataset(cfg)
    nii = sorted(p.name for p in tmp_path.glob("*.nii"))
    # 2 files per subject + 2 masks
    assert len(nii) == 10
    assert "mask_f.nii" in nii and "mask_d.nii" in nii
    assert (tmp_path / "index.json").exists()
    assert len(index["subjects"]) == 4
    assert [s["seed"] for s in index["subjects"]] == [5, 6, 7, 8]
    assert all(s["class_tag"] == "NC" for s in index["subjects"])


def test_write_dataset_class_mix(tmp_path):
    cfg = PhantomCmdConfig.from_dict({
        "out_dir": str(tmp_path), "dims": [8, 8, 8], "k_regions": 3,
        "class_mix": {"NC": 2, "AD": 1}})
    index = write_dataset(cfg)
    tags = [s["class_tag"] for s in index["subjects"]]
    assert tags == ["NC", "NC", "AD"]


def test_write_then_load_round_trip(tmp_path):
    cfg = PhantomCmdConfig(out_dir=str(tmp_path), n_subjects=2, dims=(8, 8, 8),
                           dims_d=(6, 6, 6), k_regions=3, seed=1)
    write_dataset(cfg)
    pairs, (mask_f, mask_d), index = load_dataset(str(tmp_path))
    assert len(pairs) == 2
    assert pairs[0].f_vol.dims == (8, 8, 8)
    assert pairs[0].d_vol.dims == (6, 6, 6)
    assert mask_f.dims == (8, 8, 8) and mask_d.dims == (6, 6, 6)
    assert mask_f.n_regions == 3
    # values survive the f32 payload round trip
    fresh, wf, _ = make_phantom_pair(1, PhantomConfig(dims=(8, 8, 8), dims_d=(6, 6, 6),
                                                      k_regions=3, seed=1))
    assert np.array_equal(pairs[0].f_vol.data,
                          fresh.f_vol.data.astype(np.float32).astype(np.float64))
    assert np.array_equal(mask_f.labels, wf.labels)


def test_write_dataset_is_deterministic(tmp_path):
    cfg_a = PhantomCmdConfig(out_dir=str(tmp_path / "a"), n_subjects=2,
                             dims=(8, 8, 8), k_regions=3, seed=2)
    cfg_b = PhantomCmdConfig(out_dir=str(tmp_path / "b"), n_subjects=2,
                             dims=(8, 8, 8), k_regions=3, seed=2)
    write_dataset(cfg_a)
    write_dataset(cfg_b)
    for name in ("subj-2_f.nii", "subj-3_d.nii", "mask_f.nii"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_load_dataset_errors(tmp_path):
    with pytest.raises(DataError, match="index.json"):
        load_dataset(str(tmp_path))
    (tmp_path / "index.json").write_text("not json")
    with pytest.raises(DataError, match="unreadable"):
        load_dataset(str(tmp_path))
    (tmp_path / "index.json").write_text('{"format": "other"}')
    with pytest.raises(DataError, match="not a phantom dataset"):
        load_dataset(str(tmp_path))
    (tmp_path / "index.json").write_text('{"format": "pds-phantom-index", "version": 9}')
    with pytest.raises(DataError, match="version"):
        load_dataset(str(tmp_path))
