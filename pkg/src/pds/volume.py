"""Voxel containers and basic volume operations.

Scalar 3D volumes, 4D time/gradient series, integer region masks, and the
paired-modality record used by the synthesis pipeline. All containers are
immutable after construction and carry float64 data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

CLASS_TAGS = ("NC", "MCI", "AD")


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.setflags(write=False)
    return out


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 0 for d in dims):
        raise ValueError(f"bad volume dims {dims}")
    return dims


@dataclass(frozen=True, eq=False)
class Volume3:
    """A scalar 3D grid with isotropic-or-not voxel spacing in mm.

    data is float64, shape (nx, ny, nz), x fastest when linearized in
    Fortran order (the on-disk layout). Values must be finite.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        dims = _check_dims(self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"bad spacing {spacing}")
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != dims:
            raise ValueError(f"data shape {data.shape} does not match dims {dims}")
        if data.size and not np.isfinite(data).all():
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "data", _freeze(data))

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def with_data(self, data: np.ndarray) -> "Volume3":
        """Same geometry, new values."""
        return Volume3(self.dims, self.spacing, data)


@dataclass(frozen=True, eq=False)
class Series4:
    """A 4D series: nt frames on a shared 3D grid.

    Covers both time series (frame axis = time) and gradient-volume stacks
    (frame axis = acquisition); downstream code treats the axis uniformly.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    nt: int
    frames: np.ndarray  # (nt, nx, ny, nz)

    def __post_init__(self):
        dims = _check_dims(self.dims)
        nt = int(self.nt)
        if nt < 1:
            raise ValueError(f"bad frame count {nt}")
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.shape != (nt,) + dims:
            raise ValueError(f"frames shape {frames.shape} does not match (nt, dims)")
        if frames.size and not np.isfinite(frames).all():
            raise ValueError("series contains non-finite values")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "nt", nt)
        object.__setattr__(self, "frames", _freeze(frames))

    def frame(self, i: int) -> Volume3:
        return Volume3(self.dims, self.spacing, self.frames[i])


@dataclass(frozen=True, eq=False)
class AtlasMask:
    """Integer region labels on a 3D grid.

    Label 0 is background; labels 1..n_regions are region ids and every
    declared region is non-empty.
    """

    dims: tuple[int, int, int]
    labels: np.ndarray

    def __post_init__(self):
        dims = _check_dims(self.dims)
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("mask labels must be integers")
        labels = labels.astype(np.int32)
        if labels.shape != dims:
            raise ValueError(f"labels shape {labels.shape} does not match dims {dims}")
        if labels.size and labels.min() < 0:
            raise ValueError("mask labels must be >= 0")
        k = int(labels.max()) if labels.size else 0
        present = np.unique(labels)
        missing = [r for r in range(1, k + 1) if r not in present]
        if missing:
            raise ValueError(f"empty region ids {missing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def n_regions(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def binary(self) -> np.ndarray:
        """Foreground support as float64 0/1."""
        return (self.labels > 0).astype(np.float64)


@dataclass(frozen=True, eq=False)
class ModalityPair:
    """One subject's paired volumes: functional-like f and diffusion-like d.

    Dims may differ between the two modalities.
    """

    f_vol: Volume3
    d_vol: Volume3
    subject_id: str
    class_tag: str

    def __post_init__(self):
        if self.class_tag not in CLASS_TAGS:
            raise ValueError(f"class_tag must be one of {CLASS_TAGS}")


def normalize(vol: Volume3) -> Volume3:
    """Affinely map values onto [0, 1]; a constant volume maps to zeros."""
    if vol.data.size == 0:
        return vol
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    if hi == lo:
        return vol.with_data(np.zeros(vol.dims))
    return vol.with_data((vol.data - lo) / (hi - lo))


def segment_time_axis(series: Series4, n_segments: int) -> list[Volume3]:
    """Split the frame axis into n_segments runs and average each run.

    Runs differ in length by at most one frame, longer runs first. The
    weighted mean of the outputs reproduces the global frame mean.
    """
    n_segments = int(n_segments)
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    if n_segments > series.nt:
        raise ValueError(f"n_segments {n_segments} exceeds frame count {series.nt}")
    base, extra = divmod(series.nt, n_segments)
    out = []
    start = 0
    for i in range(n_segments):
        run = base + (1 if i < extra else 0)
        mean = series.frames[start:start + run].mean(axis=0)
        out.append(Volume3(series.dims, series.spacing, mean))
        start += run
    return out


def resample_trilinear(data: np.ndarray, target_dims) -> np.ndarray:
    """Resample a 3D array onto target_dims with cell-centered trilinear
    interpolation (edge clamped). Identity when dims already match."""
    target_dims = _check_dims(target_dims)
    data = np.asarray(data, dtype=np.float64)
    if data.shape == target_dims:
        return data
    axes = []
    for n_src, n_tgt in zip(data.shape, target_dims):
        axes.append((np.arange(n_tgt) + 0.5) * (n_src / n_tgt) - 0.5)
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.reshape(-1) for g in grid])
    out = ndimage.map_coordinates(data, coords, order=1, mode="nearest")
    return out.reshape(target_dims)
