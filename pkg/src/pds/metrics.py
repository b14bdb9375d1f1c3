"""Volume quality metrics: PSNR, windowed 3D SSIM, per-region L1.

SSIM uses a 7-cubed Gaussian window (sigma 1.5) with the local map cropped
to fully-interior voxels; volumes smaller than the window fall back to a
single global window. Constants follow (0.01 L)^2 and (0.03 L)^2 with L=1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .volume import AtlasMask, Volume3


def _unwrap(x) -> np.ndarray:
    arr = x.data if isinstance(x, Volume3) else np.asarray(x)
    return np.asarray(arr, dtype=np.float64)


def _check_same_dims(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"volume dims differ: {a.shape} vs {b.shape}")


def psnr(a, b, peak: float = 1.0) -> float:
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    x = _unwrap(a)
    y = _unwrap(b)
    _check_same_dims(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gauss1d(window: int, sigma: float) -> np.ndarray:
    offsets = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    k = np.exp(-(offsets * offsets) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = arr
    for axis in range(arr.ndim):
        out = correlate1d(out, kernel, axis=axis, mode="nearest")
    return out


def ssim(a, b, window: int = 7, sigma: float = 1.5,
         c1: float = 1e-4, c2: float = 9e-4) -> float:
    x = _unwrap(a)
    y = _unwrap(b)
    _check_same_dims(x, y)
    if min(x.shape) < window:
        mu_x = x.mean()
        mu_y = y.mean()
        e_xx = (x * x).mean()
        e_yy = (y * y).mean()
        e_xy = (x * y).mean()
    else:
        kernel = _gauss1d(window, sigma)
        mu_x = _blur(x, kernel)
        mu_y = _blur(y, kernel)
        e_xx = _blur(x * x, kernel)
        e_yy = _blur(y * y, kernel)
        e_xy = _blur(x * y, kernel)
    var_x = e_xx - mu_x * mu_x
    var_y = e_yy - mu_y * mu_y
    cov = e_xy - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    smap = num / den
    if isinstance(smap, np.ndarray):
        m = window // 2
        value = float(smap[m:-m, m:-m, m:-m].mean())
    else:
        value = float(smap)
    return min(1.0, max(-1.0, value))


def region_l1(a, b, mask) -> dict[int, float]:
    """Mean absolute error per foreground region id; label 0 is background.

    Ids declared by the mask but covering no voxels are omitted with a
    warning (only possible for raw label arrays).
    """
    x = _unwrap(a)
    y = _unwrap(b)
    _check_same_dims(x, y)
    labels = mask.labels if isinstance(mask, AtlasMask) else np.asarray(mask)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("mask labels must be integers")
    if labels.shape != x.shape:
        raise ValueError(f"mask dims {labels.shape} do not match volume dims {x.shape}")
    diff = np.abs(x - y)
    out: dict[int, float] = {}
    top = int(labels.max()) if labels.size else 0
    for region in range(1, top + 1):
        sel = labels == region
        if not sel.any():
            warnings.warn(f"region {region} has no voxels; omitted from region_l1")
            continue
        out[region] = float(diff[sel].mean())
    return out


@dataclass
class QualityReport:
    psnr_db: float
    ssim: float
    ssim_percent: float
    region_l1: dict[int, float] | None
    dims: tuple[int, int, int]
    metadata: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "psnr_db": "inf" if math.isinf(self.psnr_db) else self.psnr_db,
            "ssim": self.ssim,
            "ssim_percent": self.ssim_percent,
            "region_l1": (None if self.region_l1 is None
                          else {str(k): v for k, v in self.region_l1.items()}),
            "dims": list(self.dims),
        }


def build_quality_report(gen, ref, mask=None) -> QualityReport:
    x = _unwrap(gen)
    p = psnr(gen, ref)
    s = ssim(gen, ref)
    return QualityReport(
        psnr_db=p,
        ssim=s,
        ssim_percent=100.0 * s,
        region_l1=None if mask is None else region_l1(gen, ref, mask),
        dims=tuple(int(d) for d in x.shape),
    )
