"""Synthetic paired-modality phantom volumes.

Each phantom subject is an ellipsoidal "brain" with K blob regions. The
functional-like volume is a smooth base field plus per-region activation
offsets; the diffusion-like volume applies a distinct nonlinear intensity
transform to the same anatomy plus its own offsets. Offsets of the two
modalities are positively correlated for class NC and anti-correlated for
MCI/AD. Everything is a pure function of (seed, config), evaluated from
continuous coordinate fields so the two modalities may use different grids.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .config import DataError, PhantomCmdConfig
from .nifti import load_nifti, save_nifti
from .volume import AtlasMask, ModalityPair, Volume3

INDEX_NAME = "index.json"
_INDEX_FORMAT = "pds-phantom-index"

SUPPORT_RADII = (0.82, 0.72, 0.78)
_CLASS_RHO = {"NC": 0.85, "MCI": -0.55, "AD": -0.9}
_SPACING = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 32, 32)
    dims_d: tuple[int, int, int] | None = None
    k_regions: int = 8
    class_tag: str = "NC"
    offset_scale: float = 0.15
    seed: int = 0  # region-layout (atlas geometry) seed

    _KEYS = ("dims", "dims_d", "k_regions", "class_tag", "offset_scale", "seed")

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomConfig":
        unknown = set(doc) - set(cls._KEYS)
        if unknown:
            raise ValueError(f"unknown phantom config keys {sorted(unknown)}")
        doc = dict(doc)
        for key in ("dims", "dims_d"):
            if doc.get(key) is not None:
                doc[key] = tuple(int(v) for v in doc[key])
        return cls(**doc)

    def __post_init__(self):
        if _CLASS_RHO.get(self.class_tag) is None:
            raise ValueError(f"unknown class_tag {self.class_tag!r}")
        if self.k_regions < 1:
            raise ValueError("k_regions must be >= 1")
        if self.offset_scale < 0:
            raise ValueError("offset_scale must be >= 0")


def _coords(dims) -> list[np.ndarray]:
    """Cell-centered normalized coordinates in [-1, 1] per axis."""
    return [((np.arange(n) + 0.5) / n * 2.0 - 1.0) for n in dims]


def _support(dims) -> np.ndarray:
    ax = _coords(dims)
    u, v, w = np.meshgrid(*ax, indexing="ij")
    rx, ry, rz = SUPPORT_RADII
    return (u / rx) ** 2 + (v / ry) ** 2 + (w / rz) ** 2 <= 1.0


def _gauss_field(dims, centers, widths, amps) -> np.ndarray:
    ax = _coords(dims)
    u, v, w = np.meshgrid(*ax, indexing="ij")
    field = np.zeros(dims)
    for c, s, a in zip(centers, widths, amps):
        r2 = (u - c[0]) ** 2 + (v - c[1]) ** 2 + (w - c[2]) ** 2
        field += a * np.exp(-r2 / (2.0 * s * s))
    return field


def _points_in_support(rng: np.random.Generator, k: int, shrink: float) -> np.ndarray:
    """k points uniform inside the (shrunk) support ellipsoid."""
    radii = np.array(SUPPORT_RADII) * shrink
    pts = []
    while len(pts) < k:
        cand = rng.uniform(-1.0, 1.0, size=(4 * k, 3)) * radii
        keep = ((cand / radii) ** 2).sum(axis=1) <= 1.0
        pts.extend(cand[keep])
    return np.array(pts[:k])


def region_centers(cfg: PhantomConfig) -> np.ndarray:
    """Blob-region seed points in normalized coordinates, from cfg.seed."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101]))
    return _points_in_support(rng, cfg.k_regions, shrink=0.72)


def _label_grid(dims, centers) -> np.ndarray:
    ax = _coords(dims)
    u, v, w = np.meshgrid(*ax, indexing="ij")
    pts = np.stack([u, v, w], axis=-1)  # (nx, ny, nz, 3)
    d2 = ((pts[..., None, :] - centers) ** 2).sum(axis=-1)
    labels = np.where(_support(dims), d2.argmin(axis=-1) + 1, 0)
    return labels.astype(np.int32)


def _make_masks(cfg: PhantomConfig, dims_f, dims_d):
    """Shared blob layout labeled on each modality grid; every region non-empty."""
    for attempt in range(32):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101, attempt]))
        centers = (region_centers(cfg) if attempt == 0
                   else _points_in_support(rng, cfg.k_regions, shrink=0.72))
        lab_f = _label_grid(dims_f, centers)
        lab_d = _label_grid(dims_d, centers)
        ok = all(np.any(lab_f == r) and np.any(lab_d == r)
                 for r in range(1, cfg.k_regions + 1))
        if ok:
            return AtlasMask(dims_f, lab_f), AtlasMask(dims_d, lab_d)
    raise ValueError(f"could not place {cfg.k_regions} non-empty regions at dims {dims_f}/{dims_d}")


def region_offsets(seed: int, cfg: PhantomConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-region intensity offsets (off_f, off_d) for one subject.

    Correlation across regions between the two offset vectors is positive
    for NC and negative for MCI/AD, with magnitude set by class.
    """
    rho = _CLASS_RHO[cfg.class_tag]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    off_f = rng.normal(0.0, cfg.offset_scale, size=cfg.k_regions)
    noise = rng.normal(0.0, cfg.offset_scale, size=cfg.k_regions)
    off_d = rho * off_f + np.sqrt(1.0 - rho * rho) * noise
    return off_f, off_d


def _anatomy_params(seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    base_centers = _points_in_support(rng, 6, shrink=0.9)
    base_widths = rng.uniform(0.35, 0.7, size=6)
    base_amps = rng.uniform(-1.0, 1.0, size=6)
    tex_centers = _points_in_support(rng, 12, shrink=0.95)
    tex_widths = rng.uniform(0.12, 0.3, size=12)
    tex_amps = rng.uniform(-1.0, 1.0, size=12)
    return (base_centers, base_widths, base_amps), (tex_centers, tex_widths, tex_amps)


def _render(dims, base_p, tex_p, labels, offsets, flavor: str) -> np.ndarray:
    base = 0.5 * (1.0 + np.tanh(_gauss_field(dims, *base_p)))  # in (0, 1)
    tex = np.tanh(_gauss_field(dims, *tex_p))
    off = np.zeros(dims)
    for r, o in enumerate(offsets, start=1):
        off[labels == r] = o
    if flavor == "f":
        vol = 0.25 + 0.5 * base + off + 0.05 * tex
    else:
        vol = 0.15 + 0.62 * (1.0 - base) ** 1.7 + off + 0.05 * tex
    vol = np.clip(vol, 0.02, 1.0)
    return np.where(labels > 0, vol, 0.0)


def make_phantom_pair(seed: int, cfg: PhantomConfig) -> tuple[ModalityPair, AtlasMask, AtlasMask]:
    """Generate one subject's paired volumes and the two region masks.

    Pure function of (seed, cfg): seed drives anatomy and offsets, cfg.seed
    drives the blob-region layout shared by both masks.
    """
    dims_f = tuple(cfg.dims)
    dims_d = tuple(cfg.dims_d) if cfg.dims_d is not None else dims_f
    mask_f, mask_d = _make_masks(cfg, dims_f, dims_d)
    base_p, tex_p = _anatomy_params(seed)
    off_f, off_d = region_offsets(seed, cfg)
    f_data = _render(dims_f, base_p, tex_p, mask_f.labels, off_f, "f")
    d_data = _render(dims_d, base_p, tex_p, mask_d.labels, off_d, "d")
    pair = ModalityPair(
        f_vol=Volume3(dims_f, _SPACING, f_data),
        d_vol=Volume3(dims_d, _SPACING, d_data),
        subject_id=f"subj-{seed}",
        class_tag=cfg.class_tag,
    )
    return pair, mask_f, mask_d

def _atomic_json(path: str, doc: dict) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(cfg: PhantomCmdConfig) -> dict:
    """Render every planned subject to NIfTI files plus an index document.

    Layout: <out_dir>/subj-<seed>_f.nii and _d.nii per subject, one shared
    mask per modality grid, and index.json tying them together with the
    parameters needed to regenerate the set.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    dims_f = tuple(cfg.dims)
    dims_d = tuple(cfg.dims_d) if cfg.dims_d is not None else dims_f
    subjects = []
    mask_written = False
    for tag, sseed in cfg.subject_plan():
        pcfg = PhantomConfig(dims=dims_f, dims_d=cfg.dims_d, k_regions=cfg.k_regions,
                             class_tag=tag, offset_scale=cfg.offset_scale, seed=cfg.seed)
        pair, mask_f, mask_d = make_phantom_pair(sseed, pcfg)
        if not mask_written:
            save_nifti(Volume3(dims_f, _SPACING, mask_f.labels.astype(np.float64)),
                       os.path.join(cfg.out_dir, "mask_f.nii"))
            save_nifti(Volume3(dims_d, _SPACING, mask_d.labels.astype(np.float64)),
                       os.path.join(cfg.out_dir, "mask_d.nii"))
            mask_written = True
        f_name = f"{pair.subject_id}_f.nii"
        d_name = f"{pair.subject_id}_d.nii"
        save_nifti(pair.f_vol, os.path.join(cfg.out_dir, f_name))
        save_nifti(pair.d_vol, os.path.join(cfg.out_dir, d_name))
        subjects.append({"id": pair.subject_id, "seed": sseed,
                         "class_tag": tag, "f": f_name, "d": d_name})
    index = {
        "format": _INDEX_FORMAT,
        "version": 1,
        "atlas_seed": cfg.seed,
        "dims": list(dims_f),
        "dims_d": list(dims_d),
        "k_regions": cfg.k_regions,
        "offset_scale": cfg.offset_scale,
        "subjects": subjects,
        "masks": {"f": "mask_f.nii", "d": "mask_d.nii"},
    }
    _atomic_json(os.path.join(cfg.out_dir, INDEX_NAME), index)
    return index


def _load_mask(path: str, dims) -> AtlasMask:
    vol = load_nifti(path)
    if not isinstance(vol, Volume3):
        raise DataError(f"mask file {path} is not a 3D volume")
    labels = np.rint(vol.data).astype(np.int32)
    if vol.dims != tuple(dims):
        raise DataError(f"mask dims {vol.dims} do not match index dims {tuple(dims)}")
    return AtlasMask(vol.dims, labels)


def load_dataset(data_dir: str):
    """(pairs, (mask_f, mask_d), index) from a directory written by
    write_dataset. Raises DataError on a missing or malformed index."""
    index_path = os.path.join(data_dir, INDEX_NAME)
    if not os.path.exists(index_path):
        raise DataError(f"no {INDEX_NAME} in {data_dir}")
    try:
        with open(index_path) as fh:
            index = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"unreadable dataset index {index_path}: {exc}") from exc
    if index.get("format") != _INDEX_FORMAT:
        raise DataError(f"{index_path} is not a phantom dataset index")
    if index.get("version") != 1:
        raise DataError(f"unsupported dataset index version {index.get('version')!r}")
    for key in ("dims", "dims_d", "subjects", "masks"):
        if key not in index:
            raise DataError(f"dataset index missing key {key!r}")
    mask_f = _load_mask(os.path.join(data_dir, index["masks"]["f"]), index["dims"])
    mask_d = _load_mask(os.path.join(data_dir, index["masks"]["d"]), index["dims_d"])
    pairs = []
    for sub in index["subjects"]:
        f_vol = load_nifti(os.path.join(data_dir, sub["f"]))
        d_vol = load_nifti(os.path.join(data_dir, sub["d"]))
        if not isinstance(f_vol, Volume3) or not isinstance(d_vol, Volume3):
            raise DataError(f"subject {sub['id']} volumes are not 3D")
        if f_vol.dims != tuple(index["dims"]) or d_vol.dims != tuple(index["dims_d"]):
            raise DataError(f"subject {sub['id']} volume dims disagree with the index")
        pairs.append(ModalityPair(f_vol=f_vol, d_vol=d_vol,
                                  subject_id=sub["id"], class_tag=sub["class_tag"]))
    if not pairs:
        raise DataError("dataset index lists no subjects")
    return pairs, (mask_f, mask_d), index
