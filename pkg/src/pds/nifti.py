"""Single-file NIfTI-1 reader and writer.

Covers the subset the pipeline needs: .nii single-file form (magic "n+1"),
3D volumes and 4D series, scalar datatypes uint8/int16/int32/float32/float64
on read, float32 little-endian on write, scl_slope/scl_inter applied on load.
Both byte orders are read; order is detected from sizeof_hdr.
"""

from __future__ import annotations

import os

import numpy as np

from .volume import Series4, Volume3

HEADER_SIZE = 348
VOX_OFFSET = 352.0
# numpy S4 scalars drop trailing NULs, so the on-disk "n+1\0" reads back as b"n+1"
MAGIC_SINGLE = b"n+1"
MAGIC_PAIR = b"ni1"

# NIfTI-1 datatype codes this reader accepts.
DTYPE_CODES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}

_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", 8),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", 8),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", 4),
    ("srow_y", "f4", 4),
    ("srow_z", "f4", 4),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def _header_dtype(byteorder: str) -> np.dtype:
    return np.dtype([(f[0], byteorder + f[1], f[2]) if len(f) == 3
                     else (f[0], byteorder + f[1]) for f in _HEADER_FIELDS])


class NiftiParseError(ValueError):
    """Malformed or unsupported NIfTI input; names the offending field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def load_nifti(path: str) -> Volume3 | Series4:
    """Read a single-file NIfTI-1 volume or series."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise NiftiParseError("sizeof_hdr", f"file shorter than header ({len(raw)} bytes)")

    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_header_dtype("<"))[0]
    byteorder = "<"
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        hdr_be = np.frombuffer(raw[:HEADER_SIZE], dtype=_header_dtype(">"))[0]
        if int(hdr_be["sizeof_hdr"]) != HEADER_SIZE:
            raise NiftiParseError("sizeof_hdr", f"bad value {int(hdr['sizeof_hdr'])}")
        hdr, byteorder = hdr_be, ">"

    magic = bytes(hdr["magic"])
    if magic == MAGIC_PAIR:
        raise NiftiParseError("magic", "two-file NIfTI (hdr/img) is not supported")
    if magic != MAGIC_SINGLE:
        raise NiftiParseError("magic", f"bad magic {magic!r}")

    code = int(hdr["datatype"])
    if code not in DTYPE_CODES:
        raise NiftiParseError("datatype", f"unsupported datatype code {code}")
    dt = np.dtype(DTYPE_CODES[code]).newbyteorder(byteorder)
    if int(hdr["bitpix"]) != dt.itemsize * 8:
        raise NiftiParseError("bitpix", f"{int(hdr['bitpix'])} does not match datatype code {code}")

    ndim = int(hdr["dim"][0])
    if ndim < 1 or ndim > 4:
        raise NiftiParseError("dim", f"unsupported dimension count {ndim}")
    shape = [int(d) for d in hdr["dim"][1:1 + ndim]]
    if any(d < 1 for d in shape):
        raise NiftiParseError("dim", f"non-positive extent in {shape}")
    dims = tuple(shape[:3]) + (1,) * (3 - min(ndim, 3))
    nt = shape[3] if ndim == 4 else 1

    pixdim = [float(p) for p in hdr["pixdim"][1:4]]
    pixdim = [p if p > 0 else None for p in pixdim]
    if any(p is None for p in pixdim):
        raise NiftiParseError("pixdim", f"non-positive voxel size in {hdr['pixdim'][1:4]}")

    offset = float(hdr["vox_offset"])
    if offset < VOX_OFFSET:
        raise NiftiParseError("vox_offset", f"{offset} below minimum {VOX_OFFSET}")
    offset = int(offset)

    count = int(np.prod(dims)) * nt
    need = count * dt.itemsize
    if len(raw) < offset + need:
        raise NiftiParseError("vox_offset", f"payload truncated ({len(raw) - offset} of {need} bytes)")

    flat = np.frombuffer(raw, dtype=dt, count=count, offset=offset)
    data = flat.reshape(dims + (nt,), order="F").astype(np.float64)

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope != 0.0 and (slope, inter) != (1.0, 0.0):
        data = data * slope + inter

    spacing = tuple(pixdim)
    if ndim == 4:
        return Series4(dims, spacing, nt, np.moveaxis(data, 3, 0))
    return Volume3(dims, spacing, data[:, :, :, 0])


def save_nifti(vol: Volume3 | Series4, path: str) -> None:
    """Write as single-file NIfTI-1, float32 little-endian payload."""
    if isinstance(vol, Series4):
        dims, spacing, nt = vol.dims, vol.spacing, vol.nt
        data = np.moveaxis(vol.frames, 0, 3)
        ndim, dim4 = 4, nt
    else:
        dims, spacing = vol.dims, vol.spacing
        data = vol.data
        ndim, dim4 = 3, 1
    if int(np.prod(dims)) * dim4 == 0:
        raise ValueError("refusing to save zero-voxel volume")
    if data.size and np.abs(data).max() > np.finfo(np.float32).max:
        raise ValueError("values exceed float32 range")

    hdr = np.zeros((), dtype=_header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [ndim, dims[0], dims[1], dims[2], dim4, 1, 1, 1]
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    hdr["pixdim"] = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 0, 0, 0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 10  # mm | sec
    hdr["descrip"] = b"pds volume"
    hdr["sform_code"] = 1
    hdr["srow_x"] = [spacing[0], 0, 0, 0]
    hdr["srow_y"] = [0, spacing[1], 0, 0]
    hdr["srow_z"] = [0, 0, spacing[2], 0]
    hdr["magic"] = MAGIC_SINGLE

    payload = np.asfortranarray(data.astype("<f4"))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00\x00\x00\x00")  # no header extensions
        fh.write(payload.tobytes(order="F"))
    os.replace(tmp, path)
