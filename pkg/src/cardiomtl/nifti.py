"""Minimal NIfTI-1 reader/writer.

Covers exactly what ACDC-layout datasets need: single-file .nii / .nii.gz,
3D or 4D arrays, voxel sizes from pixdim, optional scl_slope/scl_inter
rescaling on read. Arrays are indexed (i, j, k[, t]) with i fastest on
disk, matching the NIfTI convention.
"""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path) -> tuple[np.ndarray, tuple[float, ...]]:
    """Read a NIfTI-1 file. Returns (array, voxel sizes per array axis)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with _open(path, "rb") as f:
        hdr = f.read(HEADER_SIZE)
        if len(hdr) < HEADER_SIZE:
            raise DataError(f"{path}: truncated NIfTI header")
        sizeof_hdr = struct.unpack_from("<i", hdr, 0)[0]
        if sizeof_hdr != HEADER_SIZE:
            raise DataError(f"{path}: not a little-endian NIfTI-1 file")
        magic = hdr[344:348]
        if magic not in (MAGIC_SINGLE, b"ni1\x00"):
            raise DataError(f"{path}: bad NIfTI magic {magic!r}")
        dim = struct.unpack_from("<8h", hdr, 40)
        ndim = dim[0]
        if not 1 <= ndim <= 4:
            raise DataError(f"{path}: unsupported dimensionality {ndim}")
        shape = tuple(int(d) for d in dim[1:1 + ndim])
        datatype = struct.unpack_from("<h", hdr, 70)[0]
        if datatype not in _DTYPES:
            raise DataError(f"{path}: unsupported NIfTI datatype code {datatype}")
        dtype = np.dtype(_DTYPES[datatype])
        pixdim = struct.unpack_from("<8f", hdr, 76)
        zooms = tuple(float(abs(p)) for p in pixdim[1:1 + ndim])
        vox_offset = int(struct.unpack_from("<f", hdr, 108)[0])
        scl_slope, scl_inter = struct.unpack_from("<2f", hdr, 112)

        f.seek(vox_offset)
        count = int(np.prod(shape))
        raw = f.read(count * dtype.itemsize)
        if len(raw) < count * dtype.itemsize:
            raise DataError(f"{path}: truncated NIfTI data section")
    data = np.frombuffer(raw, dtype=dtype).reshape(shape, order="F").copy()
    if scl_slope != 0.0 and (scl_slope != 1.0 or scl_inter != 0.0):
        data = data.astype(np.float32) * scl_slope + scl_inter
    return data, zooms


def write_nifti(path, array: np.ndarray, zooms) -> None:
    """Write an array as a single-file NIfTI-1 (.nii or .nii.gz)."""
    path = Path(path)
    array = np.asarray(array)
    if array.ndim not in (3, 4):
        raise ValueError(f"only 3D/4D arrays supported, got ndim={array.ndim}")
    if array.dtype not in _CODES:
        raise ValueError(f"unsupported dtype {array.dtype}")
    if len(zooms) != array.ndim:
        raise ValueError("zooms must have one entry per array axis")

    dim = [array.ndim, *array.shape] + [1] * (7 - array.ndim)
    pixdim = [1.0, *(float(z) for z in zooms)] + [1.0] * (7 - array.ndim)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[39] = ord("r")  # regular
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, _CODES[array.dtype])
    struct.pack_into("<h", hdr, 72, array.dtype.itemsize * 8)  # bitpix
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope/inter
    hdr[123] = 2  # xyzt_units: millimeters
    # Scaled-identity sform so orientation-aware readers get voxel sizes.
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code=0, sform_code=1
    struct.pack_into("<4f", hdr, 280, pixdim[1], 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, pixdim[2], 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, pixdim[3], 0.0)
    hdr[344:348] = MAGIC_SINGLE

    path.parent.mkdir(parents=True, exist_ok=True)
    with _open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00" * 4)  # no extensions
        f.write(array.tobytes(order="F"))
