"""Single-file NIfTI-1 reader/writer for a restricted subset.

Supported: uncompressed .nii, 3-D, datatypes uint8 and float32, no intensity
scaling.  Spacing comes from pixdim[1..3]; the fastest-varying file axis is
the in-plane column axis, so header dims map to array shape (D, H, W)
reversed.  Orientation fields are carried through untouched via the raw
header bytes but never interpreted.
"""
from __future__ import annotations

import struct

import numpy as np

from .volumes import LabelVolume, VolumeGrid

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
DT_UINT8 = 2
DT_FLOAT32 = 16
_DTYPES = {DT_UINT8: np.uint8, DT_FLOAT32: np.float32}
_BITPIX = {DT_UINT8: 8, DT_FLOAT32: 32}


def _build_header(extents, spacing, datatype, template: bytes | None) -> bytes:
    if template is not None and len(template) >= HEADER_SIZE:
        hdr = bytearray(template[:HEADER_SIZE])
    else:
        hdr = bytearray(HEADER_SIZE)
    d, h, w = extents
    sd, sh, sw = spacing
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, w, h, d, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, _BITPIX[datatype])
    struct.pack_into("<8f", hdr, 76, 1.0, sw, sh, sd, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)   # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)   # scl_inter
    hdr[344:348] = MAGIC
    return bytes(hdr)


def _write(path: str, data: np.ndarray, datatype: int, spacing, template) -> None:
    header = _build_header(data.shape, spacing, datatype, template)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00\x00\x00\x00")   # no header extensions
        fh.write(np.ascontiguousarray(data).tobytes())


def write_volume(grid: VolumeGrid, path: str) -> None:
    """Store as float32; values must be finite and float32-representable."""
    values = grid.values
    if not np.isfinite(values).all():
        raise ValueError("volume contains NaN or infinite voxels, refusing to write")
    with np.errstate(over="ignore"):
        as32 = values.astype(np.float32)
    if not np.isfinite(as32).all():
        raise ValueError("volume values overflow 32-bit float storage")
    _write(path, as32, DT_FLOAT32, grid.spacing, grid.meta)


def write_labels(volume: LabelVolume, path: str) -> None:
    _write(path, volume.labels, DT_UINT8, volume.spacing, volume.meta)


def _parse_header(raw: bytes, path: str):
    if raw[:2] == b"\x1f\x8b":
        raise ValueError(f"{path}: gzip-compressed volumes are not supported, "
                         "decompress to a plain .nii first")
    if len(raw) < HEADER_SIZE:
        raise ValueError(f"{path}: truncated header ({len(raw)} of {HEADER_SIZE} bytes)")
    if struct.unpack_from("<i", raw, 0)[0] == HEADER_SIZE:
        bo = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        bo = ">"
    else:
        raise ValueError(f"{path}: not a NIfTI-1 file (bad sizeof_hdr)")
    magic = raw[344:348]
    if magic != MAGIC:
        detail = "two-file ni1 form is not supported" if magic[:3] == b"ni1" \
            else f"bad magic {magic!r}"
        raise ValueError(f"{path}: {detail}")
    dim = struct.unpack_from(bo + "8h", raw, 40)
    if dim[0] != 3:
        raise ValueError(f"{path}: expected a 3-D volume, header says dim[0]={dim[0]}")
    w, h, d = dim[1], dim[2], dim[3]
    if min(w, h, d) < 1:
        raise ValueError(f"{path}: non-positive extents {(d, h, w)}")
    datatype = struct.unpack_from(bo + "h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise ValueError(f"{path}: unsupported datatype code {datatype} "
                         f"(supported: {sorted(_DTYPES)})")
    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    sw, sh, sd = pixdim[1], pixdim[2], pixdim[3]
    if min(sw, sh, sd) <= 0:
        raise ValueError(f"{path}: non-positive spacing {(sd, sh, sw)}")
    vox_offset = int(struct.unpack_from(bo + "f", raw, 108)[0])
    if vox_offset < HEADER_SIZE + 4:
        raise ValueError(f"{path}: vox_offset {vox_offset} overlaps the header")
    slope, inter = struct.unpack_from(bo + "2f", raw, 112)
    if slope not in (0.0, 1.0) or inter != 0.0:
        raise ValueError(f"{path}: intensity scaling (slope={slope}, inter={inter}) "
                         "is not supported")
    # big-endian headers are not carried as templates; a rewrite regenerates
    # a canonical little-endian header instead
    meta = raw[:HEADER_SIZE] if bo == "<" else None
    return bo, (d, h, w), (sd, sh, sw), datatype, vox_offset, meta


def _read(path: str):
    with open(path, "rb") as fh:
        raw = fh.read(VOX_OFFSET)
        bo, extents, spacing, datatype, vox_offset, meta = _parse_header(raw, path)
        fh.seek(vox_offset)
        dtype = np.dtype(_DTYPES[datatype]).newbyteorder(bo)
        need = int(np.prod(extents)) * dtype.itemsize
        buf = fh.read(need)
    if len(buf) < need:
        raise ValueError(f"{path}: truncated data section "
                         f"({len(buf)} of {need} bytes present)")
    data = np.frombuffer(buf, dtype=dtype).reshape(extents)
    return data, spacing, datatype, meta


def read_volume(path: str) -> VolumeGrid:
    data, spacing, datatype, meta = _read(path)
    values = data.astype(np.float64)
    if datatype == DT_FLOAT32 and not np.isfinite(values).all():
        raise ValueError(f"{path}: volume contains NaN or infinite voxels")
    return VolumeGrid(values=values, spacing=spacing, meta=meta)


def read_labels(path: str) -> LabelVolume:
    data, spacing, datatype, meta = _read(path)
    if datatype != DT_UINT8:
        raise ValueError(f"{path}: label volumes must be stored as uint8, "
                         f"found datatype code {datatype}")
    return LabelVolume(labels=data, spacing=spacing, meta=meta)
