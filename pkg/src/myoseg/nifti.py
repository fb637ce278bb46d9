"""Minimal NIfTI-1 reader/writer for single-file volumes (.nii / .nii.gz).

Covers exactly what the pipeline needs: 3D scalar images, voxel spacing from
pixdim, origin from the sform offset, and a handful of numeric dtypes.
Axis convention on the array side is (z, y, x) so that arr.tobytes() already
matches the NIfTI on-disk layout (x fastest).
"""

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348

# (name, struct format, count) in on-disk order
_FIELDS = [
    ("sizeof_hdr", "i", 1),
    ("data_type", "10s", 1),
    ("db_name", "18s", 1),
    ("extents", "i", 1),
    ("session_error", "h", 1),
    ("regular", "c", 1),
    ("dim_info", "c", 1),
    ("dim", "h", 8),
    ("intent_p1", "f", 1),
    ("intent_p2", "f", 1),
    ("intent_p3", "f", 1),
    ("intent_code", "h", 1),
    ("datatype", "h", 1),
    ("bitpix", "h", 1),
    ("slice_start", "h", 1),
    ("pixdim", "f", 8),
    ("vox_offset", "f", 1),
    ("scl_slope", "f", 1),
    ("scl_inter", "f", 1),
    ("slice_end", "h", 1),
    ("slice_code", "c", 1),
    ("xyzt_units", "c", 1),
    ("cal_max", "f", 1),
    ("cal_min", "f", 1),
    ("slice_duration", "f", 1),
    ("toffset", "f", 1),
    ("glmax", "i", 1),
    ("glmin", "i", 1),
    ("descrip", "80s", 1),
    ("aux_file", "24s", 1),
    ("qform_code", "h", 1),
    ("sform_code", "h", 1),
    ("quatern_b", "f", 1),
    ("quatern_c", "f", 1),
    ("quatern_d", "f", 1),
    ("qoffset_x", "f", 1),
    ("qoffset_y", "f", 1),
    ("qoffset_z", "f", 1),
    ("srow_x", "f", 4),
    ("srow_y", "f", 4),
    ("srow_z", "f", 4),
    ("intent_name", "16s", 1),
    ("magic", "4s", 1),
]
_HEADER_FMT = "".join(f"{n if n > 1 else ''}{f}" for _, f, n in _FIELDS)
assert struct.calcsize("<" + _HEADER_FMT) == HEADER_SIZE

# NIfTI datatype code <-> numpy dtype
_CODE_TO_DTYPE = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
}
_DTYPE_TO_CODE = {np.dtype(v): k for k, v in _CODE_TO_DTYPE.items()}


class NiftiError(ValueError):
    pass


def _parse_header(raw, byteorder):
    values = struct.unpack_from(byteorder + _HEADER_FMT, raw)
    header = {}
    i = 0
    for name, _, count in _FIELDS:
        header[name] = values[i] if count == 1 else values[i : i + count]
        i += count
    return header


def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise NiftiError(f"malformed volume (bad gzip stream): {path}") from e
    return raw


def read_nifti(path):
    """Read a 3D NIfTI-1 file.

    Returns (data, spacing, origin) where data has axis order (z, y, x) and
    spacing/origin are (z, y, x) tuples in millimeters.
    """
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"malformed volume (truncated header): {path}")
    hdr = _parse_header(raw, "<")
    byteorder = "<"
    if hdr["sizeof_hdr"] != 348:
        hdr = _parse_header(raw, ">")
        byteorder = ">"
        if hdr["sizeof_hdr"] != 348:
            raise NiftiError(f"malformed volume (bad sizeof_hdr): {path}")

    if hdr["magic"] != b"n+1\x00":
        raise NiftiError(f"malformed volume (unsupported magic {hdr['magic']!r}): {path}")

    ndim = hdr["dim"][0]
    if ndim != 3:
        raise NiftiError(f"non-3D payload (dim[0]={ndim}): {path}")
    nx, ny, nz = hdr["dim"][1:4]
    if nx <= 0 or ny <= 0 or nz <= 0:
        raise NiftiError(f"malformed volume (bad dims {hdr['dim'][1:4]}): {path}")

    if hdr["datatype"] not in _CODE_TO_DTYPE:
        raise NiftiError(
            f"malformed volume (unsupported datatype {hdr['datatype']}): {path}"
        )
    dt = np.dtype(_CODE_TO_DTYPE[hdr["datatype"]]).newbyteorder(byteorder)

    vox_offset = int(hdr["vox_offset"])
    count = nx * ny * nz
    if len(raw) < vox_offset + count * dt.itemsize:
        raise NiftiError(f"malformed volume (truncated data section): {path}")
    data = np.frombuffer(raw, dtype=dt, count=count, offset=vox_offset)
    data = data.reshape((nz, ny, nx)).astype(dt.newbyteorder("="), copy=True)

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data.astype(np.float32) * (slope if slope != 0.0 else 1.0) + inter

    pixdim = hdr["pixdim"]
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    if hdr["sform_code"] > 0:
        origin = (
            float(hdr["srow_z"][3]),
            float(hdr["srow_y"][3]),
            float(hdr["srow_x"][3]),
        )
    else:
        origin = (
            float(hdr["qoffset_z"]),
            float(hdr["qoffset_y"]),
            float(hdr["qoffset_x"]),
        )
    return data, spacing, origin


def write_nifti(path, data, spacing, origin=(0.0, 0.0, 0.0)):
    """Write a 3D array (z, y, x axis order) as a single-file NIfTI-1 volume.

    Gzip output is used when the filename ends in .gz; mtime is pinned to 0 so
    identical volumes produce identical files.
    """
    path = Path(path)
    data = np.ascontiguousarray(data)
    if data.ndim != 3:
        raise NiftiError(f"expected 3D array, got {data.ndim}D")
    if data.dtype not in _DTYPE_TO_CODE:
        raise NiftiError(f"unsupported dtype for NIfTI output: {data.dtype}")
    nz, ny, nx = data.shape
    sz, sy, sx = (float(s) for s in spacing)
    oz, oy, ox = (float(o) for o in origin)

    args = [
        348,
        b"", b"", 0, 0, b"r", b"\x00",
        3, nx, ny, nz, 1, 1, 1, 1,            # dim
        0.0, 0.0, 0.0, 0,                     # intent_p1..3, intent_code
        _DTYPE_TO_CODE[data.dtype],
        data.dtype.itemsize * 8,              # bitpix
        0,                                    # slice_start
        1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0,  # pixdim
        352.0,                                # vox_offset
        1.0, 0.0,                             # scl_slope / scl_inter
        0, b"\x00", b"\x02",                  # slice_end, slice_code, xyzt=mm
        0.0, 0.0, 0.0, 0.0, 0, 0,
        b"myoseg", b"",
        0, 1,                                 # qform_code, sform_code
        0.0, 0.0, 0.0,                        # quatern
        ox, oy, oz,                           # qoffset (informational)
        sx, 0.0, 0.0, ox,                     # srow_x
        0.0, sy, 0.0, oy,                     # srow_y
        0.0, 0.0, sz, oz,                     # srow_z
        b"", b"n+1\x00",
    ]
    header = struct.pack("<" + _HEADER_FMT, *args)
    payload = header + b"\x00\x00\x00\x00" + data.tobytes()

    path.parent.mkdir(parents=True, exist_ok=True)
    if path.name.endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)
