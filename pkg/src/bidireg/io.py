"""File formats: raw+JSON volumes and fields, minimal NIfTI-1, landmark
CSV, and the run manifest.

Raw streams are little-endian float32 with x fastest; the JSON sidecar
carries dims/spacing. The NIfTI-1 support is deliberately minimal:
uncompressed single-file .nii, float32 or int16, no orientation handling;
anything else raises UnsupportedFormatError.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .field import DisplacementField
from .metrics import LandmarkSet
from .volume import Volume


class UnsupportedFormatError(ValueError):
    """File is not in one of the supported minimal formats."""


# ---------------------------------------------------------------- raw+JSON

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def write_volume_raw(vol: Volume, path):
    path = Path(path)
    vol.data.ravel(order="F").astype("<f4").tofile(path)
    meta = {"dims": list(vol.dims), "spacing": list(vol.spacing),
            "order": "xyz", "dtype": "float32"}
    _sidecar(path).write_text(json.dumps(meta, indent=1))


def read_volume_raw(path) -> Volume:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    if meta.get("order") != "xyz":
        raise UnsupportedFormatError(f"unsupported raw order {meta.get('order')!r}")
    dims = tuple(meta["dims"])
    if meta.get("components", 1) != 1:
        raise UnsupportedFormatError("raw file holds a vector field, not a volume")
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise UnsupportedFormatError(
            f"raw stream has {data.size} values, sidecar dims imply {np.prod(dims)}")
    return Volume(data.reshape(dims, order="F").astype(np.float64),
                  tuple(meta["spacing"]))


def write_field_raw(field: DisplacementField, path):
    """Interleaved (dx, dy, dz) per voxel, x fastest, voxel units."""
    path = Path(path)
    m = np.moveaxis(field.data, 0, -1)          # (nx, ny, nz, 3)
    stream = m.transpose(2, 1, 0, 3).ravel()    # x fastest, 3 floats per voxel
    stream.astype("<f4").tofile(path)
    meta = {"dims": list(field.dims), "spacing": list(field.spacing),
            "order": "xyz", "dtype": "float32", "components": 3,
            "units": "voxel"}
    _sidecar(path).write_text(json.dumps(meta, indent=1))


def read_field_raw(path) -> DisplacementField:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    if meta.get("components") != 3 or meta.get("units") != "voxel":
        raise UnsupportedFormatError("sidecar does not describe a voxel-unit field")
    dims = tuple(meta["dims"])
    n = int(np.prod(dims))
    data = np.fromfile(path, dtype="<f4")
    if data.size != 3 * n:
        raise UnsupportedFormatError(
            f"raw stream has {data.size} values, expected {3 * n}")
    m = data.reshape(dims[2], dims[1], dims[0], 3).transpose(2, 1, 0, 3)
    return DisplacementField(np.moveaxis(m, -1, 0).astype(np.float64),
                             tuple(meta["spacing"]))


# ------------------------------------------------------------------ NIfTI-1

_DT_FLOAT32 = 16
_DT_INT16 = 4


def write_volume_nifti(vol: Volume, path, dtype="float32"):
    path = Path(path)
    if dtype == "float32":
        code, bits, cast = _DT_FLOAT32, 32, "<f4"
    elif dtype == "int16":
        code, bits, cast = _DT_INT16, 16, "<i2"
    else:
        raise UnsupportedFormatError(f"unsupported NIfTI dtype {dtype!r}")
    nx, ny, nz = vol.dims
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bits)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)     # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)       # scl_slope
    struct.pack_into("<b", hdr, 123, 2)         # spatial units: mm
    struct.pack_into("<80s", hdr, 148, b"bidireg")
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    with open(path, "wb") as f:
        f.write(hdr)
        f.write(b"\x00" * 4)                    # no extensions
        vol.data.ravel(order="F").astype(cast).tofile(f)


def read_volume_nifti(path) -> Volume:
    path = Path(path)
    if path.name.endswith(".gz"):
        raise UnsupportedFormatError("compressed NIfTI is not supported")
    with open(path, "rb") as f:
        hdr = f.read(348)
        if len(hdr) < 348:
            raise UnsupportedFormatError("file too short for a NIfTI-1 header")
        (size,) = struct.unpack_from("<i", hdr, 0)
        if size != 348:
            raise UnsupportedFormatError(
                "not a little-endian NIfTI-1 header (sizeof_hdr != 348)")
        (magic,) = struct.unpack_from("<4s", hdr, 344)
        if magic not in (b"n+1\x00", b"ni1\x00"):
            raise UnsupportedFormatError(f"bad NIfTI magic {magic!r}")
        if magic == b"ni1\x00":
            raise UnsupportedFormatError("two-file NIfTI (.hdr/.img) is not supported")
        dim = struct.unpack_from("<8h", hdr, 40)
        if dim[0] < 3 or any(d > 1 for d in dim[4:4 + max(dim[0] - 3, 0)]):
            raise UnsupportedFormatError(f"only 3D volumes are supported, dim={dim}")
        dims = tuple(int(d) for d in dim[1:4])
        (datatype,) = struct.unpack_from("<h", hdr, 70)
        if datatype == _DT_FLOAT32:
            dt = "<f4"
        elif datatype == _DT_INT16:
            dt = "<i2"
        else:
            raise UnsupportedFormatError(f"unsupported NIfTI datatype {datatype}")
        pixdim = struct.unpack_from("<8f", hdr, 76)
        spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
        slope, inter = struct.unpack_from("<2f", hdr, 112)
        if slope not in (0.0, 1.0) or inter != 0.0:
            raise UnsupportedFormatError("intensity-scaled NIfTI is not supported")
        (vox_offset,) = struct.unpack_from("<f", hdr, 108)
        f.seek(int(vox_offset))
        n = dims[0] * dims[1] * dims[2]
        data = np.fromfile(f, dtype=dt, count=n)
        if data.size != n:
            raise UnsupportedFormatError("NIfTI data stream truncated")
    return Volume(data.reshape(dims, order="F").astype(np.float64), spacing)


# ---------------------------------------------------------------- dispatch

def load_volume(path) -> Volume:
    path = Path(path)
    if path.suffix == ".nii":
        return read_volume_nifti(path)
    if path.suffix == ".raw":
        return read_volume_raw(path)
    raise UnsupportedFormatError(f"unknown volume extension {path.suffix!r}")


def save_volume(vol: Volume, path):
    path = Path(path)
    if path.suffix == ".nii":
        write_volume_nifti(vol, path)
    elif path.suffix == ".raw":
        write_volume_raw(vol, path)
    else:
        raise UnsupportedFormatError(f"unknown volume extension {path.suffix!r}")


# -------------------------------------------------------------- landmarks

def write_landmarks_csv(lms: LandmarkSet, path):
    lines = ["id,x_mm,y_mm,z_mm"]
    for i, p in zip(lms.ids, lms.points_mm):
        lines.append(f"{int(i)},{p[0]:.9g},{p[1]:.9g},{p[2]:.9g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_landmarks_csv(path, frame="followup") -> LandmarkSet:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0].strip().lower() != "id,x_mm,y_mm,z_mm":
        raise ValueError(f"{path}: expected header 'id,x_mm,y_mm,z_mm'")
    ids, pts = [], []
    for line in text[1:]:
        if not line.strip():
            continue
        cells = line.split(",")
        ids.append(int(cells[0]))
        pts.append([float(c) for c in cells[1:4]])
    return LandmarkSet(np.asarray(ids), np.asarray(pts), frame)


# --------------------------------------------------------------- manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, manifest: dict):
    """Atomic write: the manifest appears complete or not at all."""
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)
