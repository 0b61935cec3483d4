"""Scalar 3D volume type: trilinear sampling, resampling, foreground.

Volumes are immutable after construction (the data buffer is locked
read-only), so they are safe to share across threads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _interp


@dataclass(frozen=True)
class Volume:
    """Scalar image on a regular grid.

    Attributes:
        data: float64 array of shape (nx, ny, nz), indexed [x, y, z].
            Serialized streams are x-fastest (Fortran ravel of this layout).
        spacing: (sx, sy, sz) physical mm per voxel.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 3 or min(data.shape) < 2:
            raise ValueError(f"volume dims must be >= 2 per axis, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing!r}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return self.data.shape

    @property
    def n_voxels(self):
        nx, ny, nz = self.data.shape
        return nx * ny * nz


@dataclass(frozen=True)
class ForegroundMask:
    """Boolean mask of voxels with intensity > 0."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=bool, order="C")
        if data.ndim != 3:
            raise ValueError("foreground mask must be 3D")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self):
        return self.data.shape

    @property
    def count(self):
        return int(self.data.sum())


def trilinear_sample(vol: Volume, points):
    """Sample `vol` at continuous voxel coordinates, clamp-to-edge.

    `points` is (3,) for a single point or (3, N) for a batch; returns a
    scalar or an (N,) array accordingly.
    """
    pts = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample points must be finite")
    single = pts.ndim == 1
    if single:
        pts = pts[:, None]
    if pts.shape[0] != 3:
        raise ValueError(f"points must be shaped (3,) or (3, N), got {pts.shape}")
    vals = _interp.CellCache(pts, vol.dims).interpolate(vol.data)
    return float(vals[0]) if single else vals


def foreground(vol: Volume) -> ForegroundMask:
    """Mask of strictly positive voxels."""
    return ForegroundMask(vol.data > 0)


def _resample_coords(new_dims, old_dims):
    """Cell-centered coordinate map from the new grid into the old one.

    i_old = (i_new + 0.5) * old/new - 0.5 keeps the physical extent n*s
    fixed, so a displacement measured in voxels converts between the grids
    by the plain dimension ratio.
    """
    axes = []
    for a in range(3):
        ratio = old_dims[a] / new_dims[a]
        axes.append((np.arange(new_dims[a], dtype=np.float64) + 0.5) * ratio - 0.5)
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def resample(vol: Volume, new_dims) -> Volume:
    """Trilinear resampling onto `new_dims`, preserving physical extent."""
    new_dims = tuple(int(n) for n in new_dims)
    if len(new_dims) != 3 or min(new_dims) < 2:
        raise ValueError(f"resample dims must be >= 2 per axis, got {new_dims}")
    if new_dims == vol.dims:
        return vol
    pts = _resample_coords(new_dims, vol.dims)
    data = _interp.CellCache(pts, vol.dims).interpolate(vol.data).reshape(new_dims)
    spacing = tuple(s * o / n for s, o, n in zip(vol.spacing, vol.dims, new_dims))
    return Volume(data, spacing)


def normalize_intensity(vol: Volume) -> Volume:
    """Min-max normalize to [0, 1] over the foreground; background stays 0.

    A constant foreground maps to 1.0.
    """
    fg = vol.data > 0
    if not fg.any():
        return vol
    lo = vol.data[fg].min()
    hi = vol.data[fg].max()
    out = np.zeros_like(vol.data)
    if hi > lo:
        out[fg] = (vol.data[fg] - lo) / (hi - lo)
    else:
        out[fg] = 1.0
    return Volume(out, vol.spacing)
