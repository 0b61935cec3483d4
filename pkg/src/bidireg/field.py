"""Displacement-field type and geometric operators.

Displacements are stored in voxel units of their own grid: the map
phi(x) = x + u(x) takes grid coordinates into the moving image. Conversions
to millimetres happen only in the metrics layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _interp
from .volume import Volume, _resample_coords


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel 3-vectors in voxel units.

    Attributes:
        data: float64 array of shape (3, nx, ny, nz); component c is the
            displacement along axis c.
        spacing: mm per voxel of the grid the field lives on.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 4 or data.shape[0] != 3 or min(data.shape[1:]) < 2:
            raise ValueError(f"field must be shaped (3, nx, ny, nz), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("field contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing!r}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return self.data.shape[1:]

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)):
        return cls(np.zeros((3,) + tuple(dims)), spacing)

    def magnitude(self):
        """Per-voxel Euclidean norm as an (nx, ny, nz) array."""
        return np.sqrt((self.data ** 2).sum(axis=0))


def warp(vol: Volume, u: DisplacementField) -> Volume:
    """Resample `vol` at x + u(x): out(x) = vol(x + u(x)), clamp-to-edge."""
    if u.dims != vol.dims:
        raise ValueError(f"field dims {u.dims} != volume dims {vol.dims}")
    if np.all(u.data == 0.0):
        return Volume(vol.data, vol.spacing)
    pts = _interp.identity_grid(u.dims) + u.data
    data = _interp.CellCache(pts, vol.dims).interpolate(vol.data).reshape(vol.dims)
    return Volume(data, vol.spacing)


def sample_field(u: DisplacementField, points) -> DisplacementField:
    """Interpolate each vector component of `u` at per-voxel coordinates.

    `points` is a (3, nx, ny, nz) array of continuous coordinates (one per
    voxel of u's grid), e.g. x + u_fwd(x) when composing two fields.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != u.data.shape:
        raise ValueError(f"points shape {pts.shape} != field shape {u.data.shape}")
    cache = _interp.CellCache(pts, u.dims)
    out = np.stack([cache.interpolate(u.data[c]).reshape(u.dims) for c in range(3)])
    return DisplacementField(out, u.spacing)


def jacobian_det(u: DisplacementField) -> Volume:
    """det(I + grad u) per voxel, central differences (one-sided at borders).

    Computed in voxel units; values <= 0 flag local folding.
    """
    J = np.empty((3, 3) + u.dims)
    for i in range(3):
        for a in range(3):
            J[i, a] = np.gradient(u.data[i], axis=a, edge_order=1)
        J[i, i] += 1.0
    det = (J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
           - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
           + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0]))
    return Volume(det, u.spacing)


def resample_field(u: DisplacementField, new_dims) -> DisplacementField:
    """Trilinearly resample the field and rescale vectors to the new grid.

    Component c is multiplied by new_dims[c]/dims[c] so displacements stay
    in voxel units of the grid they live on.
    """
    new_dims = tuple(int(n) for n in new_dims)
    if len(new_dims) != 3 or min(new_dims) < 2:
        raise ValueError(f"field dims must be >= 2 per axis, got {new_dims}")
    if new_dims == u.dims:
        return u
    pts = _resample_coords(new_dims, u.dims)
    cache = _interp.CellCache(pts, u.dims)
    out = np.empty((3,) + new_dims)
    for c in range(3):
        ratio = new_dims[c] / u.dims[c]
        out[c] = cache.interpolate(u.data[c]).reshape(new_dims) * ratio
    spacing = tuple(s * o / n for s, o, n in zip(u.spacing, u.dims, new_dims))
    return DisplacementField(out, spacing)


def upsample_field(u: DisplacementField, new_dims) -> DisplacementField:
    """resample_field restricted to non-shrinking targets (pyramid step)."""
    new_dims = tuple(int(n) for n in new_dims)
    if any(n < o for n, o in zip(new_dims, u.dims)):
        raise ValueError(f"upsample target {new_dims} smaller than {u.dims}")
    return resample_field(u, new_dims)
