"""Forward-backward consistency: error field, adaptive threshold, masks.

The residual of composing the two directions,
delta(x) = ||u_fwd(x) + u_bwd(x + u_fwd(x))||_2, is large where the fields
disagree - either misregistration or genuinely absent correspondence. The
threshold adapts to the overall error level (mean over foreground plus a
tolerance alpha), and the binary mask is taken on a box-filtered delta to
suppress outliers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.ndimage import uniform_filter

from . import _interp
from .field import DisplacementField
from .volume import ForegroundMask, Volume


@dataclass(frozen=True)
class FbcParams:
    """Threshold tolerance and mask-filter half-width.

    alpha is in voxel units of the grid the check runs on; None means
    "auto": 0.015 * (mean grid extent / 2), which transplants the reference
    value 0.015 from a half-extent-normalized coordinate convention into
    voxel units. The averaging filter has side 2p+1 with zero padding.
    """

    alpha: Optional[float] = None
    p: int = 4

    def __post_init__(self):
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if int(self.p) != self.p or self.p < 0:
            raise ValueError(f"p must be a non-negative integer, got {self.p}")
        object.__setattr__(self, "p", int(self.p))

    def resolve_alpha(self, dims) -> float:
        if self.alpha is not None:
            return float(self.alpha)
        return 0.015 * (sum(dims) / len(dims)) / 2.0


class FbError(Volume):
    """Non-negative forward-backward error magnitude per voxel."""

    def __post_init__(self):
        super().__post_init__()
        if np.any(self.data < 0):
            raise ValueError("fb error must be non-negative")


@dataclass(frozen=True)
class CorrespondenceMask:
    """Boolean per-voxel mask; True marks absent correspondence."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=bool, order="C")
        if data.ndim != 3:
            raise ValueError("mask must be 3D")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self):
        return self.data.shape

    @property
    def count(self):
        return int(self.data.sum())

    @property
    def fraction(self):
        return self.count / self.data.size

    @classmethod
    def empty(cls, dims):
        return cls(np.zeros(dims, dtype=bool))


class ComposeData(NamedTuple):
    """Intermediates of delta(x) = ||u_fwd(x) + u_bwd(x + u_fwd(x))||.

    v is the residual vector field (3, nx, ny, nz); cache holds the cell
    lookup at the query points x + u_fwd(x); inner_corners keeps the
    gathered u_bwd corner values (3, 8, M) when gradients are needed.
    """

    v: np.ndarray
    delta: np.ndarray
    cache: _interp.CellCache
    inner_corners: Optional[np.ndarray]


def compose_displacements(u_fwd: np.ndarray, u_bwd: np.ndarray,
                          cache: Optional[_interp.CellCache] = None,
                          need_grads: bool = False) -> ComposeData:
    """Raw-array core of the forward-backward residual."""
    dims = u_fwd.shape[1:]
    if cache is None:
        pts = _interp.identity_grid(dims) + u_fwd
        cache = _interp.CellCache(pts, dims)
    corners = np.empty((3, 8, cache.npoints))
    v = np.empty_like(u_fwd)
    for c in range(3):
        corners[c] = cache.gather_corners(u_bwd[c])
        v[c] = u_fwd[c] + cache.value_from_corners(corners[c]).reshape(dims)
    delta = np.sqrt((v * v).sum(axis=0))
    return ComposeData(v, delta, cache, corners if need_grads else None)


def fb_error(u_fwd: DisplacementField, u_bwd: DisplacementField) -> FbError:
    """delta(x) = ||u_fwd(x) + u_bwd(x + u_fwd(x))||_2 per voxel."""
    if u_fwd.dims != u_bwd.dims:
        raise ValueError(f"field dims differ: {u_fwd.dims} vs {u_bwd.dims}")
    comp = compose_displacements(u_fwd.data, u_bwd.data)
    return FbError(comp.delta, u_fwd.spacing)


def fb_threshold(delta, fg: ForegroundMask, params: FbcParams) -> float:
    """tau = mean of delta over the foreground + alpha."""
    data = delta.data if isinstance(delta, Volume) else np.asarray(delta)
    if fg.dims != data.shape:
        raise ValueError(f"foreground dims {fg.dims} != delta dims {data.shape}")
    n_f = fg.count
    if n_f == 0:
        raise ValueError("degenerate foreground: no positive voxels")
    return float(data[fg.data].sum() / n_f + params.resolve_alpha(data.shape))


def smoothed_error(delta, p: int) -> np.ndarray:
    """Box mean of side 2p+1 with zero padding (full-kernel denominator)."""
    data = delta.data if isinstance(delta, Volume) else np.asarray(delta)
    if p == 0:
        return np.array(data, dtype=np.float64)
    return uniform_filter(np.asarray(data, dtype=np.float64),
                          size=2 * p + 1, mode="constant", cval=0.0)


def absent_mask(delta, tau: float, params: FbcParams) -> CorrespondenceMask:
    """m(x) = 1 iff the box-filtered error at x is >= tau (ties masked)."""
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    return CorrespondenceMask(smoothed_error(delta, params.p) >= tau)


class MaskEstimate(NamedTuple):
    mask_fwd: CorrespondenceMask
    mask_bwd: CorrespondenceMask
    err_fwd: FbError
    err_bwd: FbError
    tau_fwd: float
    tau_bwd: float


def estimate_masks(u_fwd: DisplacementField, u_bwd: DisplacementField,
                   fg_fixed: ForegroundMask, fg_moving: ForegroundMask,
                   params: FbcParams) -> MaskEstimate:
    """Symmetric mask estimation in both directions.

    The forward direction (u_fwd outer) lives on the fixed grid and its
    threshold uses the fixed image's foreground; the backward direction is
    the same construction with the fields exchanged.
    """
    if not (u_fwd.dims == u_bwd.dims == fg_fixed.dims == fg_moving.dims):
        raise ValueError("dims of fields and foregrounds must all match")
    err_fwd = fb_error(u_fwd, u_bwd)
    err_bwd = fb_error(u_bwd, u_fwd)
    tau_fwd = fb_threshold(err_fwd, fg_fixed, params)
    tau_bwd = fb_threshold(err_bwd, fg_moving, params)
    return MaskEstimate(
        absent_mask(err_fwd, tau_fwd, params),
        absent_mask(err_bwd, tau_bwd, params),
        err_fwd, err_bwd, tau_fwd, tau_bwd,
    )
