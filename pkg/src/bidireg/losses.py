"""Differentiable loss terms with hand-derived analytic gradients.

Terms: masked local NCC similarity, diffusion regularizer, masked inverse
consistency, mask-magnitude bookkeeping, and their weighted total. All
sums are normalized to means so loss magnitudes are comparable across
pyramid levels; the default weights assume this convention.

Masks are always treated as constants with respect to differentiation
(the binarization is not differentiable); they exert pressure through
being re-estimated between optimizer steps.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from . import _interp
from .fbc import ComposeData, CorrespondenceMask, compose_displacements
from .field import DisplacementField
from .volume import Volume

NCC_EPS = 1e-5
_TINY = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the total objective.

    total = (1 - lambda_reg) * sim + lambda_reg * reg
            + lambda_inv * inv + (lambda_m / N) * (mask counts)
    """

    lambda_reg: float = 0.3
    lambda_inv: float = 0.5
    lambda_m: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.lambda_reg <= 1.0:
            raise ValueError(f"lambda_reg must be in [0, 1], got {self.lambda_reg}")
        if self.lambda_inv < 0 or self.lambda_m < 0:
            raise ValueError("lambda_inv and lambda_m must be >= 0")


@dataclass
class LossBreakdown:
    """Per-iteration loss components (all mean-normalized).

    mask_mag is the raw combined mask voxel count |m_fwd| + |m_bwd|; the
    weighted total applies lambda_m / n_voxels to it.
    """

    sim: float
    reg: float
    inv: float
    mask_mag: float
    total: float
    n_voxels: int
    mask_fraction_fwd: float
    mask_fraction_bwd: float

    def to_dict(self):
        return {
            "sim": self.sim, "reg": self.reg, "inv": self.inv,
            "mask_mag": self.mask_mag, "total": self.total,
            "n_voxels": self.n_voxels,
            "mask_fraction_fwd": self.mask_fraction_fwd,
            "mask_fraction_bwd": self.mask_fraction_bwd,
        }


class WindowStats(NamedTuple):
    """Box sums and in-bounds counts of a fixed NCC target (cacheable)."""

    sum_t: np.ndarray
    ssq_t: np.ndarray
    count: np.ndarray


def _box_sums(data: np.ndarray, radius: int) -> np.ndarray:
    size = 2 * radius + 1
    return uniform_filter(data, size=size, mode="constant", cval=0.0) * float(size ** 3)


def _window_counts(dims, radius: int) -> np.ndarray:
    """In-bounds voxel count of the box window centered at each voxel."""
    axes = []
    for n in dims:
        i = np.arange(n)
        axes.append(np.minimum(i + radius, n - 1) - np.maximum(i - radius, 0) + 1.0)
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def target_window_stats(target: np.ndarray, radius: int) -> WindowStats:
    return WindowStats(_box_sums(target, radius),
                       _box_sums(target * target, radius),
                       _window_counts(target.shape, radius))


class NccResult(NamedTuple):
    value: float
    grad_wrt_warped: np.ndarray
    degenerate: bool


def masked_ncc(target: Volume, warped: Volume, valid: np.ndarray,
               window_radius: int, eps: float = NCC_EPS,
               target_stats: Optional[WindowStats] = None) -> NccResult:
    """Mean local squared correlation over valid window centers.

    cc(x) = cross(x)^2 / (var_T(x) * var_W(x) + eps) with window statistics
    of side 2r+1 taken over the in-bounds portion of each window (true
    local means, so the value is invariant to affine intensity rescaling).
    A window is included iff its CENTER voxel is valid; the window
    statistics themselves use all in-bounds voxels. Returns the per-voxel
    analytic gradient of the value wrt warped intensities.
    """
    if target.dims != warped.dims or valid.shape != target.dims:
        raise ValueError("target/warped/valid dims must match")
    if window_radius < 1:
        raise ValueError(f"window_radius must be >= 1, got {window_radius}")
    value, grad, degen = _masked_ncc_raw(
        target.data, warped.data, valid, window_radius, eps, target_stats)
    return NccResult(value, grad, degen)


def _masked_ncc_raw(target, warped, valid, radius, eps=NCC_EPS, stats=None):
    if stats is None:
        stats = target_window_stats(target, radius)
    s_t, s_tt, n = stats
    s_w = _box_sums(warped, radius)
    s_ww = _box_sums(warped * warped, radius)
    s_tw = _box_sums(target * warped, radius)

    cross = s_tw - s_t * s_w / n
    var_t = np.maximum(s_tt - s_t * s_t / n, 0.0)
    var_w = np.maximum(s_ww - s_w * s_w / n, 0.0)
    denom = var_t * var_w + eps
    cc = cross * cross / denom

    m = int(np.count_nonzero(valid))
    if m == 0:
        return 0.0, np.zeros_like(target), True
    value = float(cc[valid].sum() / m)

    # d value / d warped(y), via the box-filter adjoint (a box filter):
    #   dcc(x)/dW(y) = A(x) (T(y) - mean_T(x)) + B(x) (W(y) - mean_W(x))
    # with A = 2 cross / denom, B = -2 cross^2 var_t / denom^2 on valid
    # centers, summed over the windows containing y.
    a = np.where(valid, 2.0 * cross / denom, 0.0)
    b = np.where(valid, -2.0 * cc * var_t / denom, 0.0)
    grad = (target * _box_sums(a, radius) - _box_sums(a * s_t / n, radius)
            + warped * _box_sums(b, radius) - _box_sums(b * s_w / n, radius)) / m
    return value, grad, False


def _warp_with_grad(moving: np.ndarray, cache: _interp.CellCache):
    corners = cache.gather_corners(moving)
    dims = moving.shape
    warped = cache.value_from_corners(corners).reshape(dims)
    spat = cache.grad_from_corners(corners).reshape((3,) + dims)
    return warped, spat


def _similarity_raw(moving_chs: Sequence[np.ndarray], fixed_chs: Sequence[np.ndarray],
                    valid_fwd: np.ndarray, valid_bwd: np.ndarray, radius: int,
                    cache_fwd: _interp.CellCache, cache_bwd: _interp.CellCache,
                    stats_fwd=None, stats_bwd=None, eps: float = NCC_EPS):
    """Channel-averaged bidirectional masked-NCC similarity with gradients.

    Returns (value, g_fwd, g_bwd, degenerate) where value is
    -NCC(fixed, warp(moving)) - NCC(moving, warp(fixed)) averaged over
    channels, and the gradients are wrt the two displacement fields.
    """
    n_ch = len(moving_chs)
    dims = moving_chs[0].shape
    g_fwd = np.zeros((3,) + dims)
    g_bwd = np.zeros((3,) + dims)
    value = 0.0
    degenerate = False
    for ch in range(n_ch):
        sf = stats_fwd[ch] if stats_fwd is not None else None
        sb = stats_bwd[ch] if stats_bwd is not None else None
        warped_m, spat_m = _warp_with_grad(moving_chs[ch], cache_fwd)
        v1, grad1, d1 = _masked_ncc_raw(fixed_chs[ch], warped_m, valid_fwd,
                                        radius, eps, sf)
        warped_f, spat_f = _warp_with_grad(fixed_chs[ch], cache_bwd)
        v2, grad2, d2 = _masked_ncc_raw(moving_chs[ch], warped_f, valid_bwd,
                                        radius, eps, sb)
        value += (-v1 - v2) / n_ch
        g_fwd -= grad1 * spat_m / n_ch
        g_bwd -= grad2 * spat_f / n_ch
        degenerate = degenerate or d1 or d2
    return value, g_fwd, g_bwd, degenerate


def similarity_loss(moving: Volume, fixed: Volume,
                    u_fwd: DisplacementField, u_bwd: DisplacementField,
                    mask_fwd: CorrespondenceMask, mask_bwd: CorrespondenceMask,
                    window_radius: int = 3):
    """-NCC(fixed, warp(moving, u_fwd)) - NCC(moving, warp(fixed, u_bwd)).

    Gradients chain through the warp: the per-voxel NCC gradient times the
    exact spatial derivative of the trilinear interpolant at x + u(x).
    Returns (value, grad_u_fwd, grad_u_bwd).
    """
    if not (moving.dims == fixed.dims == u_fwd.dims == u_bwd.dims):
        raise ValueError("volume and field dims must match")
    ident = _interp.identity_grid(u_fwd.dims)
    cache_fwd = _interp.CellCache(ident + u_fwd.data, u_fwd.dims)
    cache_bwd = _interp.CellCache(ident + u_bwd.data, u_bwd.dims)
    value, g_fwd, g_bwd, _ = _similarity_raw(
        [moving.data], [fixed.data], ~mask_fwd.data, ~mask_bwd.data,
        window_radius, cache_fwd, cache_bwd)
    return value, g_fwd, g_bwd


def _diffusion_raw(u: np.ndarray):
    """Mean squared forward difference over voxels and components."""
    nvox = u[0].size
    scale = 1.0 / (3.0 * nvox)
    value = 0.0
    grad = np.zeros_like(u)
    for c in range(3):
        for a in range(3):
            d = np.diff(u[c], axis=a)
            value += float((d * d).sum()) * scale
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[a] = slice(None, -1)
            hi[a] = slice(1, None)
            grad[c][tuple(hi)] += (2.0 * scale) * d
            grad[c][tuple(lo)] -= (2.0 * scale) * d
    return value, grad


def diffusion_energy(u: DisplacementField):
    """Smoothness penalty: mean ||forward-difference gradient||^2.

    Zero iff the field is constant. Returns (value, grad).
    """
    return _diffusion_raw(u.data)


def _inv_consistency_accumulate(comp: ComposeData, weight_over_n: np.ndarray,
                                g_outer: np.ndarray, g_inner: np.ndarray):
    """Add gradients of sum_x w(x) * delta(x) for one direction.

    The outer field gets the local term (identity plus the inner field's
    interpolated Jacobian at the query point); the inner field gets the
    adjoint-scattered unit residual.
    """
    dims = comp.delta.shape
    dflat = comp.delta.reshape(-1)
    vhat = np.zeros((3, dflat.size))
    np.divide(comp.v.reshape(3, -1), dflat, out=vhat, where=dflat > _TINY)
    coef = weight_over_n.reshape(-1) * vhat

    # sum_i coef_i * d(inner_i)/dq_j, done on coef-combined corner values
    combo = comp.cache.combine_corners(comp.inner_corners, coef)
    acc = coef + comp.cache.grad_from_corners(combo)
    g_outer += acc.reshape((3,) + dims)
    for i in range(3):
        g_inner[i] += comp.cache.scatter(coef[i]).reshape(dims)


def _inverse_consistency_raw(comp_fwd: ComposeData, comp_bwd: ComposeData,
                             valid_fwd: np.ndarray, valid_bwd: np.ndarray):
    # delta is rescaled from voxels to grid-half-extent units, the same
    # convention the default tolerance alpha is converted from; this keeps
    # the term's balance against the similarity independent of grid size
    # (lambda_inv was calibrated in normalized coordinates).
    dims = comp_fwd.delta.shape
    nvox = comp_fwd.delta.size
    half_extent = (sum(dims) / 3.0) / 2.0
    w_fwd = valid_fwd.astype(np.float64) / (nvox * half_extent)
    w_bwd = valid_bwd.astype(np.float64) / (nvox * half_extent)
    value = float((w_fwd * comp_fwd.delta).sum() + (w_bwd * comp_bwd.delta).sum())
    g_fwd = np.zeros((3,) + dims)
    g_bwd = np.zeros((3,) + dims)
    _inv_consistency_accumulate(comp_fwd, w_fwd, g_fwd, g_bwd)
    _inv_consistency_accumulate(comp_bwd, w_bwd, g_bwd, g_fwd)
    return value, g_fwd, g_bwd


def inverse_consistency_loss(u_fwd: DisplacementField, u_bwd: DisplacementField,
                             mask_fwd: CorrespondenceMask,
                             mask_bwd: CorrespondenceMask):
    """Mean of delta_fwd (1 - m_fwd) + delta_bwd (1 - m_bwd) over voxels.

    The error magnitudes enter in grid-half-extent units (voxels divided
    by mean(dims)/2), mirroring the unit conversion used for the mask
    tolerance, so the configured weight means the same thing at every
    resolution. Gradients flow into both fields through the composition,
    including the trilinear sampling of the inner field; masks are
    constants. Returns (value, grad_u_fwd, grad_u_bwd).
    """
    if u_fwd.dims != u_bwd.dims:
        raise ValueError(f"field dims differ: {u_fwd.dims} vs {u_bwd.dims}")
    comp_fwd = compose_displacements(u_fwd.data, u_bwd.data, need_grads=True)
    comp_bwd = compose_displacements(u_bwd.data, u_fwd.data, need_grads=True)
    return _inverse_consistency_raw(comp_fwd, comp_bwd,
                                    ~mask_fwd.data, ~mask_bwd.data)


def _total_loss_raw(moving_chs, fixed_chs, u_fwd, u_bwd, mask_fwd, mask_bwd,
                    weights: LossWeights, radius: int,
                    cache_fwd=None, cache_bwd=None,
                    comp_fwd=None, comp_bwd=None,
                    stats_fwd=None, stats_bwd=None):
    dims = u_fwd.shape[1:]
    nvox = dims[0] * dims[1] * dims[2]
    if cache_fwd is None:
        ident = _interp.identity_grid(dims)
        cache_fwd = _interp.CellCache(ident + u_fwd, dims)
        cache_bwd = _interp.CellCache(ident + u_bwd, dims)
    if comp_fwd is None:
        comp_fwd = compose_displacements(u_fwd, u_bwd, cache=cache_fwd,
                                         need_grads=True)
        comp_bwd = compose_displacements(u_bwd, u_fwd, cache=cache_bwd,
                                         need_grads=True)

    valid_fwd = ~mask_fwd
    valid_bwd = ~mask_bwd
    sim, gs_fwd, gs_bwd, _ = _similarity_raw(
        moving_chs, fixed_chs, valid_fwd, valid_bwd, radius,
        cache_fwd, cache_bwd, stats_fwd, stats_bwd)
    reg_f, gr_fwd = _diffusion_raw(u_fwd)
    reg_b, gr_bwd = _diffusion_raw(u_bwd)
    reg = reg_f + reg_b
    inv, gi_fwd, gi_bwd = _inverse_consistency_raw(comp_fwd, comp_bwd,
                                                   valid_fwd, valid_bwd)
    count_fwd = int(mask_fwd.sum())
    count_bwd = int(mask_bwd.sum())
    mask_mag = float(count_fwd + count_bwd)

    w = weights
    total = ((1.0 - w.lambda_reg) * sim + w.lambda_reg * reg
             + w.lambda_inv * inv + (w.lambda_m / nvox) * mask_mag)
    g_fwd = (1.0 - w.lambda_reg) * gs_fwd + w.lambda_reg * gr_fwd + w.lambda_inv * gi_fwd
    g_bwd = (1.0 - w.lambda_reg) * gs_bwd + w.lambda_reg * gr_bwd + w.lambda_inv * gi_bwd

    breakdown = LossBreakdown(
        sim=sim, reg=reg, inv=inv, mask_mag=mask_mag, total=float(total),
        n_voxels=nvox,
        mask_fraction_fwd=count_fwd / nvox,
        mask_fraction_bwd=count_bwd / nvox,
    )
    return breakdown, g_fwd, g_bwd


def total_loss(moving: Volume, fixed: Volume,
               u_fwd: DisplacementField, u_bwd: DisplacementField,
               mask_fwd: CorrespondenceMask, mask_bwd: CorrespondenceMask,
               weights: LossWeights = LossWeights(), window_radius: int = 3):
    """Weighted total objective and its gradients wrt both fields.

    The mask-magnitude term contributes value only: masks are binary
    constants per evaluation, so it exerts no direct gradient. Returns
    (LossBreakdown, grad_u_fwd, grad_u_bwd).
    """
    if not (moving.dims == fixed.dims == u_fwd.dims == u_bwd.dims
            == mask_fwd.dims == mask_bwd.dims):
        raise ValueError("all inputs must share the same grid dims")
    return _total_loss_raw([moving.data], [fixed.data], u_fwd.data, u_bwd.data,
                           mask_fwd.data, mask_bwd.data, weights, window_radius)
