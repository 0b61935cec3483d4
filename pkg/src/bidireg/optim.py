"""Coarse-to-fine per-pair minimization of the registration objective.

Both displacement fields are free variables optimized directly with a
first-order adaptive-moment (Adam-style) update. Absent-correspondence
masks are re-estimated from the current fields once per iteration (after
a warmup with empty masks at the coarsest level) and treated as constants
inside each gradient step.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field
from typing import List, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _interp
from .fbc import CorrespondenceMask, FbcParams, FbError, compose_displacements, smoothed_error
from .field import DisplacementField, resample_field
from .losses import LossBreakdown, LossWeights, _total_loss_raw, target_window_stats
from .volume import ForegroundMask, Volume, resample


class DivergenceError(RuntimeError):
    """Optimization produced non-finite loss or runaway displacements."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class RegistrationConfig:
    """All knobs of one registration run.

    pyramid_scales are resolution fractions, coarsest first, ending at 1;
    iters_per_level pairs with them. alpha inside `fbc` is interpreted at
    full resolution and rescaled per level (None = auto per level).
    """

    pyramid_scales: tuple = (0.25, 0.5, 1.0)
    iters_per_level: tuple = (200, 150, 100)
    mask_warmup_iters: int = 50
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = dc_field(default_factory=LossWeights)
    fbc: FbcParams = dc_field(default_factory=FbcParams)
    ncc_radius: int = 3
    seed: int = 0
    masking: bool = True
    grad_smooth_sigma: float = 0.0
    max_disp_factor: float = 0.5

    def __post_init__(self):
        scales = tuple(float(s) for s in self.pyramid_scales)
        iters = tuple(int(i) for i in self.iters_per_level)
        if len(scales) != len(iters) or not scales:
            raise ValueError("pyramid_scales and iters_per_level must pair up")
        if any(b <= a for a, b in zip(scales, scales[1:])) or scales[-1] != 1.0:
            raise ValueError(f"scales must increase strictly and end at 1, got {scales}")
        if min(iters) < 1:
            raise ValueError("every level needs at least one iteration")
        if self.mask_warmup_iters < 0:
            raise ValueError("mask_warmup_iters must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.ncc_radius < 1:
            raise ValueError("ncc_radius must be >= 1")
        object.__setattr__(self, "pyramid_scales", scales)
        object.__setattr__(self, "iters_per_level", iters)

    def to_dict(self):
        return {
            "pyramid_scales": list(self.pyramid_scales),
            "iters_per_level": list(self.iters_per_level),
            "mask_warmup_iters": self.mask_warmup_iters,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "lambda_reg": self.weights.lambda_reg,
            "lambda_inv": self.weights.lambda_inv,
            "lambda_m": self.weights.lambda_m,
            "alpha": self.fbc.alpha,
            "p": self.fbc.p,
            "ncc_radius": self.ncc_radius,
            "seed": self.seed,
            "masking": self.masking,
            "grad_smooth_sigma": self.grad_smooth_sigma,
            "max_disp_factor": self.max_disp_factor,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        weights = LossWeights(
            lambda_reg=d.pop("lambda_reg", 0.3),
            lambda_inv=d.pop("lambda_inv", 0.5),
            lambda_m=d.pop("lambda_m", 0.01),
        )
        fbc = FbcParams(alpha=d.pop("alpha", None), p=d.pop("p", 4))
        fields = ("pyramid_scales", "iters_per_level", "mask_warmup_iters",
                  "learning_rate", "beta1", "beta2", "adam_eps", "ncc_radius",
                  "seed", "masking", "grad_smooth_sigma", "max_disp_factor")
        unknown = set(d) - set(fields)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        known = {k: d[k] for k in fields if k in d}
        if "pyramid_scales" in known:
            known["pyramid_scales"] = tuple(known["pyramid_scales"])
        if "iters_per_level" in known:
            known["iters_per_level"] = tuple(known["iters_per_level"])
        return cls(weights=weights, fbc=fbc, **known)


@dataclass
class RegistrationResult:
    """Final fields, masks and error volumes at full resolution.

    disp_fwd warps the moving image onto the fixed grid (out(x) =
    moving(x + disp_fwd(x))); disp_bwd does the opposite. mask_fwd lives
    on the fixed grid; mask_bwd on the moving grid. Masks and error
    volumes are recomputed once from the final fields.
    """

    disp_fwd: DisplacementField
    disp_bwd: DisplacementField
    mask_fwd: CorrespondenceMask
    mask_bwd: CorrespondenceMask
    fb_err_fwd: FbError
    fb_err_bwd: FbError
    tau_fwd: float
    tau_bwd: float
    trace: List[dict]
    wall_time: float


class _Adam:
    def __init__(self, shape, lr, beta1, beta2, eps):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _level_dims(full_dims, scale):
    return tuple(max(2, int(round(n * scale))) for n in full_dims)


def _resample_level(vol: Volume, dims, scale) -> Volume:
    """Downsample with Gaussian anti-alias pre-smoothing.

    Plain trilinear decimation aliases fine texture into decorrelated
    patterns on the two sides, which misleads the coarse levels.
    """
    if scale >= 1.0:
        return resample(vol, dims)
    sigma = 0.5 / scale
    smoothed = Volume(gaussian_filter(vol.data, sigma), vol.spacing)
    return resample(smoothed, dims)


def _level_alpha(cfg: RegistrationConfig, dims, full_dims) -> float:
    if cfg.fbc.alpha is None:
        return FbcParams().resolve_alpha(dims)
    ratio = (sum(dims) / 3.0) / (sum(full_dims) / 3.0)
    return cfg.fbc.alpha * ratio


def _foreground_union(channels: Sequence[Volume]) -> np.ndarray:
    fg = channels[0].data > 0
    for ch in channels[1:]:
        fg = fg | (ch.data > 0)
    return fg


def register_multichannel(moving: Sequence[Volume], fixed: Sequence[Volume],
                          cfg: Optional[RegistrationConfig] = None) -> RegistrationResult:
    """Register channel-stacked volume pairs sharing one field pair.

    The similarity is the mean of per-channel masked-NCC terms; the
    threshold foregrounds are the union over channels. Deterministic:
    identical inputs and config give bit-identical results.
    """
    cfg = cfg or RegistrationConfig()
    if len(moving) != len(fixed) or not moving:
        raise ValueError("moving and fixed must be equal-length non-empty lists")
    base = fixed[0]
    for v in list(moving) + list(fixed):
        if v.dims != base.dims or v.spacing != base.spacing:
            raise ValueError("all channels must share dims and spacing")

    t0 = time.perf_counter()
    full_dims = base.dims
    trace: List[dict] = []
    u_fwd = u_bwd = None
    spacing_l = base.spacing

    for li, scale in enumerate(cfg.pyramid_scales):
        dims = _level_dims(full_dims, scale)
        moving_l = [_resample_level(v, dims, scale) for v in moving]
        fixed_l = [_resample_level(v, dims, scale) for v in fixed]
        spacing_l = fixed_l[0].spacing
        if u_fwd is None:
            u_fwd = np.zeros((3,) + dims)
            u_bwd = np.zeros((3,) + dims)
        else:
            u_fwd = resample_field(DisplacementField(u_fwd, spacing_prev), dims).data.copy()
            u_bwd = resample_field(DisplacementField(u_bwd, spacing_prev), dims).data.copy()
        spacing_prev = spacing_l

        alpha_l = _level_alpha(cfg, dims, full_dims)
        fbc_l = FbcParams(alpha=alpha_l, p=cfg.fbc.p)
        fg_fixed = _foreground_union(fixed_l)
        fg_moving = _foreground_union(moving_l)
        nf_fixed = int(fg_fixed.sum())
        nf_moving = int(fg_moving.sum())
        if cfg.masking and min(nf_fixed, nf_moving) == 0:
            raise ValueError("degenerate foreground: an input has no positive voxels")
        stats_fwd = [target_window_stats(v.data, cfg.ncc_radius) for v in fixed_l]
        stats_bwd = [target_window_stats(v.data, cfg.ncc_radius) for v in moving_l]
        moving_datas = [v.data for v in moving_l]
        fixed_datas = [v.data for v in fixed_l]
        ident = _interp.identity_grid(dims)
        cap = cfg.max_disp_factor * max(dims)
        adam_fwd = _Adam(u_fwd.shape, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
        adam_bwd = _Adam(u_bwd.shape, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
        empty = np.zeros(dims, dtype=bool)

        for it in range(cfg.iters_per_level[li]):
            cache_fwd = _interp.CellCache(ident + u_fwd, dims)
            cache_bwd = _interp.CellCache(ident + u_bwd, dims)
            comp_fwd = compose_displacements(u_fwd, u_bwd, cache=cache_fwd, need_grads=True)
            comp_bwd = compose_displacements(u_bwd, u_fwd, cache=cache_bwd, need_grads=True)

            warm = (li == 0 and it < cfg.mask_warmup_iters) or not cfg.masking
            if warm:
                m_fwd, m_bwd = empty, empty
                tau_fwd = tau_bwd = None
            else:
                tau_fwd = float(comp_fwd.delta[fg_fixed].sum() / nf_fixed + alpha_l)
                tau_bwd = float(comp_bwd.delta[fg_moving].sum() / nf_moving + alpha_l)
                m_fwd = smoothed_error(comp_fwd.delta, fbc_l.p) >= tau_fwd
                m_bwd = smoothed_error(comp_bwd.delta, fbc_l.p) >= tau_bwd

            bd, g_fwd, g_bwd = _total_loss_raw(
                moving_datas, fixed_datas, u_fwd, u_bwd, m_fwd, m_bwd,
                cfg.weights, cfg.ncc_radius,
                cache_fwd=cache_fwd, cache_bwd=cache_bwd,
                comp_fwd=comp_fwd, comp_bwd=comp_bwd,
                stats_fwd=stats_fwd, stats_bwd=stats_bwd)

            if not np.isfinite(bd.total):
                raise DivergenceError(
                    f"non-finite loss at level {li} iteration {it}", trace)

            if cfg.grad_smooth_sigma > 0:
                for c in range(3):
                    g_fwd[c] = gaussian_filter(g_fwd[c], cfg.grad_smooth_sigma)
                    g_bwd[c] = gaussian_filter(g_bwd[c], cfg.grad_smooth_sigma)

            adam_fwd.step(u_fwd, g_fwd)
            adam_bwd.step(u_bwd, g_bwd)

            max_disp = float(np.sqrt(
                max((u_fwd ** 2).sum(axis=0).max(), (u_bwd ** 2).sum(axis=0).max())))
            entry = bd.to_dict()
            entry.update({"level": li, "iter": it, "tau_fwd": tau_fwd,
                          "tau_bwd": tau_bwd, "max_disp": max_disp})
            trace.append(entry)
            if max_disp > cap:
                raise DivergenceError(
                    f"max displacement {max_disp:.2f} exceeds cap {cap:.2f} "
                    f"at level {li} iteration {it}", trace)

    # recompute masks and errors once from the final fields
    comp_fwd = compose_displacements(u_fwd, u_bwd)
    comp_bwd = compose_displacements(u_bwd, u_fwd)
    fg_fixed = _foreground_union(fixed)
    fg_moving = _foreground_union(moving)
    alpha_full = _level_alpha(cfg, full_dims, full_dims)
    if cfg.masking:
        tau_fwd = float(comp_fwd.delta[fg_fixed].sum() / max(fg_fixed.sum(), 1) + alpha_full)
        tau_bwd = float(comp_bwd.delta[fg_moving].sum() / max(fg_moving.sum(), 1) + alpha_full)
        m_fwd = smoothed_error(comp_fwd.delta, cfg.fbc.p) >= tau_fwd
        m_bwd = smoothed_error(comp_bwd.delta, cfg.fbc.p) >= tau_bwd
    else:
        tau_fwd = tau_bwd = float("nan")
        m_fwd = np.zeros(full_dims, dtype=bool)
        m_bwd = np.zeros(full_dims, dtype=bool)

    return RegistrationResult(
        disp_fwd=DisplacementField(u_fwd, base.spacing),
        disp_bwd=DisplacementField(u_bwd, base.spacing),
        mask_fwd=CorrespondenceMask(m_fwd),
        mask_bwd=CorrespondenceMask(m_bwd),
        fb_err_fwd=FbError(comp_fwd.delta, base.spacing),
        fb_err_bwd=FbError(comp_bwd.delta, base.spacing),
        tau_fwd=tau_fwd,
        tau_bwd=tau_bwd,
        trace=trace,
        wall_time=time.perf_counter() - t0,
    )


def register_pair(moving: Volume, fixed: Volume,
                  cfg: Optional[RegistrationConfig] = None) -> RegistrationResult:
    """Register one volume pair (moving = baseline, fixed = follow-up)."""
    return register_multichannel([moving], [fixed], cfg)
