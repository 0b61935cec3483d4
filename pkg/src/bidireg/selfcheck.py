"""Built-in verification battery: interpolation oracles, filter-oracle
equivalence, and gradient-vs-finite-difference checks for every loss term.

Runnable from the CLI (`bidireg selfcheck`); each check prints one
PASS/FAIL line. The quick mode shrinks sizes and counts to stay well
under half a minute.
"""
from __future__ import annotations

from typing import Callable, List, NamedTuple

import numpy as np

from . import _interp
from .fbc import FbcParams, absent_mask, compose_displacements, fb_error, fb_threshold
from .field import DisplacementField, jacobian_det, resample_field, warp
from .losses import (LossWeights, _diffusion_raw, _inverse_consistency_raw,
                     _masked_ncc_raw, _similarity_raw, _total_loss_raw)
from .metrics import LandmarkSet, neg_jacobian_pct, robustness, tre
from .volume import ForegroundMask, Volume, foreground


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str


def _smooth_field(rng, dims, amp=0.8, offset=(0.0, 0.0, 0.0)):
    from scipy.ndimage import gaussian_filter
    u = rng.standard_normal((3,) + dims)
    for c in range(3):
        u[c] = gaussian_filter(u[c], 1.5)
    u *= amp / max(np.abs(u).max(), 1e-12)
    for c in range(3):
        u[c] += offset[c]
    return u


def _rel_err(a, f):
    denom = max(abs(a), abs(f), 1e-10)
    return abs(a - f) / denom


def _fd_check(value_fn, arrays: List[np.ndarray], grads: List[np.ndarray],
              rng, n_probes, h, skip: Callable = None):
    """Compare analytic grads against central differences on random entries."""
    worst = 0.0
    probed = 0
    tries = 0
    while probed < n_probes and tries < 20 * n_probes:
        tries += 1
        ai = rng.integers(len(arrays))
        arr = arrays[ai]
        flat = rng.integers(arr.size)
        idx = np.unravel_index(flat, arr.shape)
        if skip is not None and skip(ai, idx):
            continue
        orig = arr[idx]
        arr[idx] = orig + h
        f_plus = value_fn()
        arr[idx] = orig - h
        f_minus = value_fn()
        arr[idx] = orig
        fd = (f_plus - f_minus) / (2.0 * h)
        an = grads[ai][idx]
        if abs(fd) < 1e-9 and abs(an) < 1e-9:
            continue
        worst = max(worst, _rel_err(an, fd))
        probed += 1
    return worst, probed


# --------------------------------------------------------------- oracles

def _check_trilinear(rng, quick):
    dims = (4, 4, 4)
    vol = Volume(rng.uniform(0, 1, dims))
    n = 20 if quick else 100
    pts = rng.uniform(0.0, 3.0, size=(3, n))
    cache = _interp.CellCache(pts, dims)
    got = cache.interpolate(vol.data)
    worst = 0.0
    for k in range(n):
        x, y, z = pts[:, k]
        i, j, l = int(x), int(y), int(z)
        i, j, l = min(i, 2), min(j, 2), min(l, 2)
        fx, fy, fz = x - i, y - j, z - l
        want = 0.0
        for a in (0, 1):
            for b in (0, 1):
                for d in (0, 1):
                    w = ((fx if a else 1 - fx) * (fy if b else 1 - fy)
                         * (fz if d else 1 - fz))
                    want += w * vol.data[i + a, j + b, l + d]
        worst = max(worst, abs(want - got[k]))
    ok = worst < 1e-6
    return CheckResult("trilinear corner-sum oracle", ok, f"max |diff| = {worst:.2e}")


def _check_warp_identity(rng, quick):
    dims = (6, 7, 5)
    vol = Volume(rng.uniform(0, 1, dims))
    out = warp(vol, DisplacementField.zeros(dims))
    ok = np.array_equal(out.data, vol.data)
    return CheckResult("warp with zero field is bit-exact", ok, "")


def _check_jacobian(rng, quick):
    dims = (8, 8, 8)
    det0 = jacobian_det(DisplacementField.zeros(dims)).data
    ok1 = np.allclose(det0, 1.0, atol=1e-12)
    grid = _interp.identity_grid(dims)
    u = np.zeros((3,) + dims)
    u[0] = 0.1 * grid[0]
    u[1] = 0.1 * grid[1]
    u[2] = 0.1 * grid[2]
    det = jacobian_det(DisplacementField(u)).data
    interior = det[1:-1, 1:-1, 1:-1]
    ok2 = np.allclose(interior, 1.1 ** 3, atol=1e-10)
    return CheckResult("jacobian determinant analytic cases", ok1 and ok2,
                       f"identity ok={ok1}, expansion ok={ok2}")


def _check_field_resample(rng, quick):
    u = DisplacementField(np.stack([np.ones((8, 8, 8)),
                                    np.zeros((8, 8, 8)),
                                    np.zeros((8, 8, 8))]))
    up = resample_field(u, (16, 16, 16))
    ok = np.allclose(up.data[0], 2.0) and np.allclose(up.data[1:], 0.0)
    return CheckResult("field upsample rescales vectors by dim ratio", ok, "")


def _naive_fbc(u_fwd, u_bwd, fg, alpha, p):
    """Per-voxel reference implementation of the error/threshold/mask chain."""
    dims = u_fwd.shape[1:]
    nx, ny, nz = dims
    delta = np.zeros(dims)
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                q = np.array([x, y, z], dtype=float) + u_fwd[:, x, y, z]
                val = np.zeros(3)
                qc = np.minimum(np.maximum(q, 0), np.array(dims) - 1.0)
                i0 = np.minimum(qc.astype(int), np.array(dims) - 2)
                f = qc - i0
                for a in (0, 1):
                    for b in (0, 1):
                        for d in (0, 1):
                            w = ((f[0] if a else 1 - f[0])
                                 * (f[1] if b else 1 - f[1])
                                 * (f[2] if d else 1 - f[2]))
                            val += w * u_bwd[:, i0[0] + a, i0[1] + b, i0[2] + d]
                delta[x, y, z] = np.linalg.norm(u_fwd[:, x, y, z] + val)
    tau = delta[fg].mean() + alpha
    size = 2 * p + 1
    sm = np.zeros(dims)
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                acc = 0.0
                for dx in range(-p, p + 1):
                    for dy in range(-p, p + 1):
                        for dz in range(-p, p + 1):
                            xx, yy, zz = x + dx, y + dy, z + dz
                            if 0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz:
                                acc += delta[xx, yy, zz]
                sm[x, y, z] = acc / size ** 3
    return delta, tau, sm >= tau


def _check_fbc_oracle(rng, quick):
    n_cases = 2 if quick else 5
    dims = (6, 6, 6) if quick else (8, 8, 8)
    params = FbcParams(alpha=0.2, p=2)
    worst = 0.0
    masks_equal = True
    for _ in range(n_cases):
        u_fwd = _smooth_field(rng, dims, amp=1.0, offset=(0.3, -0.2, 0.1))
        u_bwd = _smooth_field(rng, dims, amp=1.0, offset=(-0.25, 0.15, 0.05))
        fg = rng.uniform(size=dims) > 0.3
        if not fg.any():
            fg[0, 0, 0] = True
        ref_delta, ref_tau, ref_mask = _naive_fbc(u_fwd, u_bwd, fg, 0.2, 2)
        ferr = fb_error(DisplacementField(u_fwd), DisplacementField(u_bwd))
        tau = fb_threshold(ferr, ForegroundMask(fg), params)
        mask = absent_mask(ferr, tau, params)
        worst = max(worst, np.abs(ferr.data - ref_delta).max(), abs(tau - ref_tau))
        masks_equal = masks_equal and np.array_equal(mask.data, ref_mask)
    ok = worst < 1e-10 and masks_equal
    return CheckResult("fb error/threshold/mask vs naive oracle", ok,
                       f"max |diff| = {worst:.2e}, masks equal = {masks_equal}")


def _check_uniform_delta(rng, quick):
    dims = (10, 10, 10)
    params = FbcParams(alpha=0.1, p=2)
    ok = True
    for c in (0.5, 2.0):
        u_fwd = np.full((3,) + dims, c / np.sqrt(3.0))
        u_bwd = np.zeros((3,) + dims)
        ferr = fb_error(DisplacementField(u_fwd), DisplacementField(u_bwd))
        fg = ForegroundMask(np.ones(dims, dtype=bool))
        tau = fb_threshold(ferr, fg, params)
        ok = ok and not absent_mask(ferr, tau, params).data.any()
    return CheckResult("uniform fb error yields empty mask", ok, "")


def _check_ncc_value(rng, quick):
    dims = (12, 12, 12)
    vol = rng.uniform(0, 1, dims)
    valid = np.ones(dims, dtype=bool)
    v_self, _, _ = _masked_ncc_raw(vol, vol.copy(), valid, 2)
    ok1 = v_self > 0.98
    v_aff, _, _ = _masked_ncc_raw(vol, 2.5 * vol + 0.7, valid, 2)
    ok2 = abs(v_aff - v_self) < 1e-4
    _, _, degen = _masked_ncc_raw(vol, vol.copy(), np.zeros(dims, bool), 2)
    return CheckResult("ncc self-similarity / affine invariance", ok1 and ok2 and degen,
                       f"self = {v_self:.5f}, affine shift = {abs(v_aff - v_self):.2e}")


# ------------------------------------------------------------- gradients

def _check_diffusion_grad(rng, quick, flip=False):
    dims = (6, 6, 6) if quick else (10, 10, 10)
    u = _smooth_field(rng, dims, amp=1.2)
    _, grad = _diffusion_raw(u)
    if flip:
        grad = -grad
    worst, probed = _fd_check(lambda: _diffusion_raw(u)[0], [u], [grad],
                              rng, 8 if quick else 20, 1e-5)
    ok = probed > 0 and worst < 1e-6
    return CheckResult("diffusion gradient vs finite differences", ok,
                       f"worst rel err = {worst:.2e} over {probed} probes")


def _check_ncc_grad(rng, quick):
    dims = (8, 8, 8)
    target = rng.uniform(0, 1, dims)
    warped = rng.uniform(0, 1, dims)
    valid = rng.uniform(size=dims) > 0.2
    _, grad, _ = _masked_ncc_raw(target, warped, valid, 2)
    worst, probed = _fd_check(
        lambda: _masked_ncc_raw(target, warped, valid, 2)[0],
        [warped], [grad], rng, 10 if quick else 25, 1e-4)
    ok = probed > 0 and worst < 1e-4
    return CheckResult("masked ncc gradient wrt warped", ok,
                       f"worst rel err = {worst:.2e} over {probed} probes")


def _interior_skip(fields, dims, margin=2):
    def skip(ai, idx):
        _, x, y, z = idx
        if not (margin <= x < dims[0] - margin and margin <= y < dims[1] - margin
                and margin <= z < dims[2] - margin):
            return True
        # stay away from cell boundaries so the interpolant is smooth
        for u in fields:
            q = np.array([x, y, z], dtype=float) + u[:, x, y, z]
            frac = q - np.floor(q)
            if np.any(frac < 0.05) or np.any(frac > 0.95):
                return True
        return False
    return skip


def _check_similarity_grad(rng, quick):
    dims = (8, 8, 8) if quick else (10, 10, 10)
    from scipy.ndimage import gaussian_filter
    moving = gaussian_filter(rng.uniform(0, 1, dims), 1.0)
    fixed = gaussian_filter(rng.uniform(0, 1, dims), 1.0)
    u_fwd = _smooth_field(rng, dims, amp=0.6, offset=(0.35, 0.4, 0.3))
    u_bwd = _smooth_field(rng, dims, amp=0.6, offset=(0.4, 0.35, 0.45))
    valid = np.ones(dims, dtype=bool)

    def value():
        ident = _interp.identity_grid(dims)
        cf = _interp.CellCache(ident + u_fwd, dims)
        cb = _interp.CellCache(ident + u_bwd, dims)
        v, _, _, _ = _similarity_raw([moving], [fixed], valid, valid, 2, cf, cb)
        return v

    ident = _interp.identity_grid(dims)
    cf = _interp.CellCache(ident + u_fwd, dims)
    cb = _interp.CellCache(ident + u_bwd, dims)
    _, g_fwd, g_bwd, _ = _similarity_raw([moving], [fixed], valid, valid, 2, cf, cb)
    worst, probed = _fd_check(value, [u_fwd, u_bwd], [g_fwd, g_bwd], rng,
                              10 if quick else 25, 1e-4,
                              skip=_interior_skip([u_fwd, u_bwd], dims))
    ok = probed > 0 and worst < 1e-3
    return CheckResult("similarity gradient wrt both fields", ok,
                       f"worst rel err = {worst:.2e} over {probed} probes")


def _check_inv_grad(rng, quick):
    dims = (8, 8, 8) if quick else (10, 10, 10)
    u_fwd = _smooth_field(rng, dims, amp=0.5, offset=(0.4, 0.3, 0.35))
    u_bwd = _smooth_field(rng, dims, amp=0.5, offset=(0.3, 0.45, 0.4))
    valid = np.ones(dims, dtype=bool)

    def value():
        cf = compose_displacements(u_fwd, u_bwd, need_grads=True)
        cb = compose_displacements(u_bwd, u_fwd, need_grads=True)
        return _inverse_consistency_raw(cf, cb, valid, valid)[0]

    cf = compose_displacements(u_fwd, u_bwd, need_grads=True)
    cb = compose_displacements(u_bwd, u_fwd, need_grads=True)
    if min(cf.delta.min(), cb.delta.min()) < 1e-3:
        return CheckResult("inverse-consistency gradient", False,
                           "test instance degenerate (delta near zero)")
    _, g_fwd, g_bwd = _inverse_consistency_raw(cf, cb, valid, valid)
    worst, probed = _fd_check(value, [u_fwd, u_bwd], [g_fwd, g_bwd], rng,
                              10 if quick else 25, 1e-4,
                              skip=_interior_skip([u_fwd, u_bwd], dims))
    ok = probed > 0 and worst < 1e-3
    return CheckResult("inverse-consistency gradient wrt both fields", ok,
                       f"worst rel err = {worst:.2e} over {probed} probes")


def _check_metrics(rng, quick):
    ids = np.array([0])
    a = LandmarkSet(ids, np.array([[0.0, 0.0, 0.0]]))
    b = LandmarkSet(ids, np.array([[3.0, 4.0, 0.0]]))
    _, d, mean, _ = tre(a, b)
    ok1 = mean == 5.0
    ok2 = robustness(np.array([1.0, 2, 3, 4]), np.array([0.5, 1, 4, 3.9])) == 0.75
    ok3 = neg_jacobian_pct(DisplacementField.zeros((6, 6, 6))) == 0.0
    grid = _interp.identity_grid((6, 6, 6))
    u = np.zeros((3, 6, 6, 6))
    u[0] = -2.0 * grid[0]
    ok4 = neg_jacobian_pct(DisplacementField(u)) == 100.0
    return CheckResult("metric unit cases (3-4-5, counts, folding)",
                       ok1 and ok2 and ok3 and ok4, "")


def run_selfcheck(quick: bool = False, seed: int = 0,
                  _flip_diffusion_grad: bool = False) -> List[CheckResult]:
    """Run every check; returns the result list (all printed by the CLI)."""
    rng = np.random.default_rng(seed)
    results = [
        _check_trilinear(rng, quick),
        _check_warp_identity(rng, quick),
        _check_jacobian(rng, quick),
        _check_field_resample(rng, quick),
        _check_fbc_oracle(rng, quick),
        _check_uniform_delta(rng, quick),
        _check_ncc_value(rng, quick),
        _check_diffusion_grad(rng, quick, flip=_flip_diffusion_grad),
        _check_ncc_grad(rng, quick),
        _check_similarity_grad(rng, quick),
        _check_inv_grad(rng, quick),
        _check_metrics(rng, quick),
    ]
    return results
