"""Synthetic registration pairs with known ground truth.

A case is built from a textured base volume, a smooth diffeomorphic
displacement field, and optional lesion insertions: a bright "tumor" blob
in the moving (baseline) image and a dark "cavity" at the anatomically
corresponding site of the fixed (follow-up) image. Outside the lesions the
fixed image is exactly the warped base volume, so the stored field is an
exact correspondence oracle there.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _interp
from . import io as bio
from .fbc import CorrespondenceMask
from .field import DisplacementField, jacobian_det, warp
from .metrics import LandmarkSet
from .volume import Volume


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 7
    field_amplitude: float = 4.0
    field_smoothness: float = 8.0
    lesion_count: int = 1
    lesion_radius: float = 6.0
    cavity_intensity: float = 0.05
    tumor_intensity: float = 1.0
    n_landmarks: int = 30
    texture: str = "blobs"

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) < 8:
            raise ValueError(f"dims must be 3 values >= 8, got {self.dims}")
        if self.field_amplitude < 0:
            raise ValueError("field_amplitude must be >= 0")
        if self.field_amplitude >= min(dims) / 8:
            raise ValueError(
                f"field_amplitude {self.field_amplitude} too large for dims {dims} "
                f"(must stay below min(dims)/8)")
        if self.field_smoothness <= 0:
            raise ValueError("field_smoothness must be > 0")
        if self.lesion_count < 0 or self.lesion_radius <= 0:
            raise ValueError("lesion_count must be >= 0 and lesion_radius > 0")
        if self.texture not in ("blobs", "checker-smooth"):
            raise ValueError(f"unknown texture {self.texture!r}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    def to_dict(self):
        return {
            "dims": list(self.dims), "spacing": list(self.spacing),
            "seed": self.seed, "field_amplitude": self.field_amplitude,
            "field_smoothness": self.field_smoothness,
            "lesion_count": self.lesion_count,
            "lesion_radius": self.lesion_radius,
            "cavity_intensity": self.cavity_intensity,
            "tumor_intensity": self.tumor_intensity,
            "n_landmarks": self.n_landmarks, "texture": self.texture,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "dims" in d:
            d["dims"] = tuple(d["dims"])
        if "spacing" in d:
            d["spacing"] = tuple(d["spacing"])
        return cls(**d)


@dataclass
class SynthCase:
    """One generated pair plus its oracles.

    gt_disp points from fixed-frame coordinates into the moving frame
    (x_moving = x + gt_disp(x)); it is the ground truth for the forward
    field recovered by registration. Lesion masks are per-frame; landmark
    pairs share ids and satisfy the field exactly.
    """

    moving: Volume
    fixed: Volume
    gt_disp: DisplacementField
    lesion_mask_moving: CorrespondenceMask
    lesion_mask_fixed: CorrespondenceMask
    lms_moving: LandmarkSet
    lms_fixed: LandmarkSet
    lesion_sites_moving: List[Tuple[np.ndarray, float]]
    lesion_sites_fixed: List[Tuple[np.ndarray, float]]
    config: SynthConfig


def random_smooth_field(dims, amplitude, sigma, seed,
                        spacing=(1.0, 1.0, 1.0)) -> DisplacementField:
    """Gaussian-smoothed white noise rescaled to max-norm = amplitude.

    Rejects (and redraws from the same stream) any field whose minimum
    Jacobian determinant is <= 0.1, so accepted fields are comfortably
    diffeomorphic; 10 failures raise a config error.
    """
    dims = tuple(int(n) for n in dims)
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    if amplitude == 0:
        return DisplacementField.zeros(dims, spacing)
    rng = np.random.default_rng(seed)
    for _ in range(10):
        u = rng.standard_normal((3,) + dims)
        for c in range(3):
            u[c] = gaussian_filter(u[c], sigma)
        norm_max = np.sqrt((u * u).sum(axis=0)).max()
        u *= amplitude / norm_max
        fld = DisplacementField(u, spacing)
        if jacobian_det(fld).data.min() > 0.1:
            return fld
    raise ValueError(
        f"could not draw a diffeomorphic field (amplitude {amplitude} too "
        f"large for smoothness {sigma})")


def _blob_texture(dims, rng):
    """Sum of random anisotropic Gaussian bumps over a gently noisy base.

    The low-amplitude smoothed-noise base keeps local windows non-constant
    everywhere so windowed correlation has signal at every voxel.
    """
    nx, ny, nz = dims
    grid = _interp.identity_grid(dims)
    bumps = np.zeros(dims)
    n_bumps = 40
    centers = rng.uniform([0, 0, 0], [nx - 1, ny - 1, nz - 1], size=(n_bumps, 3))
    sigmas = rng.uniform(2.5, 9.0, size=(n_bumps, 3))
    amps = rng.uniform(0.3, 1.0, size=n_bumps)
    for c, s, a in zip(centers, sigmas, amps):
        r2 = sum(((grid[i] - c[i]) / s[i]) ** 2 for i in range(3))
        bumps += a * np.exp(-0.5 * r2)
    lo, hi = bumps.min(), bumps.max()
    bumps = (bumps - lo) / (hi - lo)
    fine = gaussian_filter(rng.standard_normal(dims), 1.2)
    fine /= np.abs(fine).max()
    mid = gaussian_filter(rng.standard_normal(dims), 3.0)
    mid /= np.abs(mid).max()
    return np.clip(0.18 + 0.46 * bumps + 0.18 * fine + 0.18 * mid, 0.02, 1.0)


def _checker_texture(dims, rng):
    grid = _interp.identity_grid(dims)
    period = 8.0
    tex = 1.0
    for a in range(3):
        tex = tex * np.sin(2 * np.pi * grid[a] / period + rng.uniform(0, np.pi))
    tex = gaussian_filter(tex, 1.0)
    return 0.5 + 0.45 * tex / np.abs(tex).max()


def _sphere_weight(dims, center, radius):
    """1 inside radius, linear falloff over one voxel, 0 outside."""
    grid = _interp.identity_grid(dims)
    d = np.sqrt(sum((grid[i] - center[i]) ** 2 for i in range(3)))
    return np.clip(radius + 1.0 - d, 0.0, 1.0), d <= radius


def _pullback_site(u: np.ndarray, target_vox: np.ndarray, dims):
    """Find x with x + u(x) = target by fixed-point iteration."""
    x = target_vox.astype(np.float64).copy()
    for _ in range(30):
        cache = _interp.CellCache(x.reshape(3, 1), dims)
        ux = np.array([cache.interpolate(u[c])[0] for c in range(3)])
        x_new = target_vox - ux
        if np.abs(x_new - x).max() < 1e-6:
            return x_new
        x = x_new
    return x


def make_case(cfg: SynthConfig) -> SynthCase:
    """Generate a full case; deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    dims = cfg.dims
    tex_seed = rng.integers(0, 2 ** 63)
    field_seed = rng.integers(0, 2 ** 63)
    tex_rng = np.random.default_rng(tex_seed)
    if cfg.texture == "blobs":
        base = _blob_texture(dims, tex_rng)
    else:
        base = _checker_texture(dims, tex_rng)

    gt = random_smooth_field(dims, cfg.field_amplitude, cfg.field_smoothness,
                             field_seed, cfg.spacing)

    moving_data = base.copy()
    base_vol = Volume(base, cfg.spacing)
    fixed_data = warp(base_vol, gt).data.copy()

    lesion_moving = np.zeros(dims, dtype=bool)
    lesion_fixed = np.zeros(dims, dtype=bool)
    sites_moving: List[Tuple[np.ndarray, float]] = []
    sites_fixed: List[Tuple[np.ndarray, float]] = []
    margin = cfg.lesion_radius + cfg.field_amplitude + 3.0
    lo = np.full(3, margin)
    hi = np.asarray(dims) - 1 - margin
    if cfg.lesion_count > 0 and np.any(hi <= lo):
        raise ValueError("lesion does not fit inside the volume with margins")

    for _ in range(cfg.lesion_count):
        placed = False
        for _attempt in range(50):
            center_m = rng.uniform(lo, hi)
            if sites_moving and min(np.linalg.norm(center_m - c) for c, _ in
                                    sites_moving) < 3.0 * cfg.lesion_radius:
                continue
            placed = True
            break
        if not placed:
            raise ValueError("could not place lesions under the spacing constraints")
        # bright tumor blob in the moving (baseline) image
        w_m, in_m = _sphere_weight(dims, center_m, cfg.lesion_radius)
        moving_data = (1.0 - w_m) * moving_data + w_m * cfg.tumor_intensity
        lesion_moving |= in_m
        sites_moving.append((center_m, cfg.lesion_radius))
        # cavity at the corresponding fixed-frame site, radius +/-30%
        center_f = _pullback_site(gt.data, center_m, dims)
        radius_f = cfg.lesion_radius * (1.0 + rng.uniform(-0.3, 0.3))
        w_f, in_f = _sphere_weight(dims, center_f, radius_f)
        fixed_data = (1.0 - w_f) * fixed_data + w_f * cfg.cavity_intensity
        lesion_fixed |= in_f
        sites_fixed.append((center_f, radius_f))

    moving = Volume(moving_data, cfg.spacing)
    fixed = Volume(fixed_data, cfg.spacing)

    lms_fixed, lms_moving = _sample_landmarks(
        cfg, rng, fixed.data, gt.data, sites_moving, sites_fixed)

    return SynthCase(
        moving=moving, fixed=fixed, gt_disp=gt,
        lesion_mask_moving=CorrespondenceMask(lesion_moving),
        lesion_mask_fixed=CorrespondenceMask(lesion_fixed),
        lms_moving=lms_moving, lms_fixed=lms_fixed,
        lesion_sites_moving=sites_moving, lesion_sites_fixed=sites_fixed,
        config=cfg,
    )


def write_case(case: SynthCase, outdir):
    """Write the fixture directory consumed by the CLI eval command."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    sp = case.moving.spacing
    bio.write_volume_nifti(case.moving, out / "moving.nii")
    bio.write_volume_nifti(case.fixed, out / "fixed.nii")
    bio.write_field_raw(case.gt_disp, out / "gt_disp.raw")
    bio.write_volume_nifti(Volume(case.lesion_mask_moving.data.astype(np.float64), sp),
                           out / "lesion_mask_moving.nii")
    bio.write_volume_nifti(Volume(case.lesion_mask_fixed.data.astype(np.float64), sp),
                           out / "lesion_mask_fixed.nii")
    bio.write_landmarks_csv(case.lms_moving, out / "landmarks_moving.csv")
    bio.write_landmarks_csv(case.lms_fixed, out / "landmarks_fixed.csv")
    meta = {
        "config": case.config.to_dict(),
        "lesion_sites_moving": [[*map(float, c), float(r)]
                                for c, r in case.lesion_sites_moving],
        "lesion_sites_fixed": [[*map(float, c), float(r)]
                               for c, r in case.lesion_sites_fixed],
    }
    (out / "case.json").write_text(json.dumps(meta, indent=1))


def load_case(casedir) -> SynthCase:
    d = Path(casedir)
    meta = json.loads((d / "case.json").read_text())
    cfg = SynthConfig.from_dict(meta["config"])
    return SynthCase(
        moving=bio.read_volume_nifti(d / "moving.nii"),
        fixed=bio.read_volume_nifti(d / "fixed.nii"),
        gt_disp=bio.read_field_raw(d / "gt_disp.raw"),
        lesion_mask_moving=CorrespondenceMask(
            bio.read_volume_nifti(d / "lesion_mask_moving.nii").data > 0.5),
        lesion_mask_fixed=CorrespondenceMask(
            bio.read_volume_nifti(d / "lesion_mask_fixed.nii").data > 0.5),
        lms_moving=bio.read_landmarks_csv(d / "landmarks_moving.csv", "baseline"),
        lms_fixed=bio.read_landmarks_csv(d / "landmarks_fixed.csv", "followup"),
        lesion_sites_moving=[(np.asarray(s[:3]), s[3])
                             for s in meta["lesion_sites_moving"]],
        lesion_sites_fixed=[(np.asarray(s[:3]), s[3])
                            for s in meta["lesion_sites_fixed"]],
        config=cfg,
    )


def _sample_landmarks(cfg, rng, fixed_data, gt, sites_moving, sites_fixed):
    """Pick fixed-frame voxels with strong gradient, away from lesions and
    borders, and pair them exactly through the ground-truth field."""
    dims = cfg.dims
    gmag = np.sqrt(sum(np.gradient(fixed_data, axis=a) ** 2 for a in range(3)))
    border = int(np.ceil(cfg.field_amplitude)) + 2
    ok = np.zeros(dims, dtype=bool)
    ok[border:dims[0] - border, border:dims[1] - border, border:dims[2] - border] = True
    ok &= fixed_data > 0
    ok &= gmag >= np.quantile(gmag[ok], 0.7)
    grid = _interp.identity_grid(dims)
    keepout = 2.0
    for center, radius in sites_fixed:
        d = np.sqrt(sum((grid[i] - center[i]) ** 2 for i in range(3)))
        ok &= d > radius + keepout
    cand = np.argwhere(ok)
    if cand.shape[0] < cfg.n_landmarks:
        raise ValueError("not enough landmark candidates under the constraints")

    chosen = []
    vox_f = []
    vox_m = []
    order = rng.permutation(cand.shape[0])
    for row in order:
        v = cand[row]
        x_m = v + gt[:, v[0], v[1], v[2]]
        if np.any(x_m < border) or np.any(x_m > np.asarray(dims) - 1 - border):
            continue
        if any(np.linalg.norm(x_m - c) <= r + keepout for c, r in sites_moving):
            continue
        vox_f.append(v.astype(np.float64))
        vox_m.append(x_m)
        chosen.append(len(chosen))
        if len(chosen) == cfg.n_landmarks:
            break
    if len(chosen) < cfg.n_landmarks:
        raise ValueError("not enough landmark candidates under the constraints")

    sp = np.asarray(cfg.spacing)
    ids = np.arange(cfg.n_landmarks, dtype=np.int64)
    lms_fixed = LandmarkSet(ids, np.asarray(vox_f) * sp, "followup")
    lms_moving = LandmarkSet(ids, np.asarray(vox_m) * sp, "baseline")
    return lms_fixed, lms_moving
