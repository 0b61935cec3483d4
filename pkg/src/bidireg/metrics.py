"""Registration quality metrics: TRE, robustness, folding fraction.

Landmarks are physical-mm coordinates; displacement fields are voxel
units, so conversion happens here via the field's spacing.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import _interp
from .field import DisplacementField, jacobian_det
from .volume import Volume


@dataclass(frozen=True)
class LandmarkSet:
    """Paired-id landmarks in physical mm coordinates.

    frame tags which scan the coordinates live in ("baseline" for the
    moving/pre-operative scan, "followup" for the fixed scan).
    """

    ids: np.ndarray
    points_mm: np.ndarray
    frame: str = "followup"

    def __post_init__(self):
        ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        pts = np.ascontiguousarray(self.points_mm, dtype=np.float64)
        if ids.ndim != 1 or pts.shape != (ids.size, 3):
            raise ValueError("landmarks need ids (N,) and points (N, 3)")
        if len(np.unique(ids)) != ids.size:
            raise ValueError("landmark ids must be unique")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark positions must be finite")
        ids.setflags(write=False)
        pts.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "points_mm", pts)

    def __len__(self):
        return self.ids.size


def propagate_landmarks(lms: LandmarkSet, disp: DisplacementField,
                        spacing=None):
    """Map each landmark x -> x + u(x) through the field, in mm.

    The field is trilinearly interpolated at the landmark's voxel
    coordinate. Landmarks outside the grid's physical extent are excluded
    and reported. Returns (propagated LandmarkSet, excluded id list).
    """
    sp = np.asarray(spacing if spacing is not None else disp.spacing, dtype=np.float64)
    dims = np.asarray(disp.dims, dtype=np.float64)
    vox = lms.points_mm / sp
    inside = np.all((vox >= 0.0) & (vox <= dims - 1.0), axis=1)
    excluded = [int(i) for i in lms.ids[~inside]]
    vox_in = vox[inside]
    cache = _interp.CellCache(vox_in.T, disp.dims)
    u = np.stack([cache.interpolate(disp.data[c]) for c in range(3)], axis=1)
    new_mm = (vox_in + u) * sp
    frame = "baseline" if lms.frame == "followup" else "followup"
    return LandmarkSet(lms.ids[inside], new_mm, frame), excluded


def tre(a: LandmarkSet, b: LandmarkSet):
    """Per-landmark Euclidean distance in mm between matching ids.

    Returns (ids, distances, mean, std); raises if the id sets differ.
    """
    if set(a.ids.tolist()) != set(b.ids.tolist()):
        missing = sorted(set(a.ids.tolist()) ^ set(b.ids.tolist()))
        raise ValueError(f"landmark ids do not match; unmatched: {missing}")
    order_a = np.argsort(a.ids)
    order_b = np.argsort(b.ids)
    d = np.linalg.norm(a.points_mm[order_a] - b.points_mm[order_b], axis=1)
    return a.ids[order_a], d, float(d.mean()), float(d.std())


def robustness(tre_before: np.ndarray, tre_after: np.ndarray) -> float:
    """Fraction of landmarks whose TRE strictly improved."""
    before = np.asarray(tre_before, dtype=np.float64)
    after = np.asarray(tre_after, dtype=np.float64)
    if before.shape != after.shape or before.ndim != 1:
        raise ValueError("before/after TRE arrays must be equal-length 1D")
    if before.size == 0:
        raise ValueError("robustness needs at least one landmark")
    return float((after < before).sum() / before.size)


def neg_jacobian_pct(u: DisplacementField) -> float:
    """Percentage of voxels with Jacobian determinant <= 0."""
    det = jacobian_det(u).data
    return float(100.0 * (det <= 0.0).sum() / det.size)


def near_tumor_split(lms: LandmarkSet, tumor_mask: Volume,
                     radius_mm: float = 30.0):
    """Partition landmark ids into (near, far) of a dilated tumor mask.

    Near means within `radius_mm` of any tumor voxel, measured with a
    Euclidean distance transform under the mask's spacing.
    """
    mask = tumor_mask.data > 0
    if not mask.any():
        return [], [int(i) for i in lms.ids]
    dist = distance_transform_edt(~mask, sampling=tumor_mask.spacing)
    sp = np.asarray(tumor_mask.spacing)
    dims = np.asarray(tumor_mask.dims)
    vox = np.rint(lms.points_mm / sp).astype(np.int64)
    vox = np.clip(vox, 0, dims - 1)
    near, far = [], []
    for i, v in zip(lms.ids, vox):
        (near if dist[tuple(v)] <= radius_mm else far).append(int(i))
    return near, far


@dataclass
class MetricsReport:
    """Aggregate evaluation numbers for one registered pair."""

    tre_per_landmark: Dict[int, float]
    tre_mean: float
    tre_std: float
    robustness: float
    neg_jac_pct: float
    wall_time: float = 0.0
    excluded_ids: List[int] = dc_field(default_factory=list)
    tre_mean_near: Optional[float] = None
    tre_mean_far: Optional[float] = None

    def to_dict(self):
        return {
            "tre_mean": self.tre_mean,
            "tre_std": self.tre_std,
            "robustness": self.robustness,
            "neg_jac_pct": self.neg_jac_pct,
            "wall_time": self.wall_time,
            "excluded_ids": self.excluded_ids,
            "tre_mean_near": self.tre_mean_near,
            "tre_mean_far": self.tre_mean_far,
            "tre_per_landmark": {str(k): v for k, v in self.tre_per_landmark.items()},
        }

    def csv_row(self):
        cols = ["tre_mean", "tre_std", "robustness", "neg_jac_pct",
                "wall_time", "n_landmarks", "n_excluded",
                "tre_mean_near", "tre_mean_far"]
        vals = [self.tre_mean, self.tre_std, self.robustness, self.neg_jac_pct,
                self.wall_time, len(self.tre_per_landmark), len(self.excluded_ids),
                self.tre_mean_near, self.tre_mean_far]
        fmt = ["" if v is None else f"{v:.6g}" if isinstance(v, float) else str(v)
               for v in vals]
        return ",".join(cols) + "\n" + ",".join(fmt) + "\n"


def evaluate_registration(disp_fwd: DisplacementField, lms_fixed: LandmarkSet,
                          lms_moving: LandmarkSet,
                          tumor_mask: Optional[Volume] = None,
                          wall_time: float = 0.0) -> MetricsReport:
    """Full metrics for one pair: propagate fixed-frame landmarks through
    the forward field and compare against the moving-frame references."""
    propagated, excluded = propagate_landmarks(lms_fixed, disp_fwd)
    keep = np.isin(lms_moving.ids, propagated.ids)
    ref = LandmarkSet(lms_moving.ids[keep], lms_moving.points_mm[keep],
                      lms_moving.frame)
    ids, d_after, mean_after, std_after = tre(propagated, ref)

    keep_f = np.isin(lms_fixed.ids, propagated.ids)
    init = LandmarkSet(lms_fixed.ids[keep_f], lms_fixed.points_mm[keep_f],
                       lms_fixed.frame)
    _, d_before, _, _ = tre(init, ref)
    rob = robustness(d_before, d_after)

    near_mean = far_mean = None
    if tumor_mask is not None:
        near, far = near_tumor_split(ref, tumor_mask)
        by_id = dict(zip(ids.tolist(), d_after.tolist()))
        if near:
            near_mean = float(np.mean([by_id[i] for i in near]))
        if far:
            far_mean = float(np.mean([by_id[i] for i in far]))

    return MetricsReport(
        tre_per_landmark=dict(zip(ids.tolist(), d_after.tolist())),
        tre_mean=mean_after, tre_std=std_after, robustness=rob,
        neg_jac_pct=neg_jacobian_pct(disp_fwd), wall_time=wall_time,
        excluded_ids=excluded, tre_mean_near=near_mean, tre_mean_far=far_mean,
    )
