"""Pose-error metrics and recall aggregation.

Angular error uses arccos((tr(R_gt^T R_est) - 1) / 2). ADD is the mean 3D
distance of model points under the two poses; Proj2D the mean reprojected
pixel distance. VSD compares visible-surface depth maps within a tolerance
and is invariant to appearance ambiguities. Poses are (rotation, t_mm) where
the rotation may be a quaternion (4,) or matrix (3, 3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .mesh import TriMesh

VSD_TAU_MM = 20.0
VSD_RECALL_THRESHOLD = 0.3
VSD_VISIBILITY_EPS_MM = 5.0
MIN_VISIBILITY = 0.10
POINT_CAP = 10_000


def _as_matrix(rot: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape == (4,):
        return so3.quat_to_matrix(rot)
    if rot.shape == (3, 3):
        return rot
    raise ValueError("rotation must be a quaternion (4,) or matrix (3,3)")


def _model_points(model) -> np.ndarray:
    pts = model.vertices if isinstance(model, TriMesh) else np.asarray(model, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("no model points")
    if len(pts) > POINT_CAP:
        step = -(-len(pts) // POINT_CAP)
        pts = pts[::step]
    return pts


def rotation_error(rot_gt, rot_est) -> float:
    """Absolute angular error in radians."""
    r_gt, r_est = _as_matrix(rot_gt), _as_matrix(rot_est)
    tr = float(np.trace(r_gt.T @ r_est))
    return float(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))


def add_error(model, pose_gt, pose_est) -> float:
    """Mean 3D distance of model points between the two poses, in mm."""
    pts = _model_points(model)
    r_gt, t_gt = _as_matrix(pose_gt[0]), np.asarray(pose_gt[1], dtype=np.float64)
    r_est, t_est = _as_matrix(pose_est[0]), np.asarray(pose_est[1], dtype=np.float64)
    d = pts @ (r_gt - r_est).T + (t_gt - t_est)
    return float(np.linalg.norm(d, axis=1).mean())


def proj2d_error(model, cam, pose_gt, pose_est) -> float:
    """Mean reprojection distance of model points in pixels."""
    pts = _model_points(model)

    def project(pose):
        r, t = _as_matrix(pose[0]), np.asarray(pose[1], dtype=np.float64)
        p = pts @ r.T + t
        if np.any(p[:, 2] <= 0):
            raise ValueError("model point behind the camera")
        return np.stack(
            [cam.fx * p[:, 0] / p[:, 2] + cam.cx, cam.fy * p[:, 1] / p[:, 2] + cam.cy],
            axis=1,
        )

    return float(np.linalg.norm(project(pose_gt) - project(pose_est), axis=1).mean())


def vsd_error(
    gt_depth: np.ndarray,
    est_depth: np.ndarray,
    scene_depth: np.ndarray | None = None,
    tau_mm: float = VSD_TAU_MM,
    vis_eps_mm: float = VSD_VISIBILITY_EPS_MM,
) -> tuple[float, float]:
    """Visible surface discrepancy and the ground-truth visibility fraction.

    Without an external scene depth the ground-truth render is the scene
    (full visibility). A pixel of a render is visible where the scene has no
    surface or the render is within `vis_eps_mm` of it.
    """
    gt = np.asarray(gt_depth, dtype=np.float64)
    est = np.asarray(est_depth, dtype=np.float64)
    if gt.shape != est.shape:
        raise ValueError("depth maps must share a shape")
    scene = gt if scene_depth is None else np.asarray(scene_depth, dtype=np.float64)

    def visible(depth):
        return (depth > 0) & ((scene <= 0) | (depth <= scene + vis_eps_mm))

    vis_gt = visible(gt)
    vis_est = visible(est)
    union = vis_gt | vis_est
    if not union.any():
        raise ValueError("object invisible in both renders")
    inter = vis_gt & vis_est
    bad = np.ones(union.sum(), dtype=bool)
    inter_in_union = inter[union]
    bad[inter_in_union] = np.abs(gt[inter] - est[inter]) >= tau_mm
    gt_px = (gt > 0).sum()
    visibility = float(vis_gt.sum() / gt_px) if gt_px else 0.0
    return float(bad.mean()), visibility


@dataclass
class PoseTrial:
    """One estimation trial's errors; unavailable metrics stay NaN."""

    object_id: str
    e_r_rad: float
    t_err_mm: float
    add_mm: float = np.nan
    proj2d_px: float = np.nan
    e_vsd: float = np.nan
    visibility: float = 1.0
    diameter_mm: float = np.nan
    tag: str = ""


@dataclass
class RecallReport:
    thresholds: dict
    recalls: dict
    counts: dict
    by_tag: dict = field(default_factory=dict)


DEFAULT_THRESHOLDS = {
    "deg5cm5": (np.deg2rad(5.0), 50.0),
    "add_frac": 0.1,
    "proj2d_px": 5.0,
    "vsd": VSD_RECALL_THRESHOLD,
}


def _recall_fractions(trials: list[PoseTrial], th: dict) -> tuple[dict, dict]:
    deg, cm = th["deg5cm5"]
    pose_ok = [(t.e_r_rad < deg) and (t.t_err_mm < cm) for t in trials]

    add_ts = [t for t in trials if np.isfinite(t.add_mm) and np.isfinite(t.diameter_mm)]
    add_ok = [t.add_mm < th["add_frac"] * t.diameter_mm for t in add_ts]

    proj_ts = [t for t in trials if np.isfinite(t.proj2d_px)]
    proj_ok = [t.proj2d_px < th["proj2d_px"] for t in proj_ts]

    vsd_ts = [t for t in trials if np.isfinite(t.e_vsd) and t.visibility > MIN_VISIBILITY]
    vsd_ok = [t.e_vsd < th["vsd"] for t in vsd_ts]

    def frac(oks):
        return float(np.mean(oks)) if oks else float("nan")

    recalls = {
        "deg5cm5": frac(pose_ok),
        "add": frac(add_ok),
        "proj2d": frac(proj_ok),
        "vsd": frac(vsd_ok),
    }
    counts = {
        "total": len(trials),
        "add_evaluated": len(add_ts),
        "proj2d_evaluated": len(proj_ts),
        "vsd_evaluated": len(vsd_ts),
    }
    return recalls, counts


def recall(trials: list[PoseTrial], thresholds: dict | None = None) -> RecallReport:
    """Recall fractions under the standard thresholds, plus per-tag breakdown."""
    if not trials:
        raise ValueError("need at least one trial")
    th = dict(DEFAULT_THRESHOLDS)
    if thresholds:
        th.update(thresholds)
    recalls, counts = _recall_fractions(trials, th)
    by_tag = {}
    for tag in sorted({t.tag for t in trials if t.tag}):
        sub = [t for t in trials if t.tag == tag]
        r, c = _recall_fractions(sub, th)
        by_tag[tag] = {"recalls": r, "counts": c}
    return RecallReport(thresholds=th, recalls=recalls, counts=counts, by_tag=by_tag)
