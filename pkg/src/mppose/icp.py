"""Depth-assisted pose refinement: point-to-plane ICP with adaptive gating.

Stage one slides the pose along the camera-to-object ray (where monocular
distance estimates err the most); stage two solves the full 6D linearized
point-to-plane system. Correspondences come from projective association into
the destination depth map, and each iteration keeps only residuals within
2.5x the median magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import so3
from .mesh import TriMesh
from .refine import PoseEstimate
from .render import Camera

MIN_DEPTH_PIXELS = 100
MIN_CORRESPONDENCES = 12
ADAPTIVE_FACTOR = 2.5
POINT_BLEND_WEIGHT = 0.1
STOP_ROT_RAD = np.deg2rad(0.01)
STOP_T_MM = 0.01
MAX_ITERS = 30
RAY_STAGE_ITERS = 10


def _cross_matrices(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric [v]_x matrices for an (N, 3) array."""
    c = np.zeros((len(v), 3, 3))
    c[:, 0, 1] = -v[:, 2]
    c[:, 0, 2] = v[:, 1]
    c[:, 1, 0] = v[:, 2]
    c[:, 1, 2] = -v[:, 0]
    c[:, 2, 0] = -v[:, 1]
    c[:, 2, 1] = v[:, 0]
    return c


def depth_to_points(depth: np.ndarray, cam: Camera) -> np.ndarray:
    """Back-project a depth map to camera-frame points (HxWx3; 0 where empty)."""
    h, w = depth.shape
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    z = np.asarray(depth, dtype=np.float64)
    x = (us - cam.cx) / cam.fx * z
    y = (vs - cam.cy) / cam.fy * z
    return np.stack([x, y, z], axis=2)


def depth_normals(depth: np.ndarray, cam: Camera, jump_mm: float = 30.0) -> np.ndarray:
    """Per-pixel surface normals from central differences; NaN where invalid.

    Pixels whose neighborhood crosses a depth discontinuity larger than
    `jump_mm` (object silhouettes) get no normal.
    """
    pts = depth_to_points(depth, cam)
    n = np.full_like(pts, np.nan)
    d = np.asarray(depth, dtype=np.float64)
    du = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv = pts[2:, 1:-1] - pts[:-2, 1:-1]
    cross = np.cross(du, dv)
    lens = np.linalg.norm(cross, axis=2)
    valid = (
        (d[1:-1, 1:-1] > 0)
        & (d[1:-1, 2:] > 0)
        & (d[1:-1, :-2] > 0)
        & (d[2:, 1:-1] > 0)
        & (d[:-2, 1:-1] > 0)
        & (np.abs(d[1:-1, 2:] - d[1:-1, :-2]) < jump_mm)
        & (np.abs(d[2:, 1:-1] - d[:-2, 1:-1]) < jump_mm)
        & (lens > 1e-12)
    )
    unit = cross / np.maximum(lens[..., None], 1e-12)
    # orient toward the camera (normals face the origin)
    dots = (unit * pts[1:-1, 1:-1]).sum(axis=2)
    unit = np.where(dots[..., None] > 0, -unit, unit)
    block = n[1:-1, 1:-1]
    block[valid] = unit[valid]
    return n


def sample_surface_points(
    mesh: TriMesh, count: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted surface samples and their face normals (model frame).

    The normals let the ICP cull samples on surfaces facing away from the
    camera, which a depth map cannot observe.
    """
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    face_n = np.cross(b - a, c - a)
    areas = 0.5 * np.linalg.norm(face_n, axis=1)
    face_n = face_n / np.maximum(np.linalg.norm(face_n, axis=1, keepdims=True), 1e-12)
    probs = areas / areas.sum()
    tri = rng.choice(len(areas), size=count, p=probs)
    r1 = np.sqrt(rng.uniform(size=count))
    r2 = rng.uniform(size=count)
    w0 = 1 - r1
    w1 = r1 * (1 - r2)
    w2 = r1 * r2
    pts = w0[:, None] * a[tri] + w1[:, None] * b[tri] + w2[:, None] * c[tri]
    return pts, face_n[tri]


@dataclass
class _Assoc:
    src_cam: np.ndarray  # transformed source points
    dst_pts: np.ndarray  # associated destination points
    normals: np.ndarray  # destination normals
    residuals: np.ndarray  # point-to-plane residuals


def _associate(src_model, rot, t, dst_pts_img, normals_img, cam, src_normals=None):
    p = src_model @ rot.T + t
    front = p[:, 2] > 1.0
    if src_normals is not None:
        # only surfaces oriented toward the camera can appear in the depth map
        n_cam = src_normals @ rot.T
        front &= (n_cam * p).sum(axis=1) < 0
    u = np.round(cam.fx * p[:, 0] / np.maximum(p[:, 2], 1e-9) + cam.cx).astype(int)
    v = np.round(cam.fy * p[:, 1] / np.maximum(p[:, 2], 1e-9) + cam.cy).astype(int)
    h, w = dst_pts_img.shape[:2]
    ok = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    if not ok.any():
        return None
    u, v, p = u[ok], v[ok], p[ok]
    dst = dst_pts_img[v, u]
    nrm = normals_img[v, u]
    good = (dst[:, 2] > 0) & np.isfinite(nrm).all(axis=1)
    if good.sum() < MIN_CORRESPONDENCES:
        return None
    p, dst, nrm = p[good], dst[good], nrm[good]
    res = ((p - dst) * nrm).sum(axis=1)
    return _Assoc(p, dst, nrm, res)


def _adaptive_keep(res: np.ndarray) -> np.ndarray:
    gate = ADAPTIVE_FACTOR * np.median(np.abs(res))
    keep = np.abs(res) <= max(gate, 1e-9)
    return keep


def _solve_truncated(ata: np.ndarray, atb: np.ndarray, rel_floor: float = 1e-8) -> np.ndarray:
    """Least-squares step with unconstrained eigen-directions zeroed out.

    Gated flat-face geometry often leaves the 6x6 system with near-null
    directions; stepping along them is numerical drift, not information.
    """
    w, v = np.linalg.eigh(ata)
    keep = w > max(w.max(), 1e-12) * rel_floor
    inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    return v @ (inv * (v.T @ -atb))


def icp_point_to_plane(
    src_points: np.ndarray,
    dst_depth: np.ndarray,
    cam: Camera,
    init: PoseEstimate,
    src_normals: np.ndarray | None = None,
    max_iters: int = MAX_ITERS,
) -> PoseEstimate:
    """Refine a pose so the source cloud lands on the observed depth surface.

    `src_points` are model-frame surface points; `dst_depth` is the observed
    depth image in mm. Passing the points' surface normals enables
    visibility culling of samples facing away from the camera.
    """
    if (np.asarray(dst_depth) > 0).sum() < MIN_DEPTH_PIXELS:
        raise ValueError("not enough valid depth pixels for ICP")
    dst_pts = depth_to_points(dst_depth, cam)
    normals = depth_normals(dst_depth, cam)

    rot = so3.quat_to_matrix(init.q)
    t = init.t.astype(np.float64).copy()
    iters_left = max_iters

    # stage 1: distance along the camera->object ray only
    for _ in range(min(RAY_STAGE_ITERS, iters_left)):
        iters_left -= 1
        assoc = _associate(src_points, rot, t, dst_pts, normals, cam, src_normals)
        if assoc is None:
            raise ValueError("insufficient ICP correspondences")
        keep = _adaptive_keep(assoc.residuals)
        res = assoc.residuals[keep]
        nrm = assoc.normals[keep]
        ray = t / np.linalg.norm(t)
        proj = nrm @ ray
        denom = float(proj @ proj)
        if denom < 1e-12:
            break
        lam = -float(proj @ res) / denom
        t = t + lam * ray
        if abs(lam) < STOP_T_MM:
            break

    # stage 2: full 6D point-to-plane
    for _ in range(iters_left):
        assoc = _associate(src_points, rot, t, dst_pts, normals, cam, src_normals)
        if assoc is None:
            raise ValueError("insufficient ICP correspondences")
        keep = _adaptive_keep(assoc.residuals)
        p = assoc.src_cam[keep]
        nrm = assoc.normals[keep]
        res = assoc.residuals[keep]
        if len(res) < MIN_CORRESPONDENCES:
            raise ValueError("insufficient ICP correspondences")
        # rotation acts about the object origin: lever arm is R @ p_model
        lever = p - t
        jac = np.concatenate([np.cross(lever, nrm), nrm], axis=1)  # (N, 6)
        ata = jac.T @ jac
        atb = jac.T @ res
        # weak point-to-point term: flat scenes leave the point-to-plane
        # system blind to sliding within the visible faces; gate it by point
        # distance so cross-face mismatches cannot steer it
        diff = p - assoc.dst_pts[keep]
        dist = np.linalg.norm(diff, axis=1)
        close = dist <= max(ADAPTIVE_FACTOR * np.median(dist), 1.0)
        if close.sum() >= MIN_CORRESPONDENCES:
            w2 = POINT_BLEND_WEIGHT**2
            dpt = diff[close]
            cross = _cross_matrices(lever[close])  # (N, 3, 3) of [lever]_x
            ata[:3, :3] += w2 * np.einsum("nij,nik->jk", cross, cross)
            ata[:3, 3:] += w2 * cross.sum(axis=0)
            ata[3:, :3] += w2 * -cross.sum(axis=0)
            ata[3:, 3:] += w2 * close.sum() * np.eye(3)
            atb[:3] += w2 * np.einsum("nij,nj->i", cross, dpt)
            atb[3:] += w2 * dpt.sum(axis=0)
        xi = _solve_truncated(ata, atb)
        omega, dt = xi[:3], xi[3:]
        angle = float(np.linalg.norm(omega))
        if angle > 1e-12:
            dq = so3.axis_angle_quat(omega / angle, angle)
            rot = so3.quat_to_matrix(dq) @ rot
        t = t + dt
        if angle < STOP_ROT_RAD and np.linalg.norm(dt) < STOP_T_MM:
            break

    return PoseEstimate(q=so3.matrix_to_quat(rot), t=t, score=np.nan)
