"""Rotation algebra on unit quaternions plus SO(3) sampling utilities.

Quaternions are numpy arrays in scalar-first order ``(w, x, y, z)``; all
functions accept a single quaternion of shape ``(4,)`` or a batch ``(N, 4)``
and keep results unit-normalized. The sign convention is canonical
(``w >= 0``, ties broken by the first nonzero component) so that a rotation
has exactly one representative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Rescale to unit norm. Raises on (near-)zero input."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize zero quaternion")
    return q / n


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Pick the sign representative with w >= 0 (tie: first nonzero >= 0)."""
    q = quat_normalize(q)
    single = q.ndim == 1
    q2 = np.atleast_2d(q)
    sign = np.ones(len(q2))
    decided = np.zeros(len(q2), dtype=bool)
    for col in range(4):
        vals = q2[:, col]
        nonzero = np.abs(vals) > 1e-12
        flip = ~decided & nonzero & (vals < 0)
        sign[flip] = -1.0
        decided |= nonzero
        if decided.all():
            break
    out = q2 * sign[:, None]
    return out[0] if single else out


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b (apply b first, then a), renormalized."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    out = np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )
    return quat_normalize(out)


def axis_angle_quat(axis: np.ndarray, angle: float) -> np.ndarray:
    """Quaternion for a rotation of `angle` radians about a unit `axis`."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ValueError("rotation axis must be nonzero")
    axis = axis / n
    half = 0.5 * float(angle)
    return quat_normalize(np.concatenate([[np.cos(half)], np.sin(half) * axis]))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of q; shape (3,3) or (N,3,3) for batched input."""
    q = quat_normalize(q)
    single = q.ndim == 1
    w, x, y, z = np.moveaxis(np.atleast_2d(q), -1, 0)
    m = np.empty((len(w), 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - z * w)
    m[:, 0, 2] = 2 * (x * z + y * w)
    m[:, 1, 0] = 2 * (x * y + z * w)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - x * w)
    m[:, 2, 0] = 2 * (x * z - y * w)
    m[:, 2, 1] = 2 * (y * z + x * w)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m[0] if single else m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Canonical quaternion of a rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    return quat_canonical(q)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate 3-vector(s) v by quaternion q."""
    r = quat_to_matrix(q)
    return np.asarray(v, dtype=np.float64) @ r.T


def geodesic_angle(a: np.ndarray, b: np.ndarray) -> float | np.ndarray:
    """Angular distance in radians between two orientations, in [0, pi].

    Computed as arccos((tr(Ra^T Rb) - 1) / 2) with the trace argument clamped
    to [-1, 1]; broadcasts over batched quaternion inputs.
    """
    ra = quat_to_matrix(a)
    rb = quat_to_matrix(b)
    tr = np.einsum("...ij,...ij->...", ra, rb)
    c = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    ang = np.arccos(c)
    return float(ang) if np.ndim(ang) == 0 else ang


def quat_angle_from_dots(dots: np.ndarray) -> np.ndarray:
    """Geodesic angle from precomputed quaternion dot products.

    Identity 2*arccos(|<a,b>|); used for large pairwise tables where building
    rotation matrices would be wasteful.
    """
    return 2.0 * np.arccos(np.clip(np.abs(dots), 0.0, 1.0))


def sample_uniform_rotation(rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Haar-uniform random rotation(s): normalized 4-vector of iid normals."""
    q = rng.normal(size=(4,) if n is None else (n, 4))
    return quat_canonical(q)


def sample_perturbation(sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Random small rotation: axis from a normalized 3-Gaussian, angle ~ N(0, sigma^2)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    v = rng.normal(size=3)
    while np.linalg.norm(v) < 1e-12:
        v = rng.normal(size=3)
    alpha = rng.normal(0.0, sigma)
    return axis_angle_quat(v / np.linalg.norm(v), alpha)


# Evaluation-protocol perturbation: per-axis Euler angles with std 15 deg,
# composed x then y then z, rejection-resampled while the total rotation
# exceeds 45 deg. Translation offsets are independent of the rejection loop.
EVAL_EULER_STD = np.deg2rad(15.0)
EVAL_MAX_ANGLE = np.deg2rad(45.0)
EVAL_T_STD_MM = np.array([10.0, 10.0, 50.0])


def _euler_xyz_quats(betas: np.ndarray) -> np.ndarray:
    """Compose per-axis rotations in x, y, z order (x applied first)."""
    half = 0.5 * betas
    c, s = np.cos(half), np.sin(half)
    zeros = np.zeros(len(betas))
    qx = np.stack([c[:, 0], s[:, 0], zeros, zeros], axis=1)
    qy = np.stack([c[:, 1], zeros, s[:, 1], zeros], axis=1)
    qz = np.stack([c[:, 2], zeros, zeros, s[:, 2]], axis=1)
    return quat_mul(qz, quat_mul(qy, qx))


def sample_eval_perturbations(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched pose perturbations (dq (n,4), dt_mm (n,3)) for the eval protocol."""
    dq = np.empty((n, 4))
    pending = np.arange(n)
    while len(pending):
        betas = rng.normal(0.0, EVAL_EULER_STD, size=(len(pending), 3))
        cand = _euler_xyz_quats(betas)
        angles = quat_angle_from_dots(cand[:, 0])
        ok = angles <= EVAL_MAX_ANGLE
        dq[pending[ok]] = cand[ok]
        pending = pending[~ok]
    dt = rng.normal(0.0, 1.0, size=(n, 3)) * EVAL_T_STD_MM
    return quat_canonical(dq), dt


def sample_eval_perturbation(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Pose perturbation (dq, dt_mm) for the relative-refinement protocol."""
    dq, dt = sample_eval_perturbations(rng, 1)
    return dq[0], dt[0]


# ---------------------------------------------------------------------------
# View grid: subdivided-icosahedron viewpoints x evenly spaced in-plane angles


@dataclass(frozen=True)
class ViewGrid:
    """Deterministic orientation grid covering SO(3).

    `quats` is ordered viewpoint-major: entry i*p + j is viewpoint i with
    in-plane step j (p = inplane_steps).
    """

    level: int
    inplane_steps: int
    quats: np.ndarray = field(repr=False)

    @property
    def num_viewpoints(self) -> int:
        return 10 * 4**self.level + 2

    def __len__(self) -> int:
        return len(self.quats)


def icosphere_vertices(level: int) -> np.ndarray:
    """Unit vertices of an icosahedron subdivided `level` times (10*4^k+2 points)."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    for _ in range(level):
        verts = list(verts)
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            if key not in midpoint_cache:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                midpoint_cache[key] = len(verts)
                verts.append(m)
            return midpoint_cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces)
        verts = np.array(verts)
    return np.asarray(verts)


def _viewpoint_quats(directions: np.ndarray) -> np.ndarray:
    """Rotations mapping model-frame view directions onto the camera axis.

    The camera looks down +z with the object in front of it, so each model
    direction d (object -> camera) must map to (0, 0, -1).
    """
    d = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    c = -d[:, 2]  # dot with (0, 0, -1)
    axis = np.cross(d, np.array([0.0, 0.0, -1.0]))
    out = np.zeros((len(d), 4))
    regular = np.abs(c) < 1.0 - 1e-12
    ang = np.arccos(np.clip(c[regular], -1.0, 1.0))
    a = axis[regular]
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    out[regular, 0] = np.cos(ang / 2)
    out[regular, 1:] = np.sin(ang / 2)[:, None] * a
    out[c >= 1.0 - 1e-12] = quat_identity()
    out[c <= -1.0 + 1e-12] = np.array([0.0, 1.0, 0.0, 0.0])  # half turn about x
    return out


def build_view_grid(level: int, inplane_steps: int) -> ViewGrid:
    """Orientation grid: icosphere viewpoints x `inplane_steps` in-plane angles.

    Level 4 with 36 in-plane steps gives the full 92232-entry grid used for
    dense codebooks. Ordering is deterministic: viewpoint-major, in-plane
    minor.
    """
    if not 0 <= level <= 5:
        raise ValueError("subdivision level must be in [0, 5]")
    if inplane_steps < 1:
        raise ValueError("inplane_steps must be >= 1")
    base = _viewpoint_quats(icosphere_vertices(level))
    half = np.pi * np.arange(inplane_steps) / inplane_steps
    inplane = np.zeros((inplane_steps, 4))
    inplane[:, 0] = np.cos(half)
    inplane[:, 3] = np.sin(half)  # in-plane = rotation about the camera z axis
    quats = quat_mul(inplane[None, :, :], base[:, None, :]).reshape(-1, 4)
    return ViewGrid(level=level, inplane_steps=inplane_steps, quats=quat_canonical(quats))


def grid_spacing(grid: ViewGrid, sample: int = 512, rng: np.random.Generator | None = None) -> float:
    """Median nearest-neighbor geodesic distance, from a random entry sample."""
    rng = rng or np.random.default_rng(0)
    n = len(grid)
    idx = rng.choice(n, size=min(sample, n), replace=False)
    dots = grid.quats[idx] @ grid.quats.T
    ang = quat_angle_from_dots(dots)
    ang[np.arange(len(idx)), idx] = np.inf
    return float(np.median(ang.min(axis=1)))
