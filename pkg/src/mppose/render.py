"""Deterministic CPU rasterizer: RGB + depth + mask views of a mesh.

Conventions: the camera sits at the origin looking down +z, x right, y down.
A pose (q, t) maps model points into the camera frame, p_cam = R(q) p + t,
with t in millimetres. Pixel (row r, col c) has its center at the continuous
image point (u=c, v=r); projection is u = fx*x/z + cx, v = fy*y/z + cy.
Depth images hold camera-frame z in mm with 0 meaning "no surface".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import so3
from .mesh import TriMesh

PHONG_EXPONENT = 16.0
NEAR_PLANE_MM = 1.0


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]]
        )

    @classmethod
    def default(cls, size: int = 64) -> "Camera":
        """Desk camera: centered principal point, focal scaled from a 128px base."""
        f = 175.0 * size / 128.0
        return cls(fx=f, fy=f, cx=size / 2.0, cy=size / 2.0, width=size, height=size)

    def scaled(self, size: int) -> "Camera":
        s = size / self.width
        return Camera(
            fx=self.fx * s, fy=self.fy * s, cx=self.cx * s, cy=self.cy * s,
            width=size, height=int(round(self.height * s)),
        )


@dataclass(frozen=True)
class LightSpec:
    ambient: float = 0.4
    diffuse: float = 0.8
    specular: float = 0.3
    direction: tuple[float, float, float] = (0.0, 0.0, 1.0)  # propagation, camera -> scene

    def __post_init__(self):
        if min(self.ambient, self.diffuse, self.specular) < 0:
            raise ValueError("light coefficients must be non-negative")

    @classmethod
    def neutral(cls) -> "LightSpec":
        return cls()

    @classmethod
    def randomized(cls, rng: np.random.Generator) -> "LightSpec":
        """Random light position/strength used for encoder input views."""
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        if d[2] < 0:
            d = -d  # keep the light on the camera side, shining into the scene
        return cls(
            ambient=0.4,
            diffuse=float(rng.uniform(0.7, 0.9)),
            specular=float(rng.uniform(0.2, 0.4)),
            direction=tuple(d),
        )


@dataclass
class RenderedView:
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32 mm, 0 = background
    mask: np.ndarray  # (H, W) bool
    pose: tuple[np.ndarray, np.ndarray]  # (quat, t_mm)


def render(
    mesh: TriMesh,
    cam: Camera,
    pose: tuple[np.ndarray, np.ndarray],
    light: LightSpec | None = None,
    background: float = 0.0,
) -> RenderedView:
    """Rasterize `mesh` at pose (q, t_mm) with z-buffering and Gouraud shading."""
    light = light or LightSpec.neutral()
    q, t = pose
    q = np.asarray(q, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if t[2] <= 0:
        raise ValueError("object must sit in front of the camera (t_z > 0)")

    h, w = cam.height, cam.width
    rgb = np.full((h, w, 3), background, dtype=np.float64)
    depth = np.zeros((h, w), dtype=np.float64)
    mask = np.zeros((h, w), dtype=bool)

    rot = so3.quat_to_matrix(q)
    verts = mesh.vertices @ rot.T + t  # (V, 3) camera frame
    vnorm = mesh.normals @ rot.T

    # per-vertex Gouraud shading; specular is white, diffuse tints vertex color
    to_light = -np.asarray(light.direction, dtype=np.float64)
    to_light = to_light / np.linalg.norm(to_light)
    ndl = np.clip(vnorm @ to_light, 0.0, None)
    view_dir = -verts / np.linalg.norm(verts, axis=1, keepdims=True)
    refl = 2.0 * ndl[:, None] * vnorm - to_light
    spec = light.specular * np.clip((refl * view_dir).sum(1), 0.0, None) ** PHONG_EXPONENT
    spec[ndl <= 0.0] = 0.0
    shade = light.ambient + light.diffuse * ndl
    color = mesh.colors if mesh.colors is not None else np.full((len(verts), 3), 0.8)

    tri = mesh.triangles
    tz = verts[tri, 2]  # (T, 3)
    keep = (tz > NEAR_PLANE_MM).all(axis=1)
    if not keep.any():
        return RenderedView(rgb.astype(np.float32), depth.astype(np.float32), mask, (q, t))
    tri = tri[keep]

    inv_z = 1.0 / verts[:, 2]
    us = cam.fx * verts[:, 0] * inv_z + cam.cx
    vs = cam.fy * verts[:, 1] * inv_z + cam.cy

    ua, ub, uc = us[tri[:, 0]], us[tri[:, 1]], us[tri[:, 2]]
    va, vb, vc = vs[tri[:, 0]], vs[tri[:, 1]], vs[tri[:, 2]]
    # screen-space orientation; outward CCW-wound faces turn clockwise in the
    # y-down pixel frame, so front faces have negative doubled area
    area2 = (ub - ua) * (vc - va) - (vb - va) * (uc - ua)
    front = area2 < -1e-12
    if not front.any():
        return RenderedView(rgb.astype(np.float32), depth.astype(np.float32), mask, (q, t))
    tri, area2 = tri[front], area2[front]
    ua, ub, uc, va, vb, vc = (x[front] for x in (ua, ub, uc, va, vb, vc))

    c0 = np.clip(np.ceil(np.minimum.reduce([ua, ub, uc])).astype(int), 0, w - 1)
    c1 = np.clip(np.floor(np.maximum.reduce([ua, ub, uc])).astype(int), 0, w - 1)
    r0 = np.clip(np.ceil(np.minimum.reduce([va, vb, vc])).astype(int), 0, h - 1)
    r1 = np.clip(np.floor(np.maximum.reduce([va, vb, vc])).astype(int), 0, h - 1)
    bw = c1 - c0 + 1
    bh = r1 - r0 + 1
    nonempty = (bw > 0) & (bh > 0)
    if not nonempty.any():
        return RenderedView(rgb.astype(np.float32), depth.astype(np.float32), mask, (q, t))
    sel = np.flatnonzero(nonempty)
    tri, area2 = tri[sel], area2[sel]
    ua, ub, uc, va, vb, vc = (x[sel] for x in (ua, ub, uc, va, vb, vc))
    c0, r0, bw, bh = c0[sel], r0[sel], bw[sel], bh[sel]

    # bucket triangles by bbox size class so one large face does not blow up
    # the padded lattice for all the slivers
    size_class = np.maximum(bw, bh)
    cand_pix, cand_z, cand_tri, cand_fa, cand_fb, cand_fc = [], [], [], [], [], []
    bounds = [0, 4, 8, 16, 32, 64, 128, 1 << 30]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        grp = np.flatnonzero((size_class > lo) & (size_class <= hi))
        if len(grp) == 0:
            continue
        pw, ph = int(bw[grp].max()), int(bh[grp].max())
        px = c0[grp][:, None, None] + np.arange(pw)[None, None, :]
        py = r0[grp][:, None, None] + np.arange(ph)[None, :, None]
        in_box = (np.arange(pw)[None, None, :] < bw[grp][:, None, None]) & (
            np.arange(ph)[None, :, None] < bh[grp][:, None, None]
        )
        fx_ = px.astype(np.float64)
        fy_ = py.astype(np.float64)
        ga, gb, gc = ua[grp], ub[grp], uc[grp]
        ha, hb, hc = va[grp], vb[grp], vc[grp]
        # edge functions cross(B-A, p-A); interior pixels of a front
        # (negative area) face make all three <= 0
        e_ab = (gb - ga)[:, None, None] * (fy_ - ha[:, None, None]) - (
            hb - ha
        )[:, None, None] * (fx_ - ga[:, None, None])
        e_bc = (gc - gb)[:, None, None] * (fy_ - hb[:, None, None]) - (
            hc - hb
        )[:, None, None] * (fx_ - gb[:, None, None])
        e_ca = (ga - gc)[:, None, None] * (fy_ - hc[:, None, None]) - (
            ha - hc
        )[:, None, None] * (fx_ - gc[:, None, None])
        inside = in_box & (e_ab <= 0) & (e_bc <= 0) & (e_ca <= 0)
        if not inside.any():
            continue
        a2 = area2[grp][:, None, None]
        wa_, wb_, wc_ = e_bc / a2, e_ca / a2, e_ab / a2
        ti, iy, ix = np.nonzero(inside)
        gtri = grp[ti]
        iza = inv_z[tri[gtri, 0]]
        izb = inv_z[tri[gtri, 1]]
        izc = inv_z[tri[gtri, 2]]
        wa = wa_[ti, iy, ix]
        wb = wb_[ti, iy, ix]
        wc = wc_[ti, iy, ix]
        z_px = 1.0 / (wa * iza + wb * izb + wc * izc)
        cand_pix.append(py[ti, iy, 0] * w + px[ti, 0, ix])
        cand_z.append(z_px)
        cand_tri.append(gtri)
        # perspective-correct interpolation weights for vertex attributes
        cand_fa.append(wa * iza * z_px)
        cand_fb.append(wb * izb * z_px)
        cand_fc.append(wc * izc * z_px)
    if not cand_pix:
        return RenderedView(rgb.astype(np.float32), depth.astype(np.float32), mask, (q, t))
    pix = np.concatenate(cand_pix)
    z_all = np.concatenate(cand_z)
    tri_ids = np.concatenate(cand_tri)
    fa = np.concatenate(cand_fa)
    fb = np.concatenate(cand_fb)
    fc = np.concatenate(cand_fc)

    # deterministic z-resolve: nearest depth wins, ties to the lower triangle id
    order = np.lexsort((tri_ids, z_all, pix))
    pix_sorted = pix[order]
    first = np.ones(len(pix_sorted), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]

    def interp(attr: np.ndarray) -> np.ndarray:
        v0 = attr[tri[tri_ids[win], 0]]
        v1 = attr[tri[tri_ids[win], 1]]
        v2 = attr[tri[tri_ids[win], 2]]
        if attr.ndim == 1:
            return fa[win] * v0 + fb[win] * v1 + fc[win] * v2
        return fa[win, None] * v0 + fb[win, None] * v1 + fc[win, None] * v2

    shade_px = interp(shade)
    spec_px = interp(spec)
    color_px = interp(color)
    rgb_px = np.clip(color_px * shade_px[:, None] + spec_px[:, None], 0.0, 1.0)

    flat_pix = pix[win]
    z_px = z_all
    rows, cols = flat_pix // w, flat_pix % w
    rgb[rows, cols] = rgb_px
    depth[rows, cols] = z_px[win]
    mask[rows, cols] = True
    return RenderedView(rgb.astype(np.float32), depth.astype(np.float32), mask, (q, t))


# ---------------------------------------------------------------------------
# cropping


@dataclass
class Crop:
    """Square crop resampled to a fixed size, with its source-box geometry."""

    image: np.ndarray  # (out, out, 3) float32
    mask: np.ndarray | None  # (out, out) bool when a mask was cropped along
    center: np.ndarray  # (2,) box center in source pixels (u, v)
    side: float  # square side in source pixels
    diagonal: float  # tight mask-box diagonal in source pixels


def mask_box(mask: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Tight box of a mask: (center (u,v), width, height) in pixels."""
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        raise ValueError("empty mask has no bounding box")
    cu = (cols.min() + cols.max()) / 2.0
    cv = (rows.min() + rows.max()) / 2.0
    return np.array([cu, cv]), float(cols.max() - cols.min() + 1), float(rows.max() - rows.min() + 1)


def resample_square(
    img: np.ndarray, center: np.ndarray, side: float, out: int, fill: float = 0.0
) -> np.ndarray:
    """Bilinear resample of a square region (any channel count) to out x out."""
    u = center[0] - side / 2.0 + side * (np.arange(out) + 0.5) / out
    v = center[1] - side / 2.0 + side * (np.arange(out) + 0.5) / out
    uu, vv = np.meshgrid(u, v)
    h, w = img.shape[:2]
    u0 = np.floor(uu).astype(int)
    v0 = np.floor(vv).astype(int)
    du = uu - u0
    dv = vv - v0

    def sample(vi, ui):
        ok = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        vi_c = np.clip(vi, 0, h - 1)
        ui_c = np.clip(ui, 0, w - 1)
        val = img[vi_c, ui_c].astype(np.float64)
        if img.ndim == 3:
            val[~ok] = fill
        else:
            val = np.where(ok, val, fill)
        return val

    wa, wb = (1 - du) * (1 - dv), du * (1 - dv)
    wc, wd = (1 - du) * dv, du * dv
    if img.ndim == 3:
        wa, wb, wc, wd = (x[..., None] for x in (wa, wb, wc, wd))
    return (
        wa * sample(v0, u0)
        + wb * sample(v0, u0 + 1)
        + wc * sample(v0 + 1, u0)
        + wd * sample(v0 + 1, u0 + 1)
    )


def crop_and_resize(
    view: RenderedView,
    out: int,
    pad: float = 1.2,
    box: tuple[np.ndarray, float] | None = None,
) -> Crop:
    """Square crop around the mask (or an explicit (center, side) box).

    The tight mask box is expanded to a square of side max(w, h) * pad and
    bilinearly resampled to out x out. The returned diagonal is that of the
    tight (un-padded) box, the quantity used by projective distance estimates.
    """
    if box is not None:
        center = np.asarray(box[0], dtype=np.float64)
        side = float(box[1])
        diag = side * np.sqrt(2.0)
    else:
        if not view.mask.any():
            raise ValueError("cannot crop a view with an empty mask")
        center, bw, bh = mask_box(view.mask)
        side = max(bw, bh) * pad
        diag = float(np.hypot(bw, bh))
    image = resample_square(view.rgb, center, side, out).astype(np.float32)
    mask = resample_square(view.mask.astype(np.float64), center, side, out) > 0.5
    return Crop(image=np.clip(image, 0.0, 1.0), mask=mask, center=center, side=side, diagonal=diag)
