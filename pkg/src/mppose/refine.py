"""Iterative 6D pose refinement by annealed random search in SO(3).

Each round draws rotation perturbations with stage-annealed spread
(angle ~ N(0, sigma^2/(j+1)) for stage j), renders the candidates at the
current translation, and keeps the one whose encoding best matches the
target's. After the rotation stages, a multi-scale edge matcher corrects the
translation from the rendered estimate. Rotation and translation alternate
for a fixed number of rounds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

from . import so3
from .mesh import TriMesh
from .nn.network import MPNetwork
from .render import Camera, LightSpec, RenderedView, crop_and_resize, render


@dataclass(frozen=True)
class RefineConfig:
    sigma0_rad: float = np.deg2rad(45.0)
    rounds: int = 3  # alternations of rotation search and translation fit
    stages: int = 4  # annealing stages per round
    samples_base: int = 40  # stage sample count is samples_base - decay * round
    samples_decay: int = 10
    elitism: bool = True  # keep the running estimate in the candidate set
    scales: tuple = (0.9, 0.95, 1.0, 1.05, 1.1)
    pad: float = 1.2
    max_shift_px: int = 32

    def samples(self, round_idx: int) -> int:
        return max(1, self.samples_base - self.samples_decay * round_idx)

    def sigma(self, stage_idx: int) -> float:
        return self.sigma0_rad / np.sqrt(stage_idx + 1)


@dataclass
class PoseEstimate:
    q: np.ndarray
    t: np.ndarray
    score: float = np.nan

    def __post_init__(self):
        self.q = so3.quat_canonical(np.asarray(self.q, dtype=np.float64))
        self.t = np.asarray(self.t, dtype=np.float64)
        if not np.all(np.isfinite(self.t)):
            raise ValueError("translation must be finite")


@dataclass
class RefineTrace:
    """Per-stage log of the search, serializable as JSON lines."""

    records: list = field(default_factory=list)

    def add(self, **kw):
        self.records.append(kw)

    def dump_jsonl(self, path: str):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class EdgeMatchResult:
    delta_t_mm: np.ndarray
    matched: bool
    score: float
    shift_px: tuple[float, float]  # (u, v)
    scale: float


def _edge_magnitude(image: np.ndarray) -> np.ndarray:
    gray = image.mean(axis=2) if image.ndim == 3 else image
    gx = ndimage.sobel(gray, axis=1, mode="constant")
    gy = ndimage.sobel(gray, axis=0, mode="constant")
    return np.hypot(gx, gy)


def _ncc_map(target: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Zero-normalized cross-correlation of template over target ('valid')."""
    th, tw = template.shape
    n = th * tw
    t0 = template - template.mean()
    t_ss = float((t0**2).sum())
    if t_ss <= 1e-12:
        return np.full((1, 1), -1.0)
    kernel = np.ones_like(template)
    num = signal.fftconvolve(target, t0[::-1, ::-1], mode="valid")
    s1 = signal.fftconvolve(target, kernel[::-1, ::-1], mode="valid")
    s2 = signal.fftconvolve(target**2, kernel[::-1, ::-1], mode="valid")
    var = np.maximum(s2 - s1**2 / n, 0.0)
    denom = np.sqrt(var * t_ss)
    out = np.where(denom > 1e-9, num / np.maximum(denom, 1e-12), -1.0)
    return out


def multi_scale_edge_match(
    target_image: np.ndarray,
    est_view: RenderedView,
    cam: Camera,
    cfg: RefineConfig = RefineConfig(),
) -> EdgeMatchResult:
    """Translational offset between a target image and a rendered estimate.

    Sobel edge maps are compared by normalized cross-correlation with the
    estimate's edge template swept over the target at five relative scales;
    the best (shift, scale) converts to (dx, dy, dz) through the pinhole
    model at the estimate's depth.
    """
    t_z = float(est_view.pose[1][2])
    target_edges = _edge_magnitude(np.asarray(target_image, dtype=np.float64))
    est_edges = _edge_magnitude(est_view.rgb.astype(np.float64))

    if not est_view.mask.any():
        return EdgeMatchResult(np.zeros(3), False, -1.0, (0.0, 0.0), 1.0)
    rows = np.nonzero(est_view.mask.any(axis=1))[0]
    cols = np.nonzero(est_view.mask.any(axis=0))[0]
    margin = 2
    r0 = max(rows.min() - margin, 0)
    r1 = min(rows.max() + margin + 1, est_edges.shape[0])
    c0 = max(cols.min() - margin, 0)
    c1 = min(cols.max() + margin + 1, est_edges.shape[1])
    template = est_edges[r0:r1, c0:c1]
    if template.max() <= 1e-9 or target_edges.max() <= 1e-9:
        return EdgeMatchResult(np.zeros(3), False, -1.0, (0.0, 0.0), 1.0)

    pad = cfg.max_shift_px + int(np.ceil(template.shape[0] * 0.1)) + 2
    padded = np.pad(target_edges, pad)
    center_est = np.array([(r0 + r1 - 1) / 2.0, (c0 + c1 - 1) / 2.0])

    best = None
    for s in cfg.scales:
        if s == 1.0:
            tpl = template
        else:
            tpl = ndimage.zoom(template, s, order=1, mode="constant")
            if min(tpl.shape) < 4:
                continue
        ncc = _ncc_map(padded, tpl)
        # template center position in target coordinates per placement
        cy = np.arange(ncc.shape[0]) + (tpl.shape[0] - 1) / 2.0 - pad
        cx = np.arange(ncc.shape[1]) + (tpl.shape[1] - 1) / 2.0 - pad
        dy = cy - center_est[0]
        dx = cx - center_est[1]
        ok = (np.abs(dy)[:, None] <= cfg.max_shift_px) & (
            np.abs(dx)[None, :] <= cfg.max_shift_px
        )
        masked = np.where(ok, ncc, -np.inf)
        peak = np.unravel_index(np.argmax(masked), masked.shape)
        score = float(masked[peak])
        if not np.isfinite(score):
            continue
        if best is None or score > best[0]:
            best = (score, float(dx[peak[1]]), float(dy[peak[0]]), s)

    if best is None:
        return EdgeMatchResult(np.zeros(3), False, -1.0, (0.0, 0.0), 1.0)
    score, u, v, s = best
    delta = np.array(
        [u * t_z / cam.fx, v * t_z / cam.fy, t_z * (1.0 / s - 1.0)]
    )
    return EdgeMatchResult(delta, True, score, (u, v), s)


def _encode_crop(net, view_or_image, box=None, mask=None, pad=1.2):
    size = net.arch.input_size
    if isinstance(view_or_image, RenderedView):
        crop = crop_and_resize(view_or_image, size, pad=pad, box=box)
        return crop.image
    image = np.asarray(view_or_image, dtype=np.float32)
    if box is None:
        if mask is None:
            raise ValueError("target needs a detection box or mask")
        from .render import mask_box

        center, bw, bh = mask_box(mask)
        box = (center, max(bw, bh) * pad)
    from .render import resample_square

    return resample_square(image, np.asarray(box[0], dtype=np.float64), float(box[1]), size).astype(
        np.float32
    )


def refine_pose(
    net: MPNetwork,
    mesh: TriMesh,
    cam: Camera,
    target_image: np.ndarray,
    init: PoseEstimate,
    cfg: RefineConfig,
    rng: np.random.Generator,
    target_box: tuple[np.ndarray, float] | None = None,
    target_mask: np.ndarray | None = None,
    trace: RefineTrace | None = None,
) -> PoseEstimate:
    """Alternating rotation search and translation correction on one target.

    The target crop is encoded once up front; every candidate render is
    cropped around its own mask so the comparison sees orientation only.
    """
    target_image = np.asarray(target_image, dtype=np.float32)
    if target_image.ndim != 3:
        raise ValueError("target image must be HxWx3")
    target_crop = _encode_crop(net, target_image, box=target_box, mask=target_mask, pad=cfg.pad)
    z_target = net.forward(target_crop[None])[0]
    z_target = z_target / max(np.linalg.norm(z_target), 1e-12)

    light = LightSpec.neutral()
    size = net.arch.input_size

    def score_batch(quats, t):
        images = []
        kept = []
        for q in quats:
            view = render(mesh, cam, (q, t), light)
            if not view.mask.any():
                continue
            images.append(crop_and_resize(view, size, pad=cfg.pad).image)
            kept.append(q)
        if not kept:
            raise ValueError("no candidate rendered inside the frame")
        z = net.forward(np.stack(images))
        z = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
        return np.asarray(kept), z @ z_target

    q_est = init.q.copy()
    t_est = init.t.copy()
    best_score = -np.inf

    for k in range(cfg.rounds):
        n = cfg.samples(k)
        for j in range(cfg.stages):
            sigma = cfg.sigma(j)
            cands = [q_est] if cfg.elitism else []
            for _ in range(n):
                dq = so3.sample_perturbation(sigma, rng)
                cands.append(so3.quat_mul(dq, q_est))
            quats, scores = score_batch(cands, t_est)
            best = int(np.argmax(scores))
            q_est = quats[best]
            best_score = float(scores[best])
            if trace is not None:
                trace.add(
                    round=k,
                    stage=j,
                    sigma_rad=float(sigma),
                    samples=n,
                    best_score=best_score,
                    step_rad=float(so3.geodesic_angle(q_est, init.q)),
                )
        est_view = render(mesh, cam, (q_est, t_est), light)
        match = multi_scale_edge_match(target_image, est_view, cam, cfg)
        t_est = t_est + match.delta_t_mm
        if trace is not None:
            trace.add(
                round=k,
                translation=list(map(float, t_est)),
                edge_score=match.score,
                edge_matched=match.matched,
            )
    return PoseEstimate(q=q_est, t=t_est, score=best_score)
