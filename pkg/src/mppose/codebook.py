"""Per-object orientation codebooks and cosine-similarity retrieval.

A codebook stores the unit-normalized latent code of one rendered view per
grid orientation, along with the orientation itself and enough crop geometry
(tight-box diagonal and center offset at the canonical render distance) to
recover translation from a detection box by projective scaling.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import so3
from .mesh import TriMesh
from .nn.network import MPNetwork
from .render import Camera, LightSpec, crop_and_resize, render

CODEBOOK_MAGIC = b"MPCB"
CODEBOOK_VERSION = 1


class CodebookFormatError(ValueError):
    """Raised for malformed codebook files."""


@dataclass
class Codebook:
    object_id: str
    level: int
    inplane_steps: int
    codes: np.ndarray  # (N, m) float32, unit rows
    orientations: np.ndarray  # (N, 4) float64, canonical sign
    t_syn_mm: float
    diagonals: np.ndarray  # (N,) float32, tight mask-box diagonal in px
    center_offsets: np.ndarray  # (N, 2) float32, box center - principal point

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def latent_dim(self) -> int:
        return self.codes.shape[1]


@dataclass
class Retrieval:
    indices: np.ndarray  # (K,) descending by score
    scores: np.ndarray  # (K,) cosine similarities
    orientations: np.ndarray  # (K, 4)


def normalize_codes(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float32)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("cannot normalize zero code")
    return z / norms


def build_codebook(
    net: MPNetwork,
    mesh: TriMesh,
    grid: so3.ViewGrid,
    cam: Camera,
    t_syn_mm: float = 700.0,
    pad: float = 1.2,
    jobs: int = 1,
    batch: int = 256,
) -> Codebook:
    """Render, crop and encode every grid orientation under neutral light."""
    n = len(grid)
    size = net.arch.input_size
    t = np.array([0.0, 0.0, t_syn_mm])
    light = LightSpec.neutral()
    principal = np.array([cam.cx, cam.cy])

    diagonals = np.empty(n, dtype=np.float32)
    offsets = np.empty((n, 2), dtype=np.float32)
    codes = np.empty((n, net.arch.latent_dim), dtype=np.float32)

    def prepare(i: int) -> np.ndarray:
        view = render(mesh, cam, (grid.quats[i], t), light)
        crop = crop_and_resize(view, size, pad=pad)
        diagonals[i] = crop.diagonal
        offsets[i] = crop.center - principal
        return crop.image

    ranges = [(s, min(s + batch, n)) for s in range(0, n, batch)]

    def prepare_range(rr):
        s, e = rr
        return np.stack([prepare(i) for i in range(s, e)])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            batches = list(pool.map(prepare_range, ranges))
    else:
        batches = [prepare_range(rr) for rr in ranges]
    for (s, e), images in zip(ranges, batches):
        codes[s:e] = net.forward(images)

    return Codebook(
        object_id=mesh.name,
        level=grid.level,
        inplane_steps=grid.inplane_steps,
        codes=normalize_codes(codes),
        orientations=so3.quat_canonical(grid.quats),
        t_syn_mm=float(t_syn_mm),
        diagonals=diagonals,
        center_offsets=offsets,
    )


def nearest(cb: Codebook, z: np.ndarray, k: int = 1, jobs: int = 1) -> Retrieval:
    """Exact top-k rows by cosine similarity (ties broken by lower index)."""
    if len(cb) == 0:
        raise ValueError("empty codebook")
    if k < 1:
        raise ValueError("k must be >= 1")
    zn = normalize_codes(np.asarray(z, dtype=np.float32).reshape(-1))
    if jobs > 1:
        chunk = max(4096, -(-len(cb) // jobs))
        ranges = [(s, min(s + chunk, len(cb))) for s in range(0, len(cb), chunk)]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(lambda rr: cb.codes[rr[0]: rr[1]] @ zn, ranges))
        scores = np.concatenate(parts)
    else:
        scores = cb.codes @ zn
    k = min(k, len(scores))
    cand = np.argpartition(-scores, k - 1)[:k] if k < len(scores) else np.arange(len(scores))
    order = np.lexsort((cand, -scores[cand]))
    idx = cand[order]
    return Retrieval(indices=idx, scores=scores[idx], orientations=cb.orientations[idx])


@dataclass
class DetectionBox:
    """2D detection in pixels: box center and tight-box diagonal."""

    center: np.ndarray  # (2,) u, v
    diagonal: float


def estimate_translation(
    box: DetectionBox, retrieval: Retrieval, cam: Camera, cb: Codebook
) -> np.ndarray:
    """Projective distance estimate from the top retrieved codebook entry.

    Depth scales with the synthetic-to-detected diagonal ratio; x/y come from
    back-projecting the detected box center after removing the retrieved
    view's own box-center offset from the principal point.
    """
    if box.diagonal <= 0:
        raise ValueError("degenerate detection box")
    i = int(retrieval.indices[0])
    l_syn = float(cb.diagonals[i])
    scale = box.diagonal / l_syn
    tz = cb.t_syn_mm / scale
    center = np.asarray(box.center, dtype=np.float64)
    origin_px = center - cb.center_offsets[i] * scale
    tx = (origin_px[0] - cam.cx) * tz / cam.fx
    ty = (origin_px[1] - cam.cy) * tz / cam.fy
    return np.array([tx, ty, tz])


# ---------------------------------------------------------------------------
# PCA trajectories of encodings along the three canonical rotation axes

TRAJECTORY_AXES = ("azimuth", "elevation", "inplane")


@dataclass
class Trajectories:
    axes: tuple[str, ...]
    codes: np.ndarray  # (3, steps, m) L2-normalized
    projections: np.ndarray  # (3, steps, 3) top-3 principal components

    def rows(self):
        """(axis, step, pc1, pc2, pc3) tuples in CSV emission order."""
        out = []
        for a, name in enumerate(self.axes):
            for s in range(self.projections.shape[1]):
                out.append((name, s, *self.projections[a, s]))
        return out


def trajectory_orientations(steps: int = 72) -> dict[str, np.ndarray]:
    """Orientation sweeps: object-frame z spin, camera-frame x tilt and z roll.

    The base view tips the object's z axis up on screen so the azimuth sweep
    is a turntable spin rather than a roll about the optical axis.
    """
    base = so3.axis_angle_quat(np.array([1.0, 0, 0]), -np.pi / 2)
    angles = 2 * np.pi * np.arange(steps) / steps
    z = np.array([0.0, 0, 1])
    x = np.array([1.0, 0, 0])
    return {
        "azimuth": np.stack([so3.quat_mul(base, so3.axis_angle_quat(z, a)) for a in angles]),
        "elevation": np.stack([so3.quat_mul(so3.axis_angle_quat(x, a), base) for a in angles]),
        "inplane": np.stack([so3.quat_mul(so3.axis_angle_quat(z, a), base) for a in angles]),
    }


def pca_trajectories(
    net: MPNetwork,
    mesh: TriMesh,
    cam: Camera,
    steps: int = 72,
    t_syn_mm: float = 700.0,
    pad: float = 1.2,
) -> Trajectories:
    """Encode three full revolutions and project codes on their top-3 PCs."""
    sweeps = trajectory_orientations(steps)
    t = np.array([0.0, 0.0, t_syn_mm])
    size = net.arch.input_size
    all_codes = []
    for name in TRAJECTORY_AXES:
        images = []
        for q in sweeps[name]:
            view = render(mesh, cam, (q, t), LightSpec.neutral())
            images.append(crop_and_resize(view, size, pad=pad).image)
        all_codes.append(normalize_codes(net.forward(np.stack(images))))
    codes = np.stack(all_codes)  # (3, steps, m)

    pooled = codes.reshape(-1, codes.shape[-1]).astype(np.float64)
    centered = pooled - pooled.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:3].T
    return Trajectories(
        axes=TRAJECTORY_AXES,
        codes=codes,
        projections=proj.reshape(3, steps, 3),
    )


# ---------------------------------------------------------------------------
# persistence: MPCB | version | object id | k p N m | t_syn | blocks


def save_codebook(cb: Codebook, path: str) -> None:
    oid = cb.object_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<H", CODEBOOK_VERSION))
        fh.write(struct.pack("<H", len(oid)))
        fh.write(oid)
        fh.write(
            struct.pack(
                "<IIII", cb.level, cb.inplane_steps, len(cb), cb.latent_dim
            )
        )
        fh.write(struct.pack("<d", cb.t_syn_mm))
        fh.write(np.ascontiguousarray(cb.codes, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(cb.orientations, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(cb.diagonals, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(cb.center_offsets, dtype="<f4").tobytes())


def load_codebook(path: str) -> Codebook:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CODEBOOK_MAGIC:
        raise CodebookFormatError(f"{path}: bad magic, not a codebook file")
    off = 4
    (version,) = struct.unpack_from("<H", data, off)
    off += 2
    if version != CODEBOOK_VERSION:
        raise CodebookFormatError(f"{path}: unsupported codebook version {version}")
    (id_len,) = struct.unpack_from("<H", data, off)
    off += 2
    object_id = data[off: off + id_len].decode("utf-8")
    off += id_len
    level, inplane, n, m = struct.unpack_from("<IIII", data, off)
    off += 16
    (t_syn,) = struct.unpack_from("<d", data, off)
    off += 8

    def block(dtype, shape):
        nonlocal off
        dt = np.dtype(dtype)
        count = int(np.prod(shape))
        nbytes = count * dt.itemsize
        if off + nbytes > len(data):
            raise CodebookFormatError(f"{path}: truncated codebook data")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(shape)
        off += nbytes
        return arr.copy()

    codes = block("<f4", (n, m))
    orientations = block("<f8", (n, 4))
    diagonals = block("<f4", (n,))
    offsets = block("<f4", (n, 2))
    return Codebook(
        object_id=object_id,
        level=int(level),
        inplane_steps=int(inplane),
        codes=codes,
        orientations=orientations,
        t_syn_mm=float(t_syn),
        diagonals=diagonals,
        center_offsets=offsets,
    )
