"""Triangle meshes: procedural toy objects and OBJ/PLY ingestion.

Vertex units are millimetres. Normals are per-vertex and unit length; flat
surfaces are modelled with duplicated vertices so a vertex normal equals its
face normal. `symmetries` lists the mesh's rotation symmetry group as
quaternions (identity only for asymmetric shapes); it is metadata used by
symmetry-aware evaluation, not by rendering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import so3


class MeshFormatError(ValueError):
    """Raised for malformed OBJ/PLY input."""


@dataclass
class TriMesh:
    name: str
    vertices: np.ndarray  # (V, 3) float64, mm
    triangles: np.ndarray  # (T, 3) int
    normals: np.ndarray  # (V, 3) float64, unit
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]
    symmetries: np.ndarray = field(default_factory=lambda: so3.quat_identity()[None, :])

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        if len(self.vertices) == 0 or len(self.triangles) == 0:
            raise ValueError(f"mesh '{self.name}' is empty")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise ValueError(f"mesh '{self.name}' has out-of-range triangle indices")
        norms = np.linalg.norm(self.normals, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ValueError(f"mesh '{self.name}' has zero-length normals")
        self.normals = self.normals / norms

    @property
    def diameter(self) -> float:
        """Largest pairwise vertex distance."""
        v = self.vertices
        if len(v) > 2048:
            from scipy.spatial import ConvexHull

            v = v[ConvexHull(v).vertices]
        d2 = ((v[:, None, :] - v[None, :, :]) ** 2).sum(-1)
        return float(np.sqrt(d2.max()))

    def recentered(self) -> "TriMesh":
        """Copy with the bounding-box center moved to the origin."""
        center = (self.vertices.min(axis=0) + self.vertices.max(axis=0)) / 2
        return TriMesh(
            name=self.name,
            vertices=self.vertices - center,
            triangles=self.triangles.copy(),
            normals=self.normals.copy(),
            colors=None if self.colors is None else self.colors.copy(),
            symmetries=self.symmetries.copy(),
        )


def rotation_group_closure(generators: list[np.ndarray], max_size: int = 128) -> np.ndarray:
    """Finite rotation group generated by the given quaternions (incl. identity)."""
    seen: dict[tuple, np.ndarray] = {}

    def key(q):
        qc = so3.quat_canonical(q)
        return tuple(np.round(qc, 9)), qc

    k, qc = key(so3.quat_identity())
    seen[k] = qc
    frontier = [qc]
    while frontier:
        nxt = []
        for q in frontier:
            for g in generators:
                k, qc = key(so3.quat_mul(g, q))
                if k not in seen:
                    seen[k] = qc
                    nxt.append(qc)
        frontier = nxt
        if len(seen) > max_size:
            raise ValueError("rotation group closure did not terminate")
    return np.array([seen[k] for k in sorted(seen)])


def cube_rotation_group() -> np.ndarray:
    """The 24 rotations mapping an axis-aligned cube onto itself."""
    gx = so3.axis_angle_quat(np.array([1.0, 0, 0]), np.pi / 2)
    gz = so3.axis_angle_quat(np.array([0, 0, 1.0]), np.pi / 2)
    return rotation_group_closure([gx, gz])


def cyclic_group(axis: np.ndarray, order: int) -> np.ndarray:
    return np.array(
        [so3.quat_canonical(so3.axis_angle_quat(axis, 2 * np.pi * i / order)) for i in range(order)]
    )


def cylinder_symmetries(steps: int = 180) -> np.ndarray:
    """Discretized continuous symmetry of a plain cylinder about z, with end flip."""
    spin = cyclic_group(np.array([0, 0, 1.0]), steps)
    flip = so3.axis_angle_quat(np.array([1.0, 0, 0]), np.pi)
    return np.vstack([spin, so3.quat_canonical(so3.quat_mul(spin, flip))])


def symmetric_geodesic(q_est: np.ndarray, q_true: np.ndarray, symmetries: np.ndarray) -> float:
    """Smallest angular error over all symmetry-equivalent true orientations."""
    equiv = so3.quat_mul(q_true[None, :], symmetries)
    dots = equiv @ np.asarray(q_est, dtype=np.float64)
    return float(so3.quat_angle_from_dots(dots).min())


# ---------------------------------------------------------------------------
# procedural builders


def _box_faces(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Axis-aligned box as 24 vertices (4 per face), outward CCW winding."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    # per face: 4 corners ordered CCW seen from outside, plus face normal
    faces = [
        ([(x1, y0, z0), (x1, y1, z0), (x1, y1, z1), (x1, y0, z1)], (1, 0, 0)),
        ([(x0, y0, z0), (x0, y0, z1), (x0, y1, z1), (x0, y1, z0)], (-1, 0, 0)),
        ([(x0, y1, z0), (x0, y1, z1), (x1, y1, z1), (x1, y1, z0)], (0, 1, 0)),
        ([(x0, y0, z0), (x1, y0, z0), (x1, y0, z1), (x0, y0, z1)], (0, -1, 0)),
        ([(x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1)], (0, 0, 1)),
        ([(x0, y0, z0), (x0, y1, z0), (x1, y1, z0), (x1, y0, z0)], (0, 0, -1)),
    ]
    verts, norms, tris = [], [], []
    for corners, n in faces:
        base = len(verts)
        verts.extend(corners)
        norms.extend([n] * 4)
        tris.extend([[base, base + 1, base + 2], [base, base + 2, base + 3]])
    return np.array(verts, dtype=np.float64), np.array(tris), np.array(norms, dtype=np.float64)


def make_box(size: np.ndarray, center: np.ndarray = (0, 0, 0), name: str = "box") -> TriMesh:
    half = np.asarray(size, dtype=np.float64) / 2
    center = np.asarray(center, dtype=np.float64)
    v, t, n = _box_faces(center - half, center + half)
    return TriMesh(name=name, vertices=v, triangles=t, normals=n)


def _merge(name: str, parts: list[TriMesh], symmetries=None) -> TriMesh:
    verts = np.vstack([p.vertices for p in parts])
    norms = np.vstack([p.normals for p in parts])
    tris, colors, offset = [], [], 0
    has_color = any(p.colors is not None for p in parts)
    for p in parts:
        tris.append(p.triangles + offset)
        if has_color:
            c = p.colors if p.colors is not None else np.full((len(p.vertices), 3), 0.8)
            colors.append(c)
        offset += len(p.vertices)
    return TriMesh(
        name=name,
        vertices=verts,
        triangles=np.vstack(tris),
        normals=norms,
        colors=np.vstack(colors) if has_color else None,
        symmetries=symmetries if symmetries is not None else so3.quat_identity()[None, :],
    )


def make_l_block() -> TriMesh:
    """Asymmetric L-shaped block (two fused boxes), ~221 mm diameter."""
    a = make_box((160, 60, 60), center=(0, -20, 0))
    b = make_box((60, 80, 60), center=(-50, 50, 0))
    return _merge("l_block", [a, b]).recentered()


def make_plain_cube(side: float = 140.0) -> TriMesh:
    m = make_box((side, side, side), name="plain_cube")
    m.symmetries = cube_rotation_group()
    return m


def make_marked_cube(side: float = 140.0) -> TriMesh:
    """Cube with one colored face; 4-fold symmetric about that face's axis."""
    m = make_box((side, side, side), name="marked_cube")
    colors = np.full((len(m.vertices), 3), 0.75)
    top = m.normals[:, 2] > 0.5  # the +z face keeps its mark
    colors[top] = (0.9, 0.25, 0.2)
    m.colors = colors
    m.symmetries = cyclic_group(np.array([0, 0, 1.0]), 4)
    return m


def make_cylinder(radius: float = 60.0, height: float = 200.0, segments: int = 48) -> TriMesh:
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    side_v, side_n, side_t = [], [], []
    # smooth-shaded side wall: shared radial normals, two rings
    for z in (-height / 2, height / 2):
        side_v.extend(np.column_stack([radius * ring, np.full(segments, z)]))
        side_n.extend(np.column_stack([ring, np.zeros(segments)]))
    for i in range(segments):
        j = (i + 1) % segments
        side_t.append([i, j, segments + j])
        side_t.append([i, segments + j, segments + i])
    wall = TriMesh(
        "wall", np.array(side_v), np.array(side_t), np.array(side_n)
    )
    caps_v, caps_n, caps_t = [], [], []
    for z, nz in ((-height / 2, -1.0), (height / 2, 1.0)):
        base = len(caps_v)
        caps_v.append([0.0, 0.0, z])
        caps_n.append([0.0, 0.0, nz])
        for c, s in ring:
            caps_v.append([radius * c, radius * s, z])
            caps_n.append([0.0, 0.0, nz])
        for i in range(segments):
            j = (i + 1) % segments
            if nz > 0:
                caps_t.append([base, base + 1 + i, base + 1 + j])
            else:
                caps_t.append([base, base + 1 + j, base + 1 + i])
    caps = TriMesh("caps", np.array(caps_v), np.array(caps_t), np.array(caps_n))
    m = _merge("cylinder", [wall, caps], symmetries=cylinder_symmetries())
    return m


def make_wedge() -> TriMesh:
    """Elongated right-triangular prism; asymmetric, ~260 mm diameter."""
    tri2d = np.array([[0.0, 0.0], [140.0, 0.0], [0.0, 90.0]])
    half_len = 100.0
    verts, norms, tris = [], [], []
    # end caps (flat, duplicated vertices)
    for z, nz in ((-half_len, -1.0), (half_len, 1.0)):
        base = len(verts)
        for x, y in tri2d:
            verts.append([x, y, z])
            norms.append([0.0, 0.0, nz])
        tris.append([base, base + 2, base + 1] if nz < 0 else [base, base + 1, base + 2])
    # three rectangular side walls with flat outward normals
    edges = [(0, 1), (1, 2), (2, 0)]
    for i, j in edges:
        p, q = tri2d[i], tri2d[j]
        e = q - p
        n = np.array([e[1], -e[0], 0.0])
        n /= np.linalg.norm(n)
        base = len(verts)
        # quad corners ordered p-,q-,q+,p+ = CCW seen from outside
        for x, y in (p, q):
            verts.append([x, y, -half_len])
            norms.append(n)
        for x, y in (q, p):
            verts.append([x, y, half_len])
            norms.append(n)
        tris.extend([[base, base + 1, base + 2], [base, base + 2, base + 3]])
    m = TriMesh("wedge", np.array(verts), np.array(tris), np.array(norms))
    return m.recentered()


def make_toy_meshes() -> list[TriMesh]:
    """Deterministic five-object desk set spanning asymmetric to symmetric shapes."""
    return [
        make_l_block(),
        make_marked_cube(),
        make_plain_cube(),
        make_cylinder(),
        make_wedge(),
    ]


def toy_mesh(name: str) -> TriMesh:
    for m in make_toy_meshes():
        if m.name == name:
            return m
    raise KeyError(f"unknown toy mesh '{name}'")


# ---------------------------------------------------------------------------
# file ingestion


def _vertex_normals_from_faces(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    normals = np.zeros_like(vertices)
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    fn = np.cross(b - a, c - a)  # area-weighted
    for i in range(3):
        np.add.at(normals, triangles[:, i], fn)
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    lens[lens < 1e-12] = 1.0
    normals = normals / lens
    normals[(normals == 0).all(axis=1)] = (0.0, 0.0, 1.0)
    return normals


def load_obj(path: str, name: str | None = None) -> TriMesh:
    """Load an ASCII OBJ with v/vn/f records (faces triangulated as fans)."""
    verts: list[list[float]] = []
    file_normals: list[list[float]] = []
    vert_normal: dict[int, int] = {}
    tris: list[list[int]] = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: bad vertex record")
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "vn":
                file_normals.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                idx = []
                for tok in parts[1:]:
                    fields = tok.split("/")
                    vi = int(fields[0])
                    if vi < 0:
                        vi = len(verts) + 1 + vi
                    vi -= 1
                    if not 0 <= vi < len(verts):
                        raise MeshFormatError(f"{path}:{lineno}: vertex index out of range")
                    if len(fields) >= 3 and fields[2]:
                        vert_normal[vi] = int(fields[2]) - 1
                    idx.append(vi)
                if len(idx) < 3:
                    raise MeshFormatError(f"{path}:{lineno}: face needs >= 3 vertices")
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not tris:
        raise MeshFormatError(f"{path}: no geometry found")
    vertices = np.array(verts)
    triangles = np.array(tris)
    if file_normals and len(vert_normal) == len(verts):
        normals = np.array([file_normals[vert_normal[i]] for i in range(len(verts))])
    else:
        normals = _vertex_normals_from_faces(vertices, triangles)
    return TriMesh(
        name=name or path.rsplit("/", 1)[-1].rsplit(".", 1)[0],
        vertices=vertices,
        triangles=triangles,
        normals=normals,
    )


_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
    "char": ("<i1", 1), "int8": ("<i1", 1),
    "short": ("<i2", 2), "int16": ("<i2", 2),
    "ushort": ("<u2", 2), "uint16": ("<u2", 2),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
}


def load_ply(path: str, name: str | None = None) -> TriMesh:
    """Load a binary little-endian PLY (x/y/z, optional normals and colors)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"ply"):
        raise MeshFormatError(f"{path}: missing ply magic")
    end = data.find(b"end_header\n")
    if end < 0:
        raise MeshFormatError(f"{path}: unterminated header")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    elements: list[tuple[str, int, list]] = []
    fmt_ok = False
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if parts[1] != "binary_little_endian":
                raise MeshFormatError(f"{path}: only binary_little_endian supported")
            fmt_ok = True
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append(("scalar", parts[1], parts[2]))
    if not fmt_ok:
        raise MeshFormatError(f"{path}: missing format line")

    vertices = normals = colors = None
    triangles: list[list[int]] = []
    offset = 0
    for ename, count, props in elements:
        if all(p[0] == "scalar" for p in props):
            dtype = np.dtype([(p[2], _PLY_TYPES[p[1]][0]) for p in props])
            nbytes = dtype.itemsize * count
            if offset + nbytes > len(body):
                raise MeshFormatError(f"{path}: truncated '{ename}' element")
            rec = np.frombuffer(body[offset: offset + nbytes], dtype=dtype)
            offset += nbytes
            if ename == "vertex":
                vertices = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
                fields = rec.dtype.names
                if {"nx", "ny", "nz"} <= set(fields):
                    normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(np.float64)
                if {"red", "green", "blue"} <= set(fields):
                    colors = (
                        np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float64)
                        / 255.0
                    )
        else:
            # list-typed element (faces): walk records one by one
            for _ in range(count):
                row: list[int] = []
                for p in props:
                    if p[0] == "list":
                        cdt, cn = _PLY_TYPES[p[1]]
                        idt, in_ = _PLY_TYPES[p[2]]
                        if offset + cn > len(body):
                            raise MeshFormatError(f"{path}: truncated face data")
                        n = int(np.frombuffer(body[offset: offset + cn], dtype=cdt)[0])
                        offset += cn
                        nb = n * in_
                        if offset + nb > len(body):
                            raise MeshFormatError(f"{path}: truncated face data")
                        row = list(np.frombuffer(body[offset: offset + nb], dtype=idt))
                        offset += nb
                    else:
                        offset += _PLY_TYPES[p[1]][1]
                if ename == "face" and len(row) >= 3:
                    for k in range(1, len(row) - 1):
                        triangles.append([row[0], row[k], row[k + 1]])
    if vertices is None or not triangles:
        raise MeshFormatError(f"{path}: no vertex/face data")
    tri = np.array(triangles)
    if normals is None:
        normals = _vertex_normals_from_faces(vertices, tri)
    return TriMesh(
        name=name or path.rsplit("/", 1)[-1].rsplit(".", 1)[0],
        vertices=vertices,
        triangles=tri,
        normals=normals,
        colors=colors,
    )


def load_mesh(path: str, name: str | None = None) -> TriMesh:
    if path.lower().endswith(".obj"):
        return load_obj(path, name)
    if path.lower().endswith(".ply"):
        return load_ply(path, name)
    raise MeshFormatError(f"unsupported mesh format: {path}")
