"""Mesh extraction from implicit fields and surface point sampling.

Marching cubes runs on a regular lattice of SDF values (classic
table-driven variant from scikit-image); vertices come out in the
lattice's coordinate frame and are mapped back to scene units by the
callers.  Zero-area triangles are filtered on construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from skimage.measure import marching_cubes

from .sdf_analytic import AnalyticScene


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    object_id: int | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle indices out of range")
        self.triangles = self.triangles[self.areas() > 0.0]

    def areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0

    def transformed(self, scale: float, offset) -> "Mesh":
        return Mesh(self.vertices * scale + np.asarray(offset), self.triangles, self.object_id)


def edge_incidence_counts(mesh: Mesh) -> np.ndarray:
    """Number of triangles sharing each undirected edge (watertight: all 2)."""
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return counts


def _lattice(lo, hi, n: int):
    axes = [np.linspace(lo[i], hi[i], n) for i in range(3)]
    spacing = tuple((hi[i] - lo[i]) / (n - 1) for i in range(3))
    return axes, spacing


def _eval_volume(sdf_fn, lo, hi, n: int, chunk: int = 65536) -> np.ndarray:
    axes, _ = _lattice(lo, hi, n)
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    out = np.empty(pts.shape[0], dtype=np.float64)
    for s in range(0, pts.shape[0], chunk):
        out[s : s + chunk] = sdf_fn(pts[s : s + chunk])
    return out.reshape(n, n, n)


def extract_mesh_from_volume(volume: np.ndarray, lo, hi, iso: float = 0.0) -> Mesh:
    """Marching cubes at the iso level; empty level sets yield an empty mesh."""
    n = volume.shape[0]
    _, spacing = _lattice(lo, hi, n)
    if volume.min() >= iso or volume.max() <= iso:
        warnings.warn("iso level not crossed; returning an empty mesh")
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = marching_cubes(volume, level=iso, spacing=spacing, method="lorensen")
    return Mesh(verts + np.asarray(lo, dtype=np.float64), faces)


def _channel_fn(eval_vec, channel):
    if channel == "scene":
        return lambda p: eval_vec(p).min(axis=1)
    ch = int(channel)
    return lambda p: eval_vec(p)[:, ch]


def extract_mesh(
    source,
    channel="scene",
    resolution: int = 128,
    iso: float = 0.0,
    bounds=None,
    to_scene: tuple | None = None,
) -> Mesh:
    """Extract one SDF channel's iso-surface as a triangle mesh.

    ``source`` is an AnalyticScene (evaluated over its own bounds) or a
    FieldParams (evaluated over the normalized cube [-1,1]^3, optionally
    mapped to scene units via ``to_scene=(center, scale)``).
    ``channel`` is "scene" or an object channel index.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    if isinstance(source, AnalyticScene):
        pad = 0.02 * float(np.max(source.bounds_max - source.bounds_min))
        lo = source.bounds_min - pad
        hi = source.bounds_max + pad
        fn = _channel_fn(lambda p: source.eval_sdf(p).per_object, channel)
    else:
        from .field import field_forward

        lo = np.full(3, -1.0)
        hi = np.full(3, 1.0)
        fn = _channel_fn(lambda p: field_forward(p, source).sdf_vector, channel)
    vol = _eval_volume(fn, lo, hi, resolution)
    mesh = extract_mesh_from_volume(vol, lo, hi, iso)
    if to_scene is not None and not isinstance(source, AnalyticScene):
        center, scale = to_scene
        mesh = mesh.transformed(scale, center)
    mesh.object_id = None if channel == "scene" else int(channel)
    return mesh


def sample_surface_points(mesh: Mesh, count: int, rng) -> np.ndarray:
    """Area-weighted uniform surface samples, deterministic per seed."""
    if mesh.empty:
        raise ValueError("cannot sample from an empty mesh")
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=count, p=areas / areas.sum())
    u = rng.random(count)
    v = rng.random(count)
    fold = u + v > 1.0
    u[fold] = 1.0 - u[fold]
    v[fold] = 1.0 - v[fold]
    a = mesh.vertices[mesh.triangles[tri, 0]]
    b = mesh.vertices[mesh.triangles[tri, 1]]
    c = mesh.vertices[mesh.triangles[tri, 2]]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


# -- mesh file io -----------------------------------------------------------------


def save_mesh(path: str, mesh: Mesh) -> None:
    if path.endswith(".ply"):
        _save_ply(path, mesh)
    elif path.endswith(".obj"):
        _save_obj(path, mesh)
    else:
        raise ValueError("mesh format must be .ply or .obj")


def load_mesh(path: str) -> Mesh:
    if path.endswith(".ply"):
        return _load_ply(path)
    if path.endswith(".obj"):
        return _load_obj(path)
    raise ValueError("mesh format must be .ply or .obj")


def _save_ply(path: str, mesh: Mesh) -> None:
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    faces = np.empty(
        len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", (3,))]
    )
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        f.write(faces.tobytes())


def _load_ply(path: str) -> Mesh:
    with open(path, "rb") as f:
        data = f.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    if lines[0] != "ply" or "format binary_little_endian 1.0" not in lines[1]:
        raise ValueError(f"{path}: unsupported PLY flavor")
    n_vert = n_face = 0
    vert_dtype = "<f8"
    section = None
    for ln in lines:
        parts = ln.split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
            section = "vertex"
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
            section = "face"
        elif parts[0] == "property" and section == "vertex" and parts[1] in ("float", "float32"):
            vert_dtype = "<f4"
    body = data[end:]
    itemsize = np.dtype(vert_dtype).itemsize
    verts = np.frombuffer(body, dtype=vert_dtype, count=3 * n_vert).reshape(n_vert, 3)
    face_rec = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    faces = np.frombuffer(body, dtype=face_rec, count=n_face, offset=3 * n_vert * itemsize)
    if n_face and not np.all(faces["n"] == 3):
        raise ValueError(f"{path}: non-triangular faces")
    return Mesh(verts.astype(np.float64), faces["idx"].astype(np.int64))


def _save_obj(path: str, mesh: Mesh) -> None:
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def _load_obj(path: str) -> Mesh:
    verts, tris = [], []
    with open(path) as f:
        for ln in f:
            parts = ln.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                if len(idx) != 3:
                    raise ValueError(f"{path}: non-triangular face")
                tris.append(idx)
    return Mesh(np.array(verts, dtype=np.float64), np.array(tris, dtype=np.int64))
