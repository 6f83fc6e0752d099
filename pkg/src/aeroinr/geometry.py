"""Triangle meshes and signed-distance sampling.

Distances are exact point-to-triangle minima; the sign comes from the
generalized winding number (>= 0.5 means inside, negative distance), which
stays reliable on thin trailing edges where nearest-face normals flip.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

PAD = 0.05


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None
    dropped: int = 0

    @classmethod
    def from_arrays(cls, vertices, triangles=None, normals=None) -> "Mesh":
        """Validate and drop zero-area triangles (count kept in ``dropped``)."""
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] not in (1, 2, 3):
            raise GeometryError(f"vertices must be (N, d) with d <= 3, got {v.shape}")
        t = np.zeros((0, 3), dtype=np.int64) if triangles is None else np.asarray(triangles, dtype=np.int64)
        if t.size and (t.ndim != 2 or t.shape[1] != 3):
            raise GeometryError("triangles must be (T, 3)")
        t = t.reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise GeometryError("triangle index out of range")
        dropped = 0
        if t.size and v.shape[1] == 3:
            area2 = np.linalg.norm(_face_cross(v, t), axis=1)
            keep = area2 > 0.0
            dropped = int((~keep).sum())
            if dropped:
                log.info("dropped %d degenerate triangles", dropped)
            t = t[keep]
        if normals is not None:
            normals = np.ascontiguousarray(normals, dtype=np.float64)
            if normals.shape != v.shape:
                raise GeometryError("normals must match vertices")
        return cls(v, np.ascontiguousarray(t), normals, dropped)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def soup(self) -> np.ndarray:
        """(T, 3, 3) array of triangle corner coordinates."""
        return np.ascontiguousarray(self.vertices[self.triangles])

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(np.ascontiguousarray(vertices, dtype=np.float64), self.triangles,
                    self.normals, self.dropped)


def _face_cross(v, t):
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    return np.cross(b - a, c - a)


# ---------------------------------------------------------------------------
# OBJ subset
# ---------------------------------------------------------------------------

def load_obj(path) -> Mesh:
    """Read ``v``, ``vn`` and triangular ``f`` lines; other records are ignored.

    ``vn`` records are taken as per-vertex normals (in vertex order) when there
    is exactly one per vertex, which is what :func:`save_obj` writes.
    """
    verts, faces, vnormals = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vn":
            vnormals.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            if len(idx) != 3:
                raise GeometryError(f"{path}:{lineno}: only triangular faces are supported")
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    if not verts:
        raise GeometryError(f"{path}: no vertices")
    normals = np.array(vnormals) if len(vnormals) == len(verts) else None
    return Mesh.from_arrays(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3), normals)


def save_obj(mesh: Mesh, path) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    if mesh.normals is not None:
        lines += [f"vn {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.normals]
        lines += [f"f {a + 1}//{a + 1} {b + 1}//{b + 1} {c + 1}//{c + 1}" for a, b, c in mesh.triangles]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UnitSphereTransform:
    offset: np.ndarray
    scale: float

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.offset) * self.scale

    def invert(self, y):
        return np.asarray(y, dtype=np.float64) / self.scale + self.offset


def normalize_to_unit_sphere(mesh: Mesh, pad: float = PAD) -> tuple[Mesh, UnitSphereTransform]:
    """Center on the vertex centroid and scale so the max vertex norm is ``1 - pad``."""
    if mesh.n_vertices == 0:
        raise GeometryError("cannot normalize an empty mesh")
    offset = mesh.vertices.mean(axis=0)
    radius = np.linalg.norm(mesh.vertices - offset, axis=1).max()
    scale = (1.0 - pad) / radius if radius > 0 else 1.0
    tf = UnitSphereTransform(offset, float(scale))
    return mesh.with_vertices(tf.apply(mesh.vertices)), tf


# ---------------------------------------------------------------------------
# distance queries
# ---------------------------------------------------------------------------

class MeshQuery:
    """Read-only acceleration data for repeated distance/sign queries."""

    def __init__(self, mesh: Mesh):
        if mesh.vertices.shape[1] != 3 or len(mesh.triangles) == 0:
            raise GeometryError("distance queries need a 3-D triangle mesh")
        self.mesh = mesh
        self.tris = mesh.soup()
        self.tris.flags.writeable = False

    def unsigned(self, points) -> np.ndarray:
        d2, _ = kernels.closest_sqdist(np.atleast_2d(points), self.tris)
        return np.sqrt(d2)

    def winding(self, points) -> np.ndarray:
        return kernels.winding_number(np.atleast_2d(points), self.tris)

    def signed(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        dist = self.unsigned(pts)
        inside = self.winding(pts) >= 0.5
        return np.where(inside, -dist, dist)


def signed_distance(mesh: Mesh, p) -> np.ndarray | float:
    """Signed distance of one point (returns float) or an (N, 3) array."""
    p = np.asarray(p, dtype=np.float64)
    out = MeshQuery(mesh).signed(p)
    return float(out[0]) if p.ndim == 1 else out


# ---------------------------------------------------------------------------
# normals
# ---------------------------------------------------------------------------

def vertex_normals(mesh: Mesh) -> tuple[np.ndarray, list[int]]:
    """Area-weighted vertex normals and the list of isolated vertices.

    Isolated vertices get a zero normal.
    """
    v, t = mesh.vertices, mesh.triangles
    acc = np.zeros_like(v)
    fn = _face_cross(v, t)  # magnitude is twice the face area
    for k in range(3):
        np.add.at(acc, t[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    isolated = np.flatnonzero(norm == 0).tolist()
    if isolated:
        warnings.warn(f"{len(isolated)} vertices have no incident area; zero normals assigned")
    safe = np.where(norm > 0, norm, 1.0)
    return acc / safe[:, None], isolated


def flip_winding(mesh: Mesh) -> Mesh:
    return Mesh(mesh.vertices, np.ascontiguousarray(mesh.triangles[:, ::-1]), mesh.normals, mesh.dropped)


def signed_volume(mesh: Mesh) -> float:
    a, b, c = (mesh.vertices[mesh.triangles[:, k]] for k in range(3))
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


# ---------------------------------------------------------------------------
# SDF sampling
# ---------------------------------------------------------------------------

@dataclass
class SdfCloud:
    points: np.ndarray
    sdf: np.ndarray
    shape_id: str
    uniform_fraction: float
    sigmas: tuple[float, ...]
    seed: int
    tiers: np.ndarray = field(default=None, repr=False)  # -1 uniform, k = sigma tier k

    def __len__(self) -> int:
        return len(self.sdf)


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    area = 0.5 * np.linalg.norm(_face_cross(mesh.vertices, mesh.triangles), axis=1)
    tri = rng.choice(len(area), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def sample_sdf_cloud(mesh: Mesh, n_total: int = 60000, uniform_fraction: float = 0.10,
                     sigma_list=(0.005, 0.0005), seed: int = 0, shape_id: str = "shape",
                     query: MeshQuery | None = None) -> SdfCloud:
    """Uniform box samples plus noisy surface samples, with exact SDF values.

    ``uniform_fraction`` of the points are uniform in [-1, 1]^3; the rest are
    split equally across ``sigma_list`` tiers, each a surface sample
    perturbed by isotropic N(0, sigma^2) noise.
    """
    if n_total < 10:
        raise GeometryError("n_total must be >= 10")
    if not 0.0 <= uniform_fraction <= 1.0:
        raise GeometryError("uniform_fraction must lie in [0, 1]")
    sigmas = tuple(float(s) for s in sigma_list)
    if any(s <= 0 for s in sigmas):
        raise GeometryError(f"surface noise sigmas must be > 0, got {sigmas}")
    rng = np.random.default_rng(seed)
    n_uniform = int(round(uniform_fraction * n_total))
    n_surface = n_total - n_uniform
    if n_surface and not sigmas:
        raise GeometryError("need at least one sigma for surface samples")
    chunks = [rng.uniform(-1.0, 1.0, size=(n_uniform, 3))]
    tiers = [np.full(n_uniform, -1)]
    if n_surface:
        counts = [n_surface // len(sigmas)] * len(sigmas)
        for k in range(n_surface - sum(counts)):
            counts[k] += 1
        for k, (s, c) in enumerate(zip(sigmas, counts)):
            base = sample_surface(mesh, c, rng)
            chunks.append(base + rng.normal(0.0, s, size=base.shape))
            tiers.append(np.full(c, k))
    points = np.concatenate(chunks)
    q = query or MeshQuery(mesh)
    return SdfCloud(points, q.signed(points), shape_id, float(uniform_fraction), sigmas,
                    int(seed), np.concatenate(tiers))


# ---------------------------------------------------------------------------
# reference shapes
# ---------------------------------------------------------------------------

def icosphere(subdivisions: int = 4, radius: float = 1.0) -> Mesh:
    """Outward-oriented geodesic sphere with vertices on the sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return Mesh.from_arrays(np.array(v) * radius, np.array(faces, dtype=np.int64))


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> Mesh:
    """Axis-aligned box, 12 outward-oriented triangles."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    v = lo + corners * (hi - lo)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    mesh = Mesh.from_arrays(v, np.array(faces, dtype=np.int64))
    if signed_volume(mesh) < 0:
        mesh = flip_winding(mesh)
    return mesh
