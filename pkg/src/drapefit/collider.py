"""Rigid colliders: triangle mesh, per-vertex normals, exact nearest-vertex queries.

Collision handling is vertex-to-vertex: cloth points are matched to their
nearest collider vertex, so colliders must be tessellated densely relative
to the cloth feature scale. Analytic generators (icosphere, torus, prism)
are provided so standard drape scenes need no external assets.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateMesh, EmptyCollider
from .objio import ObjData, read_obj


def compute_vertex_normals(vertices, triangles) -> np.ndarray:
    """Area-weighted vertex normals: sum of incident face cross products, normalized.

    Vertices with no non-degenerate incident face get a zero normal; they are
    excluded from collision correspondence by callers.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    normals = np.zeros_like(vertices)
    if len(triangles):
        a = vertices[triangles[:, 0]]
        face_n = np.cross(
            vertices[triangles[:, 1]] - a, vertices[triangles[:, 2]] - a
        )
        for k in range(3):
            np.add.at(normals, triangles[:, k], face_n)
    norms = np.linalg.norm(normals, axis=1)
    good = norms > 1e-300
    if len(triangles) and not good.any():
        raise DegenerateMesh("all collider faces are degenerate")
    normals[good] /= norms[good, None]
    return normals


class SpatialIndex:
    """Exact nearest-vertex queries with ties broken by lowest vertex index."""

    def __init__(self, vertices, leaf_size: int = 16):
        vertices = np.asarray(vertices, dtype=np.float64)
        if len(vertices) == 0:
            raise EmptyCollider("spatial index needs at least one vertex")
        self.vertices = vertices
        self._tree = cKDTree(vertices, leafsize=leaf_size)

    def __len__(self) -> int:
        return len(self.vertices)

    def nearest(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Nearest vertex id and Euclidean distance for each query point."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        k = min(2, len(self.vertices))
        dist, idx = self._tree.query(pts, k=k)
        if k == 1:
            idx = np.full(len(pts), 0, dtype=np.int64)
            d = np.linalg.norm(pts - self.vertices[0], axis=1)
            return idx, d
        # recompute distances with one fixed formula so ties are detected
        # consistently with the brute-force reference
        d0 = np.linalg.norm(pts - self.vertices[idx[:, 0]], axis=1)
        d1 = np.linalg.norm(pts - self.vertices[idx[:, 1]], axis=1)
        best = idx[:, 0].astype(np.int64)
        swap = (d1 < d0) | ((d1 == d0) & (idx[:, 1] < idx[:, 0]))
        best[swap] = idx[swap, 1]
        dist = np.minimum(d0, d1)
        # a two-way tie can hide a larger tied set; resolve those exactly
        ties = d0 == d1
        for i in np.flatnonzero(ties):
            ball = self._tree.query_ball_point(pts[i], dist[i] * (1 + 1e-12) + 1e-300)
            cand = np.asarray(sorted(ball), dtype=np.int64)
            dd = np.linalg.norm(self.vertices[cand] - pts[i], axis=1)
            j = cand[dd == dd.min()].min()
            best[i] = j
            dist[i] = np.linalg.norm(pts[i] - self.vertices[j])
        return best, dist


def build_index(vertices, leaf_size: int = 16) -> SpatialIndex:
    """Build the nearest-vertex index over a collider's vertices."""
    return SpatialIndex(vertices, leaf_size=leaf_size)


def nearest_vertex(index: SpatialIndex, q) -> tuple[int, float]:
    """Nearest collider vertex to one 3D point: (vertex id, distance)."""
    idx, dist = index.nearest(np.asarray(q, dtype=np.float64)[None, :])
    return int(idx[0]), float(dist[0])


@dataclass
class ColliderMesh:
    """Obstacle mesh with unit vertex normals and a nearest-vertex index."""

    vertices: np.ndarray   # (n, 3)
    triangles: np.ndarray  # (m, 3)
    normals: np.ndarray    # (n, 3), unit where referenced by a face
    index: SpatialIndex = field(repr=False)

    @classmethod
    def from_arrays(cls, vertices, triangles, normals=None) -> "ColliderMesh":
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(vertices) == 0:
            raise EmptyCollider("collider has no vertices")
        if normals is None:
            normals = compute_vertex_normals(vertices, triangles)
        else:
            normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
            lengths = np.linalg.norm(normals, axis=1)
            good = lengths > 1e-300
            normals = normals.copy()
            normals[good] /= lengths[good, None]
        return cls(vertices, triangles, normals, SpatialIndex(vertices))

    @classmethod
    def from_obj(cls, path) -> "ColliderMesh":
        data = read_obj(path)
        return cls.from_obj_data(data)

    @classmethod
    def from_obj_data(cls, data: ObjData) -> "ColliderMesh":
        normals = None
        if data.normals is not None and len(data.normals) == len(data.vertices):
            # honor per-vertex normals only when the mapping is one-to-one
            if data.face_normals is None or np.array_equal(
                data.face_normals, data.faces
            ):
                normals = data.normals
        return cls.from_arrays(data.vertices, data.faces, normals)


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0, 0, 0)) -> ColliderMesh:
    """Subdivided icosahedron projected onto a sphere."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    verts = list(verts)
    cache: dict[tuple[int, int], int] = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            m = verts[i] + verts[j]
            m /= np.linalg.norm(m)
            cache[key] = len(verts)
            verts.append(m)
        return cache[key]

    for _ in range(subdivisions):
        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
        faces = np.asarray(new_faces, dtype=np.int64)
    vertices = np.asarray(verts) * radius + np.asarray(center, dtype=np.float64)
    return ColliderMesh.from_arrays(vertices, faces)


def torus(
    major_radius: float = 0.3,
    minor_radius: float = 0.1,
    major_segments: int = 64,
    minor_segments: int = 32,
    center=(0, 0, 0),
) -> ColliderMesh:
    """Axis-aligned torus around the z axis through ``center``."""
    u = 2 * np.pi * np.arange(major_segments) / major_segments
    v = 2 * np.pi * np.arange(minor_segments) / minor_segments
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = major_radius + minor_radius * np.cos(vv)
    verts = np.stack(
        [ring * np.cos(uu), ring * np.sin(uu), minor_radius * np.sin(vv)], axis=2
    ).reshape(-1, 3) + np.asarray(center, dtype=np.float64)
    faces = []
    for i in range(major_segments):
        for j in range(minor_segments):
            a = i * minor_segments + j
            b = ((i + 1) % major_segments) * minor_segments + j
            a2 = i * minor_segments + (j + 1) % minor_segments
            b2 = ((i + 1) % major_segments) * minor_segments + (j + 1) % minor_segments
            faces.append([a, b, b2])
            faces.append([a, b2, a2])
    return ColliderMesh.from_arrays(verts, np.asarray(faces, dtype=np.int64))


def prism(
    side: float = 0.4,
    length: float = 1.0,
    axis_segments: int = 48,
    side_segments: int = 24,
    center=(0, 0, 0),
) -> ColliderMesh:
    """Triangular prism along the y axis, equilateral cross-section, open ends.

    The cross-section triangle points up (+z); collision only needs the
    lateral surface, which stays watertight around the three long edges.
    """
    r = side / np.sqrt(3.0)  # circumradius of the cross-section
    ang = np.array([np.pi / 2, 7 * np.pi / 6, 11 * np.pi / 6])
    corners = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)  # (3, 2) in xz
    ring = []
    for k in range(3):
        a, b = corners[k], corners[(k + 1) % 3]
        for s in range(side_segments):
            t = s / side_segments
            ring.append((1 - t) * a + t * b)
    ring = np.asarray(ring)            # (3*side_segments, 2) cross-section loop
    n_ring = len(ring)
    ys = np.linspace(-length / 2, length / 2, axis_segments + 1)
    verts = np.stack(
        [
            np.repeat(ring[:, 0][None, :], len(ys), axis=0).ravel(),
            np.repeat(ys, n_ring),
            np.repeat(ring[:, 1][None, :], len(ys), axis=0).ravel(),
        ],
        axis=1,
    ) + np.asarray(center, dtype=np.float64)
    faces = []
    for i in range(axis_segments):
        for j in range(n_ring):
            a = i * n_ring + j
            b = i * n_ring + (j + 1) % n_ring
            c = (i + 1) * n_ring + j
            d = (i + 1) * n_ring + (j + 1) % n_ring
            faces.append([a, d, b])
            faces.append([a, c, d])
    return ColliderMesh.from_arrays(verts, np.asarray(faces, dtype=np.int64))
