"""Sampling patches: four equilateral UV triangles around a point, lifted to 3D.

Each patch is a midpoint subdivision of an equilateral outer triangle with
side 2s centered on the sample point: one center face plus three corner
faces, six vertices, nine edges of UV length s, and three face pairs that
each share one inner edge. The whole patch rotates rigidly by an in-plane
angle drawn from [0, 2*pi/3] (the construction has threefold symmetry).
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidStructure
from .restatlas import GarmentRestMesh
from .surface import SurfaceModel, forward_batch

# vertex order: [A, B, C, M_AB, M_BC, M_CA]
FACES = np.array(
    [
        [3, 4, 5],  # center face (all three midpoints)
        [0, 3, 5],  # corner face at A
        [1, 4, 3],  # corner face at B
        [2, 5, 4],  # corner face at C
    ],
    dtype=np.int64,
)

# inner midpoint edges first, then the six outer half-edges
EDGES = np.array(
    [
        [3, 4],
        [4, 5],
        [5, 3],
        [0, 3],
        [3, 1],
        [1, 4],
        [4, 2],
        [2, 5],
        [5, 0],
    ],
    dtype=np.int64,
)
INNER_EDGE_COUNT = 3

# center face paired with each corner face; shared edges are the inner ones
FACE_PAIRS = np.array([[0, 1], [0, 2], [0, 3]], dtype=np.int64)

# angles of A, B, C on the circumcircle, before adding the patch rotation
_CORNER_ANGLES = np.array([np.pi / 2, 7 * np.pi / 6, 11 * np.pi / 6])


@dataclass
class LocalStructure2D:
    """UV-space sampling patch around ``center`` with rotation ``theta``."""

    center: np.ndarray     # (2,)
    theta: float
    side: float            # small-triangle side length s, UV units
    vertices: np.ndarray   # (6, 2) in [A, B, C, M_AB, M_BC, M_CA] order

    @property
    def faces(self) -> np.ndarray:
        return FACES

    @property
    def edges(self) -> np.ndarray:
        return EDGES

    @property
    def face_pairs(self) -> np.ndarray:
        return FACE_PAIRS


@dataclass
class LocalStructure3D:
    """The patch lifted onto the deformed surface, plus rest lengths per edge."""

    positions: np.ndarray     # (6, 3) deformed vertices, meters
    rest_lengths: np.ndarray  # (9,) in EDGES order, meters


def structure_vertices(centers, thetas, side: float) -> np.ndarray:
    """Patch vertices for a batch of centers/rotations; returns (B, 6, 2)."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    thetas = np.atleast_1d(np.asarray(thetas, dtype=np.float64))
    circumradius = 2.0 * side / np.sqrt(3.0)
    ang = thetas[:, None] + _CORNER_ANGLES[None, :]       # (B, 3)
    corners = centers[:, None, :] + circumradius * np.stack(
        [np.cos(ang), np.sin(ang)], axis=2
    )                                                     # (B, 3, 2)
    mids = 0.5 * (corners + np.roll(corners, -1, axis=1))  # M_AB, M_BC, M_CA
    return np.concatenate([corners, mids], axis=1)


def build_structure_2d(p, side: float, theta: float) -> LocalStructure2D:
    """Construct the UV patch around p: outer side 2s, corner A at theta + pi/2."""
    if side <= 0:
        raise ValueError("structure side must be positive")
    verts = structure_vertices(np.asarray(p, dtype=np.float64)[None, :], [theta], side)[0]
    return LocalStructure2D(
        center=np.asarray(p, dtype=np.float64),
        theta=float(theta),
        side=float(side),
        vertices=verts,
    )


def dump_structure_obj(s3d: LocalStructure3D, path) -> None:
    """Write one lifted patch as a tiny OBJ for visual inspection."""
    from .objio import write_obj

    write_obj(path, s3d.positions, FACES, name="sampling-patch")


def lift_structure(
    model: SurfaceModel, mesh: GarmentRestMesh, s2d: LocalStructure2D
) -> LocalStructure3D:
    """Lift a UV patch onto the current surface.

    Raises InvalidStructure when any of the six vertices falls outside the
    garment's UV triangulation (callers resample the point).
    """
    loc = mesh.locator()
    rest, valid = loc.rest_positions(s2d.vertices)
    if not valid.all():
        raise InvalidStructure(
            f"{int((~valid).sum())} structure vertices outside the valid UV region"
        )
    disp, _ = forward_batch(model, s2d.vertices)
    positions = rest + disp.astype(np.float64)
    rest_lengths = np.linalg.norm(
        rest[EDGES[:, 0]] - rest[EDGES[:, 1]], axis=1
    )
    return LocalStructure3D(positions=positions, rest_lengths=rest_lengths)
