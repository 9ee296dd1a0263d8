import numpy as np
import pytest

from drapefit import GarmentRestMesh, square_cloth


@pytest.fixture
def planar_mesh():
    """Identity-parameterized flat cloth: rest position of (u, v) is (u, v, 0)."""
    return square_cloth(9)


@pytest.fixture
def curved_mesh():
    """Bumpy sheet with the identity UV layout; exercises real interpolation."""
    base = square_cloth(11)
    verts = base.vertices.copy()
    verts[:, 2] = 0.08 * np.sin(2.5 * verts[:, 0]) * np.cos(1.7 * verts[:, 1])
    verts[:, 0] += 0.03 * np.sin(verts[:, 1] * 4.0)
    mesh = GarmentRestMesh(verts, base.uvs, base.triangles, name="bumpy")
    mesh.validate()
    return mesh


@pytest.fixture
def half_mesh():
    """Two triangles covering only the lower-left UV half below u+v=1."""
    vertices = np.array(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.5, 0.5, 0]], dtype=float
    )
    uvs = np.array([[0, 0], [1, 0], [0, 1], [0.5, 0.5]], dtype=float)
    triangles = np.array([[0, 1, 3], [0, 3, 2]], dtype=np.int64)
    return GarmentRestMesh(vertices, uvs, triangles, name="half")
