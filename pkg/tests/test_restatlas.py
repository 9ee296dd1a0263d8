import numpy as np
import pytest

from drapefit import (
    GarmentRestMesh,
    RestAtlas,
    barycentric_coords,
    build_atlas,
    locate_triangle,
    rest_length,
    rest_position,
    square_cloth,
)
from drapefit.errors import DegenerateTriangle, InvalidUvPoint
from drapefit.restatlas import dump_atlas_png


def brute_force_locate(mesh, p, tol=-1e-9):
    """Independent containment oracle: scan every triangle, lowest index wins."""
    for t, tri in enumerate(mesh.triangles):
        a, b, c = (mesh.uvs[k] for k in tri)
        try:
            lam = barycentric_coords(p, a, b, c)
        except DegenerateTriangle:
            continue
        if lam.lambda1 >= tol and lam.lambda2 >= tol and lam.lambda3 >= tol:
            return t
    return None


class TestBarycentric:
    def test_vertex_case(self):
        a, b, c = (0.1, 0.2), (0.9, 0.3), (0.4, 0.8)
        lam = barycentric_coords(a, a, b, c)
        assert np.allclose(lam.as_array(), [1, 0, 0], atol=1e-12)

    def test_centroid(self):
        a, b, c = np.array([0.1, 0.2]), np.array([0.9, 0.3]), np.array([0.4, 0.8])
        lam = barycentric_coords((a + b + c) / 3, a, b, c)
        assert np.allclose(lam.as_array(), [1 / 3, 1 / 3, 1 / 3], atol=1e-12)

    def test_hand_solved_system(self):
        # lambda solves [[ax bx cx],[ay by cy],[1 1 1]] lam = [px py 1]
        a, b, c = (0.0, 0.0), (1.0, 0.0), (0.0, 1.0)
        lam = barycentric_coords((0.25, 0.5), a, b, c)
        mat = np.array([[0, 1, 0], [0, 0, 1], [1, 1, 1]], dtype=float)
        expected = np.linalg.solve(mat, np.array([0.25, 0.5, 1.0]))
        assert np.allclose(lam.as_array(), expected, atol=1e-12)
        assert np.allclose(lam.as_array(), [0.25, 0.25, 0.5], atol=1e-12)

    def test_degenerate_raises(self):
        with pytest.raises(DegenerateTriangle):
            barycentric_coords((0, 0), (0, 0), (1, 1), (2, 2))

    def test_reconstruction_random_triangles(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            tri = rng.uniform(0, 1, (3, 2))
            e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
            if abs(e1[0] * e2[1] - e1[1] * e2[0]) < 1e-3:
                continue
            w = rng.dirichlet([1, 1, 1])
            p = w @ tri
            lam = barycentric_coords(p, *tri)
            rebuilt = lam.as_array() @ tri
            assert np.allclose(rebuilt, p, atol=1e-12)
            assert abs(sum(lam.as_array()) - 1.0) < 1e-9

    def test_affine_invariance(self):
        rng = np.random.default_rng(5)
        tri = np.array([[0.1, 0.1], [0.8, 0.2], [0.3, 0.9]])
        p = np.array([0.4, 0.4])
        base = barycentric_coords(p, *tri).as_array()
        for _ in range(20):
            mat = rng.normal(0, 1, (2, 2))
            if abs(np.linalg.det(mat)) < 0.1:
                continue
            shift = rng.normal(0, 2, 2)
            mapped = barycentric_coords(
                mat @ p + shift, *(mat @ v + shift for v in tri)
            ).as_array()
            assert np.allclose(mapped, base, atol=1e-9)


class TestLocate:
    def test_vertex_tie_lowest_triangle(self, planar_mesh):
        # an interior mesh vertex touches several triangles; ties resolve low
        vid = 4 * 9 + 4
        p = planar_mesh.uvs[vid]
        got = locate_triangle(planar_mesh, p)
        assert got == brute_force_locate(planar_mesh, p)

    def test_outside_returns_none(self, half_mesh):
        assert locate_triangle(half_mesh, (0.9, 0.9)) is None
        assert locate_triangle(half_mesh, (1.5, 0.2)) is None

    def test_matches_brute_force_on_random_points(self, curved_mesh, half_mesh):
        rng = np.random.default_rng(42)
        for mesh in (curved_mesh, half_mesh):
            pts = rng.uniform(-0.05, 1.05, (10_000, 2))
            tri, _ = mesh.locator().locate(pts)
            sample = rng.choice(len(pts), 400, replace=False)
            for k in sample:
                expect = brute_force_locate(mesh, pts[k])
                got = int(tri[k]) if tri[k] >= 0 else None
                assert got == expect, (pts[k], got, expect)


class TestRestPosition:
    def test_vertex_lookup(self, curved_mesh):
        for vid in (0, 17, 60):
            pos = rest_position(curved_mesh, curved_mesh.uvs[vid])
            assert np.allclose(pos, curved_mesh.vertices[vid], atol=1e-12)

    def test_identity_plane(self, planar_mesh):
        assert np.allclose(
            rest_position(planar_mesh, (0.3, 0.7)), [0.3, 0.7, 0.0], atol=1e-15
        )

    def test_matches_per_triangle_oracle(self, curved_mesh):
        rng = np.random.default_rng(3)
        for _ in range(300):
            p = rng.uniform(0.01, 0.99, 2)
            t = brute_force_locate(curved_mesh, p)
            tri = curved_mesh.triangles[t]
            lam = barycentric_coords(p, *(curved_mesh.uvs[k] for k in tri)).as_array()
            expect = lam @ curved_mesh.vertices[tri]
            assert np.allclose(rest_position(curved_mesh, p), expect, atol=1e-12)

    def test_invalid_point_raises(self, half_mesh):
        with pytest.raises(InvalidUvPoint):
            rest_position(half_mesh, (0.95, 0.95))


class TestRestLength:
    def test_zero_for_same_point(self, curved_mesh):
        assert rest_length(curved_mesh, (0.4, 0.4), (0.4, 0.4)) == 0.0

    def test_345_triangle(self, planar_mesh):
        assert rest_length(planar_mesh, (0.0, 0.0), (0.3, 0.4)) == pytest.approx(
            0.5, abs=1e-12
        )

    def test_symmetry_exact(self, curved_mesh):
        rng = np.random.default_rng(9)
        for _ in range(50):
            a, b = rng.uniform(0.02, 0.98, 2), rng.uniform(0.02, 0.98, 2)
            assert rest_length(curved_mesh, a, b) == rest_length(curved_mesh, b, a)

    def test_uniform_scaling_oracle(self):
        # a plane scaled by S in 3D has rest lengths S * |a - b|
        scale = 2.75
        base = square_cloth(7)
        mesh = GarmentRestMesh(base.vertices * scale, base.uvs, base.triangles)
        rng = np.random.default_rng(21)
        for _ in range(50):
            a, b = rng.uniform(0.01, 0.99, 2), rng.uniform(0.01, 0.99, 2)
            assert rest_length(mesh, a, b) == pytest.approx(
                scale * np.linalg.norm(a - b), rel=1e-12
            )


class TestAtlas:
    def test_identity_resolution_4(self, planar_mesh):
        atlas = build_atlas(planar_mesh, 4)
        assert atlas.mask.all() and atlas.mask.size == 16
        meters = atlas.positions_meters()
        for i in range(4):
            for j in range(4):
                center = ((j + 0.5) / 4, (i + 0.5) / 4)
                assert np.allclose(meters[i, j], [*center, 0.0], atol=1e-9)

    def test_half_coverage_mask(self, half_mesh):
        atlas = build_atlas(half_mesh, 32)
        jj, ii = np.meshgrid(np.arange(32), np.arange(32))
        u = (jj + 0.5) / 32
        v = (ii + 0.5) / 32
        assert np.array_equal(atlas.mask, u + v <= 1.0 + 1e-12)

    def test_matches_barycentric_oracle(self, curved_mesh):
        atlas = build_atlas(curved_mesh, 64)
        meters = atlas.positions_meters()
        rng = np.random.default_rng(8)
        valid = np.argwhere(atlas.mask)
        pick = valid[rng.choice(len(valid), 1000)]
        for i, j in pick:
            center = ((j + 0.5) / 64, (i + 0.5) / 64)
            assert np.allclose(
                meters[i, j], rest_position(curved_mesh, center), atol=1e-6
            )

    def test_normalization_convention(self, curved_mesh):
        atlas = build_atlas(curved_mesh, 16)
        lo = curved_mesh.vertices.min(axis=0)
        extent = (curved_mesh.vertices.max(axis=0) - lo).max()
        assert atlas.scale == pytest.approx(1.0 / extent)
        assert np.allclose(atlas.offset, lo)
        assert atlas.positions[atlas.mask].min() >= -1e-9
        assert atlas.positions[atlas.mask].max() <= 1.0 + 1e-9

    def test_thread_schedule_independence(self, curved_mesh):
        a = build_atlas(curved_mesh, 32, threads=1)
        b = build_atlas(curved_mesh, 32, threads=3)
        assert np.array_equal(a.mask, b.mask)
        assert np.array_equal(a.positions, b.positions)

    def test_minimum_resolution(self, planar_mesh):
        assert build_atlas(planar_mesh, 2).resolution == 2
        with pytest.raises(ValueError):
            build_atlas(planar_mesh, 1)

    def test_save_load_roundtrip(self, planar_mesh, tmp_path):
        atlas = build_atlas(planar_mesh, 8)
        path = tmp_path / "atlas.npz"
        atlas.save(path)
        back = RestAtlas.load(path)
        assert back.resolution == atlas.resolution
        assert np.array_equal(back.positions, atlas.positions)
        assert np.array_equal(back.mask, atlas.mask)

    def test_png_dump_roundtrip(self, curved_mesh, tmp_path):
        from drapefit.pngio import read_png

        atlas = build_atlas(curved_mesh, 16)
        png = tmp_path / "atlas.png"
        sidecar = tmp_path / "atlas.txt"
        dump_atlas_png(atlas, png, sidecar)
        img = read_png(png)
        assert img.shape == (16, 16, 4)
        assert img.dtype == np.uint16
        # alpha channel carries the mask, rgb is 16-bit-quantized position
        assert np.array_equal(img[:, :, 3] > 0, atlas.mask)
        quant = img[:, :, :3].astype(np.float64) / 65535.0
        assert np.allclose(
            quant[atlas.mask], atlas.positions[atlas.mask], atol=1.0 / 65535.0
        )
        assert "scale" in sidecar.read_text()


class TestMeshValidation:
    def test_rejects_uv_out_of_range(self):
        mesh = GarmentRestMesh(
            np.zeros((3, 3)), np.array([[0, 0], [1.5, 0], [0, 1]]), [[0, 1, 2]]
        )
        with pytest.raises(ValueError):
            mesh.validate()

    def test_rejects_degenerate_uv_triangle(self):
        mesh = GarmentRestMesh(
            np.zeros((3, 3)), np.array([[0, 0], [1, 0], [0.5, 0]]), [[0, 1, 2]]
        )
        with pytest.raises(DegenerateTriangle):
            mesh.validate()

    def test_rejects_overlapping_interiors(self):
        uvs = np.array([[0, 0], [1, 0], [0, 1], [0.6, 0.6]])
        mesh = GarmentRestMesh(
            np.zeros((4, 3)), uvs, [[0, 1, 2], [0, 1, 3]]
        )
        with pytest.raises(ValueError):
            mesh.validate()

    def test_accepts_touching_triangles(self, planar_mesh, half_mesh):
        planar_mesh.validate()
        half_mesh.validate()
