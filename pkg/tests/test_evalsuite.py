import numpy as np
import pytest

from sdfrecon import evalsuite as ev
from sdfrecon.geometry import SceneBounds


def unit_sphere_sdf(x):
    return np.linalg.norm(np.asarray(x), axis=-1) - 1.0


BOUNDS = SceneBounds([-1.3, -1.3, -1.3], [1.3, 1.3, 1.3])


def test_marching_cubes_sphere_vertex_radii():
    mesh = ev.marching_cubes(unit_sphere_sdf, BOUNDS, 64)
    cell = 2.6 / 63
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.all(np.abs(radii - 1.0) <= 2 * cell)


def test_marching_cubes_empty_surface_error():
    with pytest.raises(ev.EmptySurfaceError):
        ev.marching_cubes(lambda x: unit_sphere_sdf(x) + 10.0, BOUNDS, 32)


def test_marching_cubes_sphere_is_closed():
    mesh = ev.marching_cubes(unit_sphere_sdf, BOUNDS, 64)
    assert ev.is_watertight(mesh)


def test_marching_cubes_normals_point_to_positive_sdf():
    mesh = ev.marching_cubes(unit_sphere_sdf, BOUNDS, 48)
    v, f = mesh.vertices, mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    centroids = v[f].mean(axis=1)
    agree = np.einsum("ij,ij->i", n, centroids) > 0
    assert agree.mean() > 0.99


def test_marching_cubes_vertices_near_zero_level():
    mesh = ev.marching_cubes(unit_sphere_sdf, BOUNDS, 32)
    cell = 2.6 / 31
    assert np.abs(unit_sphere_sdf(mesh.vertices)).max() < cell


def test_chamfer_identical_sets():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(100, 3))
    assert ev.chamfer(a, a) == 0.0


def test_chamfer_singletons():
    assert ev.chamfer([[0, 0, 0]], [[1, 0, 0]]) == pytest.approx(1.0)


def test_chamfer_symmetry():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(60, 3))
    b = rng.normal(size=(45, 3))
    assert ev.chamfer(a, b) == ev.chamfer(b, a)


def test_chamfer_accelerated_equals_brute_force():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(500, 3))
    b = rng.normal(size=(500, 3))
    assert ev.chamfer(a, b, accelerated=True) == \
        ev.chamfer(a, b, accelerated=False)


def test_p2s_points_on_mesh():
    mesh = ev.marching_cubes(unit_sphere_sdf, BOUNDS, 24)
    pts = ev.sample_surface(mesh, 300, seed=3)
    assert ev.p2s(pts, mesh) < 1e-9


def test_p2s_point_above_triangle():
    mesh = ev.TriangleMesh([[0, 0, 0], [4, 0, 0], [0, 4, 0]], [[0, 1, 2]])
    assert ev.p2s([[1.0, 1.0, 0.7]], mesh) == pytest.approx(0.7)


def test_p2s_accelerated_equals_brute_force():
    rng = np.random.default_rng(4)
    verts = rng.normal(size=(60, 3))
    faces = rng.integers(0, 60, size=(100, 3))
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) \
        & (faces[:, 0] != faces[:, 2])
    mesh = ev.TriangleMesh(verts, faces[keep])
    pts = rng.normal(size=(200, 3)) * 1.5
    fast = ev.point_mesh_distances(pts, mesh, accelerated=True)
    slow = ev.point_mesh_distances(pts, mesh, accelerated=False)
    np.testing.assert_array_equal(fast, slow)


def test_p2s_rigid_invariance():
    rng = np.random.default_rng(5)
    verts = rng.normal(size=(30, 3))
    faces = np.array([[i, i + 1, i + 2] for i in range(0, 27, 3)])
    mesh = ev.TriangleMesh(verts, faces)
    pts = rng.normal(size=(50, 3))
    d0 = ev.p2s(pts, mesh)
    th = 0.7
    Q = np.array([[np.cos(th), -np.sin(th), 0],
                  [np.sin(th), np.cos(th), 0], [0, 0, 1.0]])
    t = np.array([0.3, -1.2, 0.8])
    mesh2 = ev.TriangleMesh(verts @ Q.T + t, faces)
    d1 = ev.p2s(pts @ Q.T + t, mesh2)
    assert d1 == pytest.approx(d0, abs=1e-12)


def test_psnr_closed_forms():
    a = np.zeros((8, 8, 3))
    b = np.full((8, 8, 3), 0.1)
    assert ev.psnr(a, b, 1.0) == pytest.approx(20.0)
    b2 = np.ones((8, 8, 3))
    assert ev.psnr(a, b2, 1.0) == pytest.approx(0.0)
    assert ev.psnr(a, a, 1.0) == ev.PSNR_INF


def test_psnr_matches_scalar_recompute():
    rng = np.random.default_rng(6)
    a = rng.random((12, 9, 3))
    b = rng.random((12, 9, 3))
    mse = 0.0
    for i in range(12):
        for j in range(9):
            for k in range(3):
                mse += (a[i, j, k] - b[i, j, k]) ** 2
    mse /= 12 * 9 * 3
    assert ev.psnr(a, b, 1.0) == pytest.approx(10 * np.log10(1.0 / mse))


def test_ssim_identical_images():
    rng = np.random.default_rng(7)
    a = rng.random((32, 32, 3))
    assert ev.ssim(a, a) == pytest.approx(1.0)


def test_ssim_constant_images_closed_form():
    a = np.zeros((32, 32))
    b = np.ones((32, 32))
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    # means 0 and 1, zero variances: ((2*0*1+c1)*(0+c2)) / ((0+1+c1)*(0+c2))
    expected = c1 / (1.0 + c1)
    assert ev.ssim(a, b) == pytest.approx(expected)


def test_ssim_symmetric():
    rng = np.random.default_rng(8)
    a = rng.random((24, 24))
    b = rng.random((24, 24))
    assert ev.ssim(a, b) == ev.ssim(b, a)


def test_ssim_rejects_tiny_images():
    with pytest.raises(ev.EvalError):
        ev.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ply_roundtrip(tmp_path):
    mesh = ev.marching_cubes(unit_sphere_sdf, BOUNDS, 16)
    ev.save_ply(tmp_path / "m.ply", mesh)
    loaded = ev.load_ply(tmp_path / "m.ply")
    np.testing.assert_array_equal(mesh.vertices, loaded.vertices)
    np.testing.assert_array_equal(mesh.faces, loaded.faces)


def test_evaluate_self_consistency():
    mesh = ev.marching_cubes(unit_sphere_sdf, BOUNDS, 24)
    rng = np.random.default_rng(9)
    imgs = [rng.random((16, 16, 3)) for _ in range(2)]
    report = ev.evaluate(lambda i: imgs[i], imgs, mesh, mesh)
    assert report.psnr == ev.PSNR_INF
    assert report.ssim == pytest.approx(1.0)
    assert report.chamfer < 0.05 and report.p2s < 1e-9
