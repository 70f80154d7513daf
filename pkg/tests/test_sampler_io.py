import numpy as np
import pytest
from scipy import stats

from viscosdf.errors import DataError
from viscosdf.models import ShapeSpec
from viscosdf.sampler_io import (
    PointCloud,
    load_point_cloud,
    mandelbrot_inside,
    normalize,
    sample_batch,
    synth_shape,
    write_point_cloud,
)


def test_load_xyz(tmp_path):
    path = tmp_path / "three.xyz"
    path.write_text("0 0 0\n1.5 -2 3\n# comment\n0.25 0.5 0.75\n")
    pc = load_point_cloud(path)
    assert pc.dim == 3
    np.testing.assert_array_equal(pc.points, [[0, 0, 0], [1.5, -2, 3], [0.25, 0.5, 0.75]])


def test_load_xyz_with_normals_drops_them(tmp_path):
    path = tmp_path / "normals.xyz"
    path.write_text("1 2 3 0 0 1\n4 5 6 0 1 0\n")
    np.testing.assert_array_equal(load_point_cloud(path).points, [[1, 2, 3], [4, 5, 6]])


def test_load_xyz_names_bad_line(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("0 0 0\n1 two 3\n")
    with pytest.raises(DataError) as excinfo:
        load_point_cloud(path)
    assert excinfo.value.line == 2
    assert ":2:" in str(excinfo.value)


def test_load_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_point_cloud(tmp_path / "nothing.xyz")


def test_ply_round_trip(tmp_path):
    points = np.random.default_rng(0).normal(size=(50, 3))
    pc = PointCloud(3, points, (points.min(0), points.max(0)))
    back = load_point_cloud(write_point_cloud(pc, tmp_path / "cloud.ply"))
    np.testing.assert_array_equal(back.points, points)


def test_ply_ignores_normals(tmp_path):
    path = tmp_path / "n.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\nend_header\n"
        "1 2 3 0 0 1\n4 5 6 1 0 0\n"
    )
    np.testing.assert_array_equal(load_point_cloud(path).points, [[1, 2, 3], [4, 5, 6]])


def test_ply_bad_row(tmp_path):
    path = tmp_path / "bad.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
        "end_header\n1 2\n3 oops\n"
    )
    with pytest.raises(DataError) as excinfo:
        load_point_cloud(path)
    assert excinfo.value.line == 8


def test_normalize_box_and_inverse():
    raw = np.random.default_rng(1).uniform(-3, 7, size=(200, 3))
    pc = PointCloud(3, raw, (raw.min(0), raw.max(0)))
    n = normalize(pc)
    extent = n.points.max(0) - n.points.min(0)
    assert extent.max() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose((n.points.max(0) + n.points.min(0)) / 2, 0.0, atol=1e-12)
    np.testing.assert_allclose(n.bbox[0], -0.55)
    np.testing.assert_allclose(n.bbox[1], 0.55)
    np.testing.assert_allclose(n.denormalize(n.points), raw, atol=1e-12)
    np.testing.assert_allclose(n.to_normalized(raw), n.points, atol=1e-12)


def test_normalize_is_idempotent():
    raw = np.random.default_rng(2).uniform(-1, 1, size=(100, 2))
    once = normalize(PointCloud(2, raw, (raw.min(0), raw.max(0))))
    twice = normalize(once)
    np.testing.assert_allclose(twice.points, once.points, atol=1e-12)


def test_normalize_rejects_degenerate():
    pts = np.ones((5, 3))
    with pytest.raises(ValueError):
        normalize(PointCloud(3, pts, (pts.min(0), pts.max(0))))
    with pytest.raises(ValueError):
        normalize(PointCloud(3, np.random.default_rng(0).normal(size=(5, 3)), (np.zeros(3), np.ones(3))), box_scale=0.5)


def _unit_box_cloud(n=100):
    pts = np.random.default_rng(0).uniform(-0.5, 0.5, size=(n, 3))
    return PointCloud(3, pts, (np.full(3, -0.5), np.full(3, 0.5)))


def test_sample_batch_deterministic():
    pc = _unit_box_cloud()
    a = sample_batch(pc, 42, 30, 40)
    b = sample_batch(pc, 42, 30, 40)
    np.testing.assert_array_equal(a.surface_points, b.surface_points)
    np.testing.assert_array_equal(a.domain_points, b.domain_points)
    assert a.domain_points.shape == (40, 3)


def test_sample_batch_with_replacement():
    pc = _unit_box_cloud(10)
    batch = sample_batch(pc, 0, 25, 5)
    assert batch.surface_points.shape == (25, 3)


def test_sample_batch_domain_statistics():
    batch = sample_batch(_unit_box_cloud(), np.random.default_rng(5), 10, 100_000)
    sigma = 1.0 / np.sqrt(12 * 100_000)
    assert np.all(np.abs(batch.domain_points.mean(axis=0)) < 3 * sigma)


def test_domain_samples_are_uniform_per_axis():
    batch = sample_batch(_unit_box_cloud(), 11, 10, 100_000)
    for axis in range(3):
        column = batch.domain_points[:, axis]
        assert column.min() >= -0.5 and column.max() <= 0.5
        assert stats.kstest(column, stats.uniform(loc=-0.5, scale=1.0).cdf).statistic < 0.02


def test_sample_batch_rejects_empty_sizes():
    with pytest.raises(ValueError):
        sample_batch(_unit_box_cloud(), 0, 0, 10)


def test_circle_samples_on_circle():
    pc, shape = synth_shape(ShapeSpec(kind="circle", radius=0.5, center=(0.1, -0.2)), 500, 0)
    np.testing.assert_allclose(np.linalg.norm(pc.points - [0.1, -0.2], axis=1), 0.5, atol=1e-9)
    assert shape.analytic_sdf(np.array([[0.1, -0.2]]))[0] == pytest.approx(-0.5)


def test_sphere_and_torus_sdf_vanish_on_samples():
    for spec in (ShapeSpec(kind="sphere", radius=0.4), ShapeSpec(kind="torus")):
        pc, shape = synth_shape(spec, 300, 1)
        assert pc.dim == 3
        np.testing.assert_allclose(shape.analytic_sdf(pc.points), 0.0, atol=1e-12)


def test_torus_radii_validated():
    with pytest.raises(ValueError):
        ShapeSpec(kind="torus", major_radius=0.2, minor_radius=0.3)


def test_synth_shape_deterministic():
    a, _ = synth_shape(ShapeSpec(kind="sphere"), 100, 3)
    b, _ = synth_shape(ShapeSpec(kind="sphere"), 100, 3)
    np.testing.assert_array_equal(a.points, b.points)


def test_mandelbrot_brackets_straddle_boundary():
    spec = ShapeSpec(kind="mandelbrot_boundary", max_iter=200, bracket_width=1e-4)
    pc, shape = synth_shape(spec, 64, 0)
    lo, hi = shape.brackets[:, 0], shape.brackets[:, 1]
    assert mandelbrot_inside(lo[:, 0] + 1j * lo[:, 1], spec.max_iter).all()
    assert not mandelbrot_inside(hi[:, 0] + 1j * hi[:, 1], spec.max_iter).any()
    assert np.linalg.norm(hi - lo, axis=1).max() <= 1e-4 + 1e-12
    assert shape.analytic_sdf is None


def test_mandelbrot_inside_known_points():
    assert mandelbrot_inside(np.array([0.0, -1.0, 0.25]), 100).all()
    assert not mandelbrot_inside(np.array([1.0, 0.5 + 0.5j, -2.5]), 100).any()


def test_shape_moves_with_the_cloud():
    raw, shape = synth_shape(ShapeSpec(kind="circle", radius=2.0, center=(5.0, 5.0)), 400, 0)
    cloud = normalize(raw)
    framed = shape.in_frame(cloud)
    np.testing.assert_allclose(framed.analytic_sdf(cloud.points), 0.0, atol=1e-12)
