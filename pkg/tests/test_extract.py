import numpy as np
import pytest

from viscosdf.errors import DataError
from viscosdf.extract import (
    GridField,
    SurfaceMesh,
    contour_frame,
    eval_grid,
    export_mesh,
    grid_geometry,
    load_grid,
    load_mesh,
    march,
    save_grid,
    write_contour_csv,
)
from viscosdf.field_net import field_values


def circle_sdf(x):
    return np.linalg.norm(x, axis=1) - 0.3


def sphere_sdf(x):
    return np.linalg.norm(x, axis=1) - 0.35


BOX2 = (np.full(2, -0.5), np.full(2, 0.5))
BOX3 = (np.full(3, -0.5), np.full(3, 0.5))


def test_grid_geometry_indexing():
    origin, h, shape = grid_geometry(BOX2, 11)
    assert h == pytest.approx(0.1)
    assert shape == (11, 11)
    grid = GridField(2, origin, h, shape, np.zeros(shape))
    pts = grid.points().reshape(11, 11, 2)
    np.testing.assert_allclose(pts[3, 7], origin + h * np.array([3, 7]))


def test_eval_grid_with_callable():
    grid = eval_grid(circle_sdf, BOX2, 33)
    np.testing.assert_array_equal(grid.values.ravel(), circle_sdf(grid.points()))


def test_eval_grid_matches_network(tiny_net):
    grid = eval_grid(tiny_net, BOX2, 17, workers=3, slab_size=50)
    np.testing.assert_allclose(grid.values.ravel(), field_values(tiny_net, grid.points()), rtol=1e-12, atol=1e-14)


def test_eval_grid_independent_of_workers(tiny_net):
    a = eval_grid(tiny_net, BOX2, 40, workers=1, slab_size=100)
    b = eval_grid(tiny_net, BOX2, 40, workers=4, slab_size=100)
    np.testing.assert_array_equal(a.values, b.values)


def test_grid_file_round_trip(tmp_path):
    grid = eval_grid(sphere_sdf, BOX3, 9)
    back = load_grid(save_grid(grid, tmp_path / "g.vgrd"))
    assert back.shape == grid.shape
    assert back.spacing == grid.spacing
    np.testing.assert_array_equal(back.values, grid.values)
    np.testing.assert_array_equal(back.origin, grid.origin)


def test_grid_bad_magic(tmp_path):
    path = tmp_path / "g.vgrd"
    path.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(DataError):
        load_grid(path)


def test_grid_rejects_wrong_size():
    with pytest.raises(ValueError):
        GridField(2, np.zeros(2), 0.1, (3, 3), np.zeros(8))


def test_all_positive_grid_gives_empty_mesh():
    grid = eval_grid(lambda x: np.ones(len(x)), BOX3, 8)
    assert march(grid).is_empty


def test_tiny_grid_runs():
    grid = eval_grid(circle_sdf, BOX2, 2)
    assert grid.shape == (2, 2)
    march(grid)


@pytest.mark.parametrize("box", [BOX2, BOX3])
def test_plane_vertices_on_plane(box):
    grid = eval_grid(lambda x: x[:, 0] - 0.0312, box, 21)
    mesh = march(grid)
    assert not mesh.is_empty
    np.testing.assert_allclose(mesh.vertices[:, 0], 0.0312, atol=1e-12)


def test_vertices_sit_on_interpolated_level_set():
    grid = eval_grid(sphere_sdf, BOX3, 24)
    mesh = march(grid, 0.0)
    np.testing.assert_allclose(grid.interpolate(mesh.vertices), 0.0, atol=1e-9)


def test_circle_contour_is_closed_and_near_radius():
    grid = eval_grid(circle_sdf, BOX2, 64)
    mesh = march(grid)
    assert mesh.open_edges() == 0
    np.testing.assert_allclose(np.linalg.norm(mesh.vertices, axis=1), 0.3, atol=grid.spacing)
    lines = mesh.polylines()
    assert len(lines) == 1
    assert lines[0][0] == lines[0][-1]


def test_sphere_mesh_closed_and_near_radius():
    grid = eval_grid(sphere_sdf, BOX3, 48)
    mesh = march(grid)
    assert mesh.open_edges() == 0
    np.testing.assert_allclose(np.linalg.norm(mesh.vertices, axis=1), 0.35, atol=grid.spacing)


@pytest.mark.slow
def test_sphere_mesh_closed_at_128():
    grid = eval_grid(sphere_sdf, BOX3, 128)
    mesh = march(grid)
    assert mesh.open_edges() == 0
    np.testing.assert_allclose(np.linalg.norm(mesh.vertices, axis=1), 0.35, atol=grid.spacing)


def test_saddle_cells_resolve_consistently():
    # checkerboard of signs forces the ambiguous square cases
    values = np.array([[1.0, -1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, 1.0]])
    mesh = march(GridField(2, np.zeros(2), 1.0, (3, 3), values))
    assert len(mesh.elements) == 8
    # each below-iso node is a boundary node, cut off by an open two-segment path
    assert mesh.open_edges() == 8
    assert len(mesh.polylines()) == 4


def test_march_is_deterministic():
    grid = eval_grid(sphere_sdf, BOX3, 20)
    a, b = march(grid), march(grid)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(a.elements, b.elements)


@pytest.mark.parametrize("iso", [0.0, 0.1])
def test_shifting_values_and_level_together(iso):
    grid = eval_grid(circle_sdf, BOX2, 20)
    assert np.abs(grid.values - iso).min() > 1e-6
    base = march(grid, iso)
    shifted = march(grid.with_values(grid.values + 0.25), iso + 0.25)
    np.testing.assert_array_equal(shifted.elements, base.elements)
    np.testing.assert_allclose(shifted.vertices, base.vertices, atol=1e-12)


def test_single_triangle_obj(tmp_path):
    mesh = SurfaceMesh(3, [[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    text = export_mesh(mesh, tmp_path / "tri.obj").read_text().splitlines()
    assert sum(line.startswith("v ") for line in text) == 3
    assert sum(line.startswith("f ") for line in text) == 1


@pytest.mark.parametrize("suffix", ["obj", "ply"])
def test_mesh_round_trip(tmp_path, suffix):
    mesh = march(eval_grid(sphere_sdf, BOX3, 16))
    back = load_mesh(export_mesh(mesh, tmp_path / f"sphere.{suffix}"))
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.elements, mesh.elements)


@pytest.mark.parametrize("suffix", ["obj", "ply"])
def test_contour_round_trip(tmp_path, suffix):
    mesh = march(eval_grid(circle_sdf, BOX2, 20))
    back = load_mesh(export_mesh(mesh, tmp_path / f"circle.{suffix}"))
    assert back.dim == 2
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.elements, mesh.elements)


def test_empty_mesh_exports(tmp_path):
    path = export_mesh(SurfaceMesh(3), tmp_path / "empty.obj")
    assert path.exists()
    assert load_mesh(path).is_empty


def test_degenerate_elements_rejected():
    with pytest.raises(ValueError):
        SurfaceMesh(3, np.zeros((3, 3)), [[0, 1, 1]])
    with pytest.raises(ValueError):
        SurfaceMesh(2, np.zeros((2, 2)), [[0, 2]])


def test_contour_csv(tmp_path):
    mesh = march(eval_grid(circle_sdf, BOX2, 30))
    df = contour_frame(mesh)
    assert df.columns == ["x", "y", "segment_id"]
    assert df["segment_id"].n_unique() == 1
    path = write_contour_csv(mesh, tmp_path / "contour.csv")
    assert path.read_text().splitlines()[0] == "x,y,segment_id"
