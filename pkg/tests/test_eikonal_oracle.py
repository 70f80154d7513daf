import numpy as np
import pytest

from viscosdf.eikonal_oracle import (
    EikonalProblem,
    FastMarching,
    bound_diagnostics,
    circle_band_problem,
    fmm_solve,
    lemma_frame,
    point_source_problem,
    ray_parity_inside,
    residual_rate,
    signed_distance_oracle,
    smooth_slowness,
    square_grid,
    verify_lemma1,
    verify_lemma2,
)
from viscosdf.errors import ConfigError
from viscosdf.experiments import prepare_shape
from viscosdf.extract import GridField, eval_grid, grid_geometry, march
from viscosdf.field_net import init_geometric
from viscosdf.models import Architecture, ShapeSpec
from viscosdf.sampler_io import synth_shape


def max_error(u: GridField, exact, within=None):
    pts = u.points()
    err = np.abs(u.values.ravel() - exact(pts))
    if within is not None:
        err = err[np.linalg.norm(pts, axis=1) <= within]
    return float(err.max())


def point_distance(pts):
    return np.linalg.norm(pts, axis=1)


def circle_distance(pts):
    return np.abs(np.linalg.norm(pts, axis=1) - 0.5)


def test_point_source_within_three_h():
    h = 0.01
    u = fmm_solve(point_source_problem(h))
    assert max_error(u, point_distance, within=0.5) <= 3 * h


def test_circle_fixture_within_three_h():
    h = 0.01
    u = fmm_solve(circle_band_problem(h))
    assert max_error(u, circle_distance) <= 3 * h


@pytest.mark.slow
def test_circle_fixture_converges():
    coarse = max_error(fmm_solve(circle_band_problem(1 / 100)), circle_distance)
    fine = max_error(fmm_solve(circle_band_problem(1 / 200)), circle_distance)
    assert fine <= 3 / 200
    assert coarse / fine >= 1 / 0.6


def test_doubling_slowness_doubles_arrival_times():
    base = point_source_problem(0.05)
    u1 = fmm_solve(base).values
    u2 = fmm_solve(base.with_slowness(2.0)).values
    np.testing.assert_allclose(u2, 2.0 * u1, rtol=1e-14, atol=0)


def test_values_never_below_zero_boundary():
    u = fmm_solve(circle_band_problem(0.02).with_boundary(0.0))
    assert u.values.min() >= 0.0


@pytest.mark.parametrize("seed", range(3))
def test_larger_boundary_data_never_lowers_solution(seed):
    problem = circle_band_problem(0.04)
    lift = np.random.default_rng(seed).uniform(0.0, 0.1, size=problem.grid.shape)
    higher = problem.with_boundary(np.where(problem.boundary_mask, problem.g + lift, 0.0))
    u1, u2 = fmm_solve(problem).values, fmm_solve(higher).values
    assert np.all(u1 <= u2 + 1e-12)


def test_acceptance_order_is_causal():
    problem = point_source_problem(0.05)
    marcher = FastMarching(problem)
    values = marcher.loop().ravel()
    accepted = values[marcher.order]
    assert np.all(np.diff(accepted) >= -1e-12)
    assert len(marcher.order) == values.size


@pytest.mark.parametrize("f", [0.0, -1.0, np.nan])
def test_bad_slowness_rejected(f):
    with pytest.raises(ConfigError):
        point_source_problem(0.1, f=f)


def test_empty_boundary_rejected():
    grid = square_grid(0.1)
    with pytest.raises(ConfigError):
        EikonalProblem(grid, np.zeros(grid.shape, dtype=bool), 0.0)


def test_too_small_slowness_bound_rejected():
    grid = square_grid(0.1)
    mask = np.zeros(grid.shape, dtype=bool)
    mask[0, 0] = True
    with pytest.raises(ConfigError):
        EikonalProblem(grid, mask, 0.0, f=3.0, C_f=2.0)


def test_smooth_slowness_bounds():
    f = smooth_slowness(square_grid(0.05), amplitude=0.2, seed=3)
    assert f.min() >= 0.8 - 1e-12
    assert f.max() <= 1.2 + 1e-12


# --- signed distance -------------------------------------------------------


def test_oracle_uses_closed_form():
    _, shape = synth_shape(ShapeSpec(kind="torus"), 10, 0)
    origin, h, gshape = grid_geometry((np.full(3, -0.6), np.full(3, 0.6)), 12)
    grid = GridField(3, origin, h, gshape, np.zeros(gshape))
    sdf = signed_distance_oracle(shape, grid)
    np.testing.assert_array_equal(sdf.values.ravel(), shape.analytic_sdf(grid.points()))


def test_marched_circle_agrees_with_closed_form():
    cloud, shape = prepare_shape(ShapeSpec(kind="circle"), 3_000, 0)
    origin, h, gshape = grid_geometry(cloud.bbox, 64)
    grid = GridField(2, origin, h, gshape, np.zeros(gshape))
    exact = signed_distance_oracle(shape, grid).values
    marched = signed_distance_oracle(shape, grid, surface_points=cloud.points, method="fmm").values
    assert np.abs(marched - exact).max() <= 3 * h
    assert np.array_equal(np.sign(marched[np.abs(exact) > h]), np.sign(exact[np.abs(exact) > h]))


def test_marched_sphere_agrees_with_closed_form():
    cloud, shape = prepare_shape(ShapeSpec(kind="sphere"), 5_000, 0)
    origin, h, gshape = grid_geometry(cloud.bbox, 20)
    grid = GridField(3, origin, h, gshape, np.zeros(gshape))
    exact = signed_distance_oracle(shape, grid).values
    marched = signed_distance_oracle(shape, grid, surface_points=cloud.points, method="fmm").values
    assert np.abs(marched - exact).max() <= 3 * h


def test_mandelbrot_oracle_signs_follow_escape_time():
    cloud, shape = prepare_shape(ShapeSpec(kind="mandelbrot_boundary", max_iter=100, bracket_width=1e-4), 400, 0)
    origin, h, gshape = grid_geometry(cloud.bbox, 32)
    grid = GridField(2, origin, h, gshape, np.zeros(gshape))
    sdf = signed_distance_oracle(shape, grid, surface_points=cloud.points)
    inside = shape.inside(grid.points())
    assert np.all(sdf.values.ravel()[inside] <= 0)
    assert np.all(sdf.values.ravel()[~inside] >= 0)


def test_ray_parity_on_circle_contour():
    grid = eval_grid(lambda x: np.linalg.norm(x, axis=1) - 0.3, (np.full(2, -0.5), np.full(2, 0.5)), 64)
    contour = march(grid)
    queries = np.array([[0.0, 0.0], [0.1, -0.05], [0.45, 0.0], [-0.4, 0.4]])
    np.testing.assert_array_equal(ray_parity_inside(queries, contour), [True, True, False, False])


def test_oracle_without_inside_information_raises():
    _, shape = synth_shape(ShapeSpec(kind="circle"), 100, 0)
    shape.inside = None
    grid = square_grid(0.1)
    with pytest.raises(ValueError):
        signed_distance_oracle(shape, grid, surface_points=np.array([[0.5, 0.0]]), method="fmm")


# --- stability checks ------------------------------------------------------


def test_lemma1_identical_data():
    problem = circle_band_problem(0.02)
    report = verify_lemma1(problem, problem.g, problem.g)
    assert report.passed
    assert report.lhs <= report.slack
    assert report.lemma == "boundary"


def test_lemma1_constant_shift():
    problem = circle_band_problem(0.02)
    report = verify_lemma1(problem, problem.g, np.where(problem.boundary_mask, problem.g + 0.1, 0.0))
    assert report.passed
    assert report.rhs == pytest.approx(0.1)
    assert report.lhs == pytest.approx(0.1, abs=report.slack)


def test_lemma1_random_perturbations():
    problem = circle_band_problem(0.02)
    rng = np.random.default_rng(0)
    for _ in range(3):
        noise = rng.uniform(-0.05, 0.05, size=problem.grid.shape)
        g2 = np.where(problem.boundary_mask, problem.g + noise, 0.0)
        assert verify_lemma1(problem, problem.g, g2).passed


@pytest.mark.slow
def test_lemma1_ten_draws_at_fine_grid():
    problem = circle_band_problem(0.01)
    rng = np.random.default_rng(1)
    for _ in range(10):
        noise = rng.uniform(-0.05, 0.05, size=problem.grid.shape)
        assert verify_lemma1(problem, problem.g, np.where(problem.boundary_mask, problem.g + noise, 0.0)).passed


def test_lemma1_requires_unit_slowness():
    problem = circle_band_problem(0.05, f=2.0)
    with pytest.raises(ConfigError):
        verify_lemma1(problem, problem.g, problem.g)


def test_lemma1_mismatched_masks():
    problem = circle_band_problem(0.05)
    g2 = np.where(problem.boundary_mask, problem.g, np.nan)
    g2[problem.boundary_mask.nonzero()[0][0], problem.boundary_mask.nonzero()[1][0]] = np.nan
    with pytest.raises(ValueError):
        verify_lemma1(problem, problem.g, g2)


def test_lemma2_identical_slowness():
    problem = circle_band_problem(0.02).with_boundary(0.0)
    report = verify_lemma2(problem, 1.0, 1.0)
    assert report.passed
    assert report.lhs <= report.slack


def test_lemma2_scaled_slowness():
    problem = circle_band_problem(0.02).with_boundary(0.0)
    u1 = fmm_solve(problem.with_slowness(1.0)).values
    u2 = fmm_solve(problem.with_slowness(2.0)).values
    np.testing.assert_allclose(u2, 2.0 * u1, rtol=1e-14)
    report = verify_lemma2(problem, 1.0, 2.0)
    assert report.lhs == pytest.approx(np.abs(u2 - u1).max())
    assert report.extras["C_f"] == 2.0
    assert report.extras["corrected_rhs"] == pytest.approx(report.extras["C_Omega"] * 4.0)


def test_lemma2_smooth_perturbations():
    problem = circle_band_problem(0.02).with_boundary(0.0)
    for seed in range(3):
        f2 = smooth_slowness(problem.grid, amplitude=0.1, seed=seed)
        assert verify_lemma2(problem, 1.0, f2).passed


def test_lemma2_requires_zero_boundary():
    problem = circle_band_problem(0.05)
    with pytest.raises(ConfigError):
        verify_lemma2(problem, 1.0, 1.1)


def test_lemma_frame():
    problem = circle_band_problem(0.05)
    df = lemma_frame([verify_lemma1(problem, problem.g, problem.g)])
    assert df.columns == ["lemma", "lhs", "rhs", "slack", "passed"]
    assert df["passed"].to_list() == [True]


# --- bound diagnostics -----------------------------------------------------


def test_bound_diagnostics_rows_and_rank_correlation():
    cloud, shape = prepare_shape(ShapeSpec(kind="circle"), 500, 0)
    arch = Architecture(input_dim=2, hidden_layers=2, width=8, omega0=3.0)
    checkpoints = [(k, init_geometric(arch, k)) for k in range(1, 5)]
    series = bound_diagnostics(checkpoints, shape, cloud, resolution=24, n_surface=200, n_domain=200)
    df = series.to_frame()
    assert df["iteration"].to_list() == [1, 2, 3, 4]
    assert (df["loss_bound"] > 0).all()
    assert series.spearman_rho is not None
    assert -1.0 <= series.spearman_rho <= 1.0


def test_bound_diagnostics_few_checkpoints():
    cloud, shape = prepare_shape(ShapeSpec(kind="circle"), 500, 0)
    net = init_geometric(Architecture(input_dim=2, hidden_layers=1, width=8), 0)
    series = bound_diagnostics([(1, net), (2, net)], shape, cloud, resolution=16, n_surface=50, n_domain=50)
    assert series.spearman_rho is None
    assert len(series.rows) == 2


def test_untrained_field_is_far_from_oracle(tmp_path):
    cloud, shape = prepare_shape(ShapeSpec(kind="circle"), 500, 0)
    arch = Architecture(input_dim=2, hidden_layers=2, width=8, omega0=3.0)
    series = bound_diagnostics([(1, init_geometric(arch, 0))], shape, cloud, resolution=16)
    row = series.rows[0]
    assert row.linf_error > 0.05
    assert row.constants["C_theta"] == "not estimated"
    path = series.write_csv(tmp_path / "bound.csv")
    assert path.read_text().startswith("iteration,linf_error")


def test_residual_rate_is_monte_carlo_like():
    arch = Architecture(input_dim=2, hidden_layers=2, width=8, omega0=3.0)
    bbox = (np.full(2, -0.55), np.full(2, 0.55))
    assert residual_rate(init_geometric(arch, 0), bbox, p=2) == pytest.approx(0.5, abs=0.15)


def test_bound_diagnostics_fits_rate_of_last_checkpoint():
    cloud, shape = prepare_shape(ShapeSpec(kind="circle"), 500, 0)
    arch = Architecture(input_dim=2, hidden_layers=1, width=8, omega0=3.0)
    checkpoints = [(1, init_geometric(arch, 1)), (2, init_geometric(arch, 2))]
    fitted = bound_diagnostics(checkpoints, shape, cloud, resolution=16, n_surface=50, n_domain=50)
    expected = residual_rate(checkpoints[-1][1], cloud.bbox)
    assert [r.beta_hat for r in fitted.rows] == [expected, expected]
    given = bound_diagnostics(checkpoints, shape, cloud, resolution=16, n_surface=50, n_domain=50, beta_hat=0.3)
    assert given.to_frame()["beta_hat"].to_list() == [0.3, 0.3]
