"""Ground-truth distance fields and empirical checks of the Eikonal stability lemmas.

Fast marching solves |grad u| = f with u = g on a set of boundary nodes,
using the first-order upwind Godunov update and a binary heap with lazy
deletion of stale entries.
"""

import heapq
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import polars as pl
from scipy.spatial import cKDTree
from scipy.stats import spearmanr

from .errors import ConfigError
from .extract import GridField, SurfaceMesh, grid_geometry
from .field_net import SineMlpParams, field_values, forward_jet_batch
from .losses import eikonal_loss, manifold_loss
from .metrics import quadrature_rate
from .models import BoundDiagnostics, LemmaReport
from .sampler_io import PointCloud, SyntheticShape, sample_batch

logger = logging.getLogger(__name__)

FAR, TRIAL, ACCEPTED = 0, 1, 2
RESIDUAL_RATE_SIZES = (100, 400, 1_600, 6_400, 25_600)


@dataclass
class EikonalProblem:
    grid: GridField
    boundary_mask: np.ndarray
    g: np.ndarray
    f: np.ndarray = None
    C_f: float | None = None

    def __post_init__(self):
        shape = self.grid.shape
        self.boundary_mask = np.broadcast_to(np.asarray(self.boundary_mask, dtype=bool), shape)
        self.g = np.broadcast_to(np.asarray(self.g, dtype=np.float64), shape)
        if self.f is None:
            self.f = np.ones(shape)
        self.f = np.broadcast_to(np.asarray(self.f, dtype=np.float64), shape)
        if not self.boundary_mask.any():
            raise ConfigError("eikonal problem needs at least one boundary node")
        if not np.isfinite(self.f).all() or self.f.min() <= 0:
            raise ConfigError("slowness f must be finite and strictly positive")
        if not np.isfinite(self.g[self.boundary_mask]).all():
            raise ConfigError("boundary values must be finite")
        bound = float(max(self.f.max(), 1.0 / self.f.min()))
        if self.C_f is None:
            self.C_f = bound
        elif self.C_f < bound:
            raise ConfigError(f"recorded C_f={self.C_f} does not bound f (needs {bound})")

    def with_boundary(self, g, mask=None) -> "EikonalProblem":
        mask = self.boundary_mask if mask is None else mask
        return EikonalProblem(self.grid, mask, g, self.f, None)

    def with_slowness(self, f) -> "EikonalProblem":
        return EikonalProblem(self.grid, self.boundary_mask, self.g, f, None)


class FastMarching:
    """Single-threaded fast marching on a flattened grid.

    `order` lists node indices in acceptance order after `loop()`.
    """

    def __init__(self, problem: EikonalProblem):
        self.problem = problem
        self.shape = problem.grid.shape
        self.h = problem.grid.spacing
        self.n = int(np.prod(self.shape))
        self.multi = np.indices(self.shape).reshape(len(self.shape), -1).tolist()
        self.strides = [int(np.prod(self.shape[a + 1 :])) for a in range(len(self.shape))]
        self.f = problem.f.ravel()
        self.T = np.full(self.n, np.inf)
        self.status = np.full(self.n, FAR, dtype=np.int8)
        mask = problem.boundary_mask.ravel()
        self.T[mask] = problem.g.ravel()[mask]
        self.status[mask] = ACCEPTED
        self.order: list[int] = list(np.flatnonzero(mask))
        self.heap: list[tuple[float, int]] = []
        for i in self.order:
            self.update_neighbours(i)

    def neighbours(self, i: int):
        for a, stride in enumerate(self.strides):
            c = self.multi[a][i]
            if c > 0:
                yield i - stride
            if c < self.shape[a] - 1:
                yield i + stride

    def compute(self, i: int) -> float:
        """Godunov upwind update from the accepted neighbours of node i"""
        mins = []
        for a, stride in enumerate(self.strides):
            c = self.multi[a][i]
            best = np.inf
            if c > 0 and self.status[i - stride] == ACCEPTED:
                best = self.T[i - stride]
            if c < self.shape[a] - 1 and self.status[i + stride] == ACCEPTED:
                best = min(best, self.T[i + stride])
            if best < np.inf:
                mins.append(best)
        mins.sort()
        fh = self.f[i] * self.h
        t = mins[0] + fh
        s, q = mins[0], mins[0] ** 2
        for k in range(1, len(mins)):
            if t <= mins[k]:
                break
            s += mins[k]
            q += mins[k] ** 2
            m = k + 1
            t = (s + np.sqrt(s * s - m * (q - fh * fh))) / m
        return float(t)

    def update_neighbours(self, i: int) -> None:
        for j in self.neighbours(i):
            if self.status[j] == ACCEPTED:
                continue
            t = self.compute(j)
            if t < self.T[j]:
                self.T[j] = t
                self.status[j] = TRIAL
                heapq.heappush(self.heap, (t, j))

    def loop(self) -> np.ndarray:
        while self.heap:
            t, i = heapq.heappop(self.heap)
            if self.status[i] == ACCEPTED or t > self.T[i]:
                continue
            self.status[i] = ACCEPTED
            self.order.append(i)
            self.update_neighbours(i)
        return self.T.reshape(self.shape)


def fmm_solve(problem: EikonalProblem) -> GridField:
    marcher = FastMarching(problem)
    values = marcher.loop()
    if not np.isfinite(values).all():
        raise ValueError("fast marching left unreachable nodes")
    logger.debug("fast marching accepted %d nodes", len(marcher.order))
    return problem.grid.with_values(values)


# --- fixtures --------------------------------------------------------------


def square_grid(h: float, half_width: float = 1.0, dim: int = 2) -> GridField:
    n = int(round(2 * half_width / h)) + 1
    return GridField(dim, np.full(dim, -half_width), h, (n,) * dim, np.zeros((n,) * dim))


def point_source_problem(h: float = 0.01, f=1.0) -> EikonalProblem:
    """Zero-valued source at the center of [-1, 1]^2"""
    grid = square_grid(h)
    mask = np.zeros(grid.shape, dtype=bool)
    mask[tuple(s // 2 for s in grid.shape)] = True
    return EikonalProblem(grid, mask, 0.0, f)


def circle_band_problem(h: float = 0.01, radius: float = 0.5, f=1.0) -> EikonalProblem:
    """Nodes within h of a circle on [-1, 1]^2, seeded with their exact distance to it"""
    grid = square_grid(h)
    d = np.abs(np.linalg.norm(grid.points(), axis=1) - radius).reshape(grid.shape)
    mask = d <= h
    return EikonalProblem(grid, mask, np.where(mask, d, 0.0), f)


def smooth_slowness(
    grid: GridField, amplitude: float = 0.2, seed: int = 0, modes: int = 3
) -> np.ndarray:
    """1 + amplitude * (a few random low-frequency sines), bounded in [1 - amplitude, 1 + amplitude]"""
    rng = np.random.default_rng(seed)
    pts = grid.points()
    wave = np.zeros(len(pts))
    for _ in range(modes):
        k = rng.integers(1, 4, size=grid.dim) * rng.choice([-1, 1], size=grid.dim)
        wave += np.sin(np.pi * pts @ k + rng.uniform(0, 2 * np.pi))
    return (1.0 + amplitude * wave / modes).reshape(grid.shape)


# --- signed distance ------------------------------------------------------


def ray_parity_inside(points, contour: SurfaceMesh) -> np.ndarray:
    """Inside test by counting crossings of a +x ray with a closed 2D contour"""
    if contour.dim != 2:
        raise ValueError("ray parity is implemented for 2D contours only")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    a = contour.vertices[contour.elements[:, 0]]
    b = contour.vertices[contour.elements[:, 1]]
    crossings = np.zeros(len(pts), dtype=np.int64)
    for start in range(0, len(a), 4096):
        a_, b_ = a[start : start + 4096], b[start : start + 4096]
        y = pts[:, 1:2]
        straddle = (a_[None, :, 1] > y) != (b_[None, :, 1] > y)
        dy = np.where(straddle, b_[None, :, 1] - a_[None, :, 1], 1.0)
        x_cross = a_[None, :, 0] + (y - a_[None, :, 1]) * (b_[None, :, 0] - a_[None, :, 0]) / dy
        crossings += (straddle & (x_cross > pts[:, 0:1])).sum(axis=1)
    return crossings % 2 == 1


def signed_distance_oracle(
    shape: SyntheticShape,
    grid: GridField,
    surface_points=None,
    contour: SurfaceMesh | None = None,
    method: str = "auto",
) -> GridField:
    """Signed distance of `shape` on the nodes of `grid` (negative inside).

    Closed forms are used when the shape has one and `method` is "auto".
    Otherwise nodes within 2h of the surface samples are seeded with their
    exact nearest-sample distance, fast marching fills the rest, and signs
    come from the shape's inside test, or from ray parity against `contour`.
    """
    pts = grid.points()
    if method == "auto" and shape.analytic_sdf is not None:
        return grid.with_values(shape.analytic_sdf(pts))
    if method not in ("auto", "fmm"):
        raise ValueError(f"unknown oracle method {method!r}")

    if surface_points is None:
        if shape.brackets is None:
            raise ValueError(f"{shape.kind} oracle needs surface samples for fast marching")
        surface_points = shape.brackets.mean(axis=1)
    dist, _ = cKDTree(np.asarray(surface_points, dtype=np.float64)).query(pts)
    band = (dist <= 2 * grid.spacing).reshape(grid.shape)
    if not band.any():
        raise ValueError("surface samples do not come near any grid node")
    unsigned = fmm_solve(EikonalProblem(grid, band, dist.reshape(grid.shape))).values.ravel()

    if shape.inside is not None:
        inside = np.asarray(shape.inside(pts), dtype=bool)
    elif contour is not None:
        inside = ray_parity_inside(pts, contour)
    else:
        raise ValueError(f"{shape.kind} has no inside test and no contour for ray parity")
    return grid.with_values(np.where(inside, -unsigned, unsigned))


# --- lemma checks ----------------------------------------------------------


def _boundary_values(problem: EikonalProblem, g) -> tuple[np.ndarray, np.ndarray]:
    g = np.broadcast_to(np.asarray(g, dtype=np.float64), problem.grid.shape)
    mask = np.isfinite(g) if np.isnan(g).any() else problem.boundary_mask
    return np.where(mask, g, 0.0), mask


def verify_lemma1(problem: EikonalProblem, g1, g2, slack_factor: float = 6.0) -> LemmaReport:
    """max|u1 - u2| <= max|g1 - g2| + slack for two boundary data under unit slowness.

    NaN entries of g1 / g2 mark non-boundary nodes; otherwise the problem's
    boundary mask is used.
    """
    if not np.allclose(problem.f, 1.0):
        raise ConfigError("boundary-data stability is checked under unit slowness only")
    g1, m1 = _boundary_values(problem, g1)
    g2, m2 = _boundary_values(problem, g2)
    if not np.array_equal(m1, m2):
        raise ValueError("boundary data are given on different masks")
    u1 = fmm_solve(problem.with_boundary(g1, m1)).values
    u2 = fmm_solve(problem.with_boundary(g2, m2)).values
    lhs = float(np.abs(u1 - u2).max())
    rhs = float(np.abs(g1 - g2)[m1].max())
    slack = slack_factor * problem.grid.spacing
    report = LemmaReport(
        lemma="boundary", lhs=lhs, rhs=rhs, slack=slack, passed=lhs <= rhs + slack
    )
    logger.info("boundary stability: %.4g <= %.4g + %.4g -> %s", lhs, rhs, slack, report.passed)
    return report


def verify_lemma2(problem: EikonalProblem, f1, f2, slack_factor: float = 6.0) -> LemmaReport:
    """max|u1 - u2| <= C_Omega C_f^-2 max|f1 - f2| + slack for zero boundary data.

    C_Omega is the grid diameter and C_f bounds both slownesses and their
    reciprocals. The constant C_Omega C_f^2, which a path-length argument
    actually yields, is reported alongside in `extras`.
    """
    if np.any(problem.g[problem.boundary_mask] != 0):
        raise ConfigError("slowness stability is checked with zero boundary data")
    p1, p2 = problem.with_slowness(f1), problem.with_slowness(f2)
    C_f = max(p1.C_f, p2.C_f)
    C_omega = problem.grid.diameter()
    u1 = fmm_solve(p1).values
    u2 = fmm_solve(p2).values
    lhs = float(np.abs(u1 - u2).max())
    df = float(np.abs(p1.f - p2.f).max())
    rhs = C_omega * df / C_f**2
    slack = slack_factor * problem.grid.spacing
    report = LemmaReport(
        lemma="slowness",
        lhs=lhs,
        rhs=rhs,
        slack=slack,
        passed=lhs <= rhs + slack,
        extras={
            "C_Omega": C_omega,
            "C_f": C_f,
            "sup_df": df,
            "corrected_rhs": C_omega * C_f**2 * df,
        },
    )
    logger.info("slowness stability: %.4g <= %.4g + %.4g -> %s", lhs, rhs, slack, report.passed)
    return report


def lemma_frame(reports: Sequence[LemmaReport]) -> pl.DataFrame:
    return pl.DataFrame(
        [
            {"lemma": r.lemma, "lhs": r.lhs, "rhs": r.rhs, "slack": r.slack, "passed": r.passed}
            for r in reports
        ],
        schema={
            "lemma": pl.Utf8,
            "lhs": pl.Float64,
            "rhs": pl.Float64,
            "slack": pl.Float64,
            "passed": pl.Boolean,
        },
    )


# --- bound diagnostics -----------------------------------------------------


@dataclass
class BoundSeries:
    rows: list[BoundDiagnostics] = field(default_factory=list)
    spearman_rho: float | None = None

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            [
                {
                    "iteration": r.iteration,
                    "linf_error": r.linf_error,
                    "sqrt_Lm": r.sqrt_Lm,
                    "sqrt_Leik": r.sqrt_Leik,
                    "loss_bound": r.loss_bound,
                    "N": r.n_surface,
                    "M": r.n_domain,
                    "beta_hat": r.beta_hat,
                }
                for r in self.rows
            ]
        )

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().write_csv(path)
        return path


def residual_rate(params: SineMlpParams, bbox, p: int = 1, seed: int = 0) -> float:
    """Monte-Carlo decay rate of the Eikonal residual mean of a network over a box"""
    lo, hi = bbox
    fit = quadrature_rate(
        "monte_carlo",
        lambda xs: forward_jet_batch(params, xs).grad_norm() - 1.0,
        RESIDUAL_RATE_SIZES,
        p=p,
        lo=lo,
        hi=hi,
        seed=seed,
    )
    logger.info("Eikonal residual rate beta_hat=%.3f", fit.beta_hat)
    return fit.beta_hat


def bound_diagnostics(
    checkpoints: Sequence[tuple[int, SineMlpParams]],
    shape: SyntheticShape,
    cloud: PointCloud,
    resolution: int = 64,
    n_surface: int = 2_000,
    n_domain: int = 2_000,
    p: int = 1,
    beta_hat: float | None = None,
    seed: int = 0,
) -> BoundSeries:
    """Grid sup error against the oracle SDF next to the square-rooted losses, per checkpoint.

    `shape` and `cloud` must share a frame (see SyntheticShape.in_frame).
    Without `beta_hat`, the Monte-Carlo rate is fitted on the Eikonal residual
    of the last checkpoint over the cloud box.
    The rank correlation is left as None with fewer than 4 checkpoints.
    """
    origin, h, gshape = grid_geometry(cloud.bbox, resolution)
    grid = GridField(len(gshape), origin, h, gshape, np.zeros(gshape))
    oracle = signed_distance_oracle(shape, grid, surface_points=cloud.points).values.ravel()
    points = grid.points()
    batch = sample_batch(cloud, np.random.default_rng([seed, 2**31 - 1]), n_surface, n_domain)
    if beta_hat is None and checkpoints:
        beta_hat = residual_rate(checkpoints[-1][1], cloud.bbox, p, seed)

    series = BoundSeries()
    for iteration, params in checkpoints:
        linf = float(np.abs(field_values(params, points) - oracle).max())
        lm = manifold_loss(forward_jet_batch(params, batch.surface_points))
        leik = eikonal_loss(forward_jet_batch(params, batch.domain_points), p)
        series.rows.append(
            BoundDiagnostics(
                iteration=iteration,
                linf_error=linf,
                sqrt_Lm=float(np.sqrt(lm)),
                sqrt_Leik=float(np.sqrt(leik)),
                n_surface=n_surface,
                n_domain=n_domain,
                beta_hat=beta_hat,
            )
        )
    if len(series.rows) >= 4:
        rho, _ = spearmanr(
            [r.loss_bound for r in series.rows], [r.linf_error for r in series.rows]
        )
        series.spearman_rho = float(rho)
    else:
        logger.warning("%d checkpoints: rank correlation undefined", len(series.rows))
    return series
