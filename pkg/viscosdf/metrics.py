"""Reconstruction metrics and the quadrature-rate estimator.

Chamfer distance follows the symmetric-mean convention

    d_C(A, B) = 1/2 [mean_a min_b |a - b| + mean_b min_a |a - b|]

used consistently for every comparison in this package.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
import polars as pl
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .extract import SurfaceMesh
from .models import MetricsReport
from .sampler_io import SyntheticShape

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["name", "d_C", "d_H", "squared_chamfer", "iou"]


def _as_points(points, label: str) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[None, :]
    if points.shape[0] == 0:
        raise ValueError(f"point set {label} is empty")
    return points


def _one_sided(A, B, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    A, B = _as_points(A, "A"), _as_points(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"point sets have different dimensions ({A.shape[1]} vs {B.shape[1]})")
    a_to_b, _ = cKDTree(B).query(A, k=1, workers=workers)
    b_to_a, _ = cKDTree(A).query(B, k=1, workers=workers)
    return a_to_b, b_to_a


def nearest_distances_brute(A, B) -> tuple[np.ndarray, np.ndarray]:
    """O(|A||B|) reference for the kd-tree queries"""
    D = cdist(_as_points(A, "A"), _as_points(B, "B"))
    return D.min(axis=1), D.min(axis=0)


def chamfer(A, B, workers: int = 1) -> float:
    a_to_b, b_to_a = _one_sided(A, B, workers)
    return float(0.5 * (a_to_b.mean() + b_to_a.mean()))


def squared_chamfer(A, B, workers: int = 1) -> float:
    a_to_b, b_to_a = _one_sided(A, B, workers)
    return float(0.5 * ((a_to_b**2).mean() + (b_to_a**2).mean()))


def hausdorff(A, B, workers: int = 1) -> float:
    a_to_b, b_to_a = _one_sided(A, B, workers)
    return float(max(a_to_b.max(), b_to_a.max()))


def iou(pred_inside, true_inside) -> float:
    """Intersection over union of two occupancy labelings (True = inside)"""
    pred = np.asarray(pred_inside, dtype=bool)
    true = np.asarray(true_inside, dtype=bool)
    if pred.shape != true.shape:
        raise ValueError(f"labelings differ in length ({pred.size} vs {true.size})")
    union = np.logical_or(pred, true).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, true).sum() / union)


def occupancy_iou(
    field_fn: Callable[[np.ndarray], np.ndarray],
    shape: SyntheticShape,
    bbox,
    n: int = 100_000,
    seed: int = 0,
) -> float:
    """IoU of {field < 0} against the shape's inside on uniform samples of bbox"""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    xs = np.random.default_rng(seed).uniform(lo, hi, size=(n, lo.size))
    if shape.analytic_sdf is not None:
        truth = shape.analytic_sdf(xs) < 0
    elif shape.inside is not None:
        truth = shape.inside(xs)
    else:
        raise ValueError(f"shape {shape.kind!r} has no inside/outside ground truth")
    return iou(np.asarray(field_fn(xs)) < 0, truth)


def sample_mesh_surface(mesh: SurfaceMesh, n: int = 30_000, seed: int = 0) -> np.ndarray:
    """Uniform samples on the mesh, by area for triangles and by length for segments"""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    corners = mesh.vertices[mesh.elements]
    if mesh.dim == 2:
        sizes = np.linalg.norm(corners[:, 1] - corners[:, 0], axis=1)
    else:
        sizes = 0.5 * np.linalg.norm(
            np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]), axis=1
        )
    total = sizes.sum()
    if total <= 0:
        raise ValueError("mesh has zero measure")
    pick = rng.choice(len(sizes), size=n, p=sizes / total)
    c = corners[pick]
    if mesh.dim == 2:
        t = rng.random((n, 1))
        return c[:, 0] + t * (c[:, 1] - c[:, 0])
    r1 = np.sqrt(rng.random((n, 1)))
    r2 = rng.random((n, 1))
    return (1 - r1) * c[:, 0] + r1 * (1 - r2) * c[:, 1] + r1 * r2 * c[:, 2]


def evaluate(
    name: str,
    pred_points,
    true_points,
    iou_value: float | None = None,
    workers: int = 1,
) -> MetricsReport:
    a_to_b, b_to_a = _one_sided(pred_points, true_points, workers)
    report = MetricsReport(
        name=name,
        chamfer=float(0.5 * (a_to_b.mean() + b_to_a.mean())),
        hausdorff=float(max(a_to_b.max(), b_to_a.max())),
        squared_chamfer=float(0.5 * ((a_to_b**2).mean() + (b_to_a**2).mean())),
        iou=iou_value,
    )
    logger.info("%s: d_C=%.6g d_H=%.6g", name, report.chamfer, report.hausdorff)
    return report


def metrics_frame(reports: Sequence[MetricsReport]) -> pl.DataFrame:
    return pl.DataFrame(
        [r.to_row() for r in reports],
        schema={
            "name": pl.Utf8,
            "d_C": pl.Float64,
            "d_H": pl.Float64,
            "squared_chamfer": pl.Float64,
            "iou": pl.Float64,
        },
    )


def write_metrics_csv(reports: Sequence[MetricsReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metrics_frame(reports).write_csv(path)
    return path


# --- quadrature rates ------------------------------------------------------


@dataclass
class QuadratureFit:
    """Fit of |error(N)| ~ c_hat * N^(-beta_hat)"""

    beta_hat: float
    c_hat: float
    degenerate: bool
    n_values: list[int] = field(default_factory=list)
    errors: list[float] = field(default_factory=list)


def reference_integral(g, lo, hi, p: int = 1, nodes: int = 24) -> float:
    """Mean of |g|^p over the box by tensor Gauss-Legendre quadrature"""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    x, w = np.polynomial.legendre.leggauss(nodes)
    axes = [l + (h - l) * (x + 1) / 2 for l, h in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    weights = np.ones(1)
    for _ in lo:
        weights = np.multiply.outer(weights, w / 2).ravel()
    return float(weights @ (np.abs(g(pts)) ** p))


def _grid_estimate(g, lo, hi, n_side: int, p: int) -> float:
    # left-endpoint rule: first-order accurate in the spacing
    h = (hi - lo) / n_side
    axes = [l + h_k * np.arange(n_side) for l, h_k in zip(lo, h)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return float(np.mean(np.abs(g(pts)) ** p))


def quadrature_rate(
    sampler: Literal["grid", "monte_carlo"],
    g: Callable[[np.ndarray], np.ndarray],
    n_list: Sequence[int],
    p: int = 1,
    lo=(0.0, 0.0, 0.0),
    hi=(1.0, 1.0, 1.0),
    n_seeds: int = 20,
    seed: int = 0,
) -> QuadratureFit:
    """Empirical decay rate of the sample-mean error of |g|^p over a box.

    The grid sampler uses n = round(N^(1/d)) points per side; the Monte-Carlo
    sampler averages |error| over `n_seeds` independent draws per N.
    """
    if len(n_list) < 3:
        raise ValueError("a rate fit needs at least 3 sample counts")
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    d = lo.size
    exact = reference_integral(g, lo, hi, p)

    ns, errors = [], []
    for N in n_list:
        if sampler == "grid":
            n_side = max(1, round(N ** (1.0 / d)))
            ns.append(n_side**d)
            errors.append(abs(_grid_estimate(g, lo, hi, n_side, p) - exact))
        elif sampler == "monte_carlo":
            errs = []
            for k in range(n_seeds):
                xs = np.random.default_rng([seed, k, N]).uniform(lo, hi, size=(N, d))
                errs.append(abs(float(np.mean(np.abs(g(xs)) ** p)) - exact))
            ns.append(int(N))
            errors.append(float(np.mean(errs)))
        else:
            raise ValueError(f"unknown sampler {sampler!r}")

    errors_arr = np.array(errors)
    if np.all(errors_arr <= 1e-13 * max(1.0, abs(exact))):
        logger.info("quadrature errors vanish; rate fit is degenerate")
        return QuadratureFit(float("nan"), 0.0, True, ns, errors)
    keep = errors_arr > 0
    slope, intercept = np.polyfit(np.log(np.array(ns)[keep]), np.log(errors_arr[keep]), 1)
    return QuadratureFit(float(-slope), float(np.exp(intercept)), False, ns, errors)
