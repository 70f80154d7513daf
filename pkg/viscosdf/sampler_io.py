import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from .errors import DataError
from .models import ShapeSpec

logger = logging.getLogger(__name__)


@dataclass
class PointCloud:
    """Surface samples plus the affine map raw -> normalized (x_n = scale * x + translation)"""

    dim: int
    points: np.ndarray
    bbox: tuple[np.ndarray, np.ndarray]
    scale: float = 1.0
    translation: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.translation is None:
            self.translation = np.zeros(self.dim)
        if self.points.ndim != 2 or self.points.shape[1] != self.dim:
            raise ValueError(f"expected an (n, {self.dim}) point array, got {self.points.shape}")
        if self.scale <= 0:
            raise ValueError("normalization scale must be positive")

    def __len__(self) -> int:
        return self.points.shape[0]

    def to_normalized(self, raw) -> np.ndarray:
        return self.scale * np.asarray(raw, dtype=np.float64) + self.translation

    def denormalize(self, normalized) -> np.ndarray:
        return (np.asarray(normalized, dtype=np.float64) - self.translation) / self.scale


@dataclass
class TrainBatch:
    surface_points: np.ndarray
    domain_points: np.ndarray

    def groups(self) -> dict[str, np.ndarray]:
        return {"surface": self.surface_points, "domain": self.domain_points}


@dataclass
class SyntheticShape:
    kind: str
    dim: int
    params: dict = field(default_factory=dict)
    analytic_sdf: Callable[[np.ndarray], np.ndarray] | None = None
    inside: Callable[[np.ndarray], np.ndarray] | None = None
    brackets: np.ndarray | None = None

    def rescaled(self, scale: float, translation) -> "SyntheticShape":
        """Same shape seen through x_n = scale * x + translation"""
        translation = np.asarray(translation, dtype=np.float64)

        def to_raw(x):
            return (np.asarray(x, dtype=np.float64) - translation) / scale

        sdf = None
        if self.analytic_sdf is not None:
            raw_sdf = self.analytic_sdf
            sdf = lambda x: scale * raw_sdf(to_raw(x))
        inside = None
        if self.inside is not None:
            raw_inside = self.inside
            inside = lambda x: raw_inside(to_raw(x))
        brackets = None
        if self.brackets is not None:
            brackets = scale * self.brackets + translation
        return SyntheticShape(self.kind, self.dim, dict(self.params), sdf, inside, brackets)

    def in_frame(self, cloud: PointCloud) -> "SyntheticShape":
        return self.rescaled(cloud.scale, cloud.translation)


# --- ingestion -------------------------------------------------------------


def _tight_bbox(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return points.min(axis=0), points.max(axis=0)


def _load_xyz(fp: Path) -> np.ndarray:
    rows, dim = [], None
    for lineno, line in enumerate(fp.read_text().splitlines(), start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        if dim is None:
            if len(tokens) == 2:
                dim = 2
            elif len(tokens) in (3, 6):
                dim = 3
            else:
                raise DataError(f"expected 2, 3 or 6 columns, got {len(tokens)}", fp, lineno)
        if len(tokens) < dim:
            raise DataError(f"expected at least {dim} columns, got {len(tokens)}", fp, lineno)
        try:
            rows.append([float(t) for t in tokens[:dim]])
        except ValueError as exc:
            raise DataError(f"non-numeric token: {exc}", fp, lineno) from exc
    if not rows:
        raise DataError("no points found", fp)
    return np.array(rows, dtype=np.float64)


def _load_ply(fp: Path) -> np.ndarray:
    lines = fp.read_bytes().decode("utf-8", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DataError("missing 'ply' magic line", fp, 1)

    elements: list[tuple[str, int, list[str]]] = []
    body_start = None
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                raise DataError("only ASCII PLY is supported", fp, lineno)
        elif tokens[0] == "element":
            try:
                elements.append((tokens[1], int(tokens[2]), []))
            except (IndexError, ValueError) as exc:
                raise DataError(f"malformed element line: {line!r}", fp, lineno) from exc
        elif tokens[0] == "property":
            if not elements:
                raise DataError("property before any element", fp, lineno)
            elements[-1][2].append(tokens[-1])
        elif tokens[0] == "end_header":
            body_start = lineno
            break
        else:
            raise DataError(f"unexpected header line {line!r}", fp, lineno)
    if body_start is None:
        raise DataError("missing end_header", fp)

    row = body_start
    for name, count, props in elements:
        if name != "vertex":
            row += count
            continue
        if "x" not in props or "y" not in props:
            raise DataError("vertex element needs x and y properties", fp)
        cols = [props.index("x"), props.index("y")]
        if "z" in props:
            cols.append(props.index("z"))
        points = np.empty((count, len(cols)))
        for i in range(count):
            lineno = row + i + 1
            if lineno > len(lines):
                raise DataError("file ends inside the vertex list", fp, lineno)
            tokens = lines[lineno - 1].split()
            if len(tokens) < len(props):
                raise DataError(f"expected {len(props)} values, got {len(tokens)}", fp, lineno)
            try:
                points[i] = [float(tokens[c]) for c in cols]
            except ValueError as exc:
                raise DataError(f"non-numeric token: {exc}", fp, lineno) from exc
        return points
    raise DataError("no vertex element", fp)


def load_point_cloud(path, format: Literal["xyz", "ply"] | None = None) -> PointCloud:
    """Read an XYZ or ASCII PLY point cloud; normals and extra properties are ignored"""
    fp = Path(path)
    if not fp.exists():
        raise DataError("file does not exist", fp)
    format = format or fp.suffix.lstrip(".").lower()
    if format == "xyz":
        points = _load_xyz(fp)
    elif format == "ply":
        points = _load_ply(fp)
    else:
        raise DataError(f"unknown point cloud format {format!r}", fp)
    logger.debug("loaded %d points from %s", len(points), fp)
    return PointCloud(dim=points.shape[1], points=points, bbox=_tight_bbox(points))


def write_point_cloud(pc: PointCloud, path, format: Literal["xyz", "ply"] | None = None) -> Path:
    fp = Path(path)
    fp.parent.mkdir(parents=True, exist_ok=True)
    format = format or fp.suffix.lstrip(".").lower()
    rows = "\n".join(" ".join(repr(float(c)) for c in p) for p in pc.points)
    if format == "xyz":
        fp.write_text(rows + "\n" if rows else "")
    elif format == "ply":
        axes = ["x", "y", "z"][: pc.dim]
        header = ["ply", "format ascii 1.0", f"element vertex {len(pc)}"]
        header += [f"property double {a}" for a in axes]
        header.append("end_header")
        fp.write_text("\n".join(header) + "\n" + (rows + "\n" if rows else ""))
    else:
        raise DataError(f"unknown point cloud format {format!r}", fp)
    return fp


def normalize(pc: PointCloud, box_scale: float = 1.1) -> PointCloud:
    """Center the cloud, scale its longest side to 1, pad the box by box_scale"""
    if len(pc) == 0:
        raise ValueError("cannot normalize an empty cloud")
    if box_scale < 1:
        raise ValueError("box_scale must be at least 1")
    lo, hi = _tight_bbox(pc.points)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise ValueError("cannot normalize a degenerate (zero-extent) cloud")
    s = 1.0 / extent
    t = -s * (lo + hi) / 2.0
    half = np.full(pc.dim, box_scale / 2.0)
    return PointCloud(
        dim=pc.dim,
        points=s * pc.points + t,
        bbox=(-half, half),
        scale=pc.scale * s,
        translation=s * pc.translation + t,
    )


def sample_batch(
    pc: PointCloud,
    rng_state: np.random.Generator | int,
    n_surface: int,
    n_domain: int,
) -> TrainBatch:
    """Surface subset (without replacement when possible) plus uniform box samples"""
    if n_surface <= 0 or n_domain <= 0:
        raise ValueError("batch sizes must be positive")
    rng = np.random.default_rng(rng_state)
    replace = n_surface > len(pc)
    idx = rng.choice(len(pc), size=n_surface, replace=replace)
    lo, hi = pc.bbox
    domain = rng.uniform(lo, hi, size=(n_domain, pc.dim))
    return TrainBatch(surface_points=pc.points[idx], domain_points=domain)


# --- synthetic shapes ------------------------------------------------------


def mandelbrot_inside(c: np.ndarray, max_iter: int = 500) -> np.ndarray:
    """Escape-time membership: True where |z| stays <= 2 for max_iter iterations"""
    c = np.asarray(c, dtype=np.complex128)
    z = np.zeros_like(c)
    alive = np.ones(c.shape, dtype=bool)
    for _ in range(max_iter):
        z = np.where(alive, z * z + c, z)
        alive &= np.abs(z) <= 2.0
        if not alive.any():
            break
    return alive


def _mandelbrot_rays(spec: ShapeSpec, n_points: int, rng: np.random.Generator):
    origin = complex(*spec.ray_origin)
    theta = rng.uniform(0.0, 2 * np.pi, size=n_points)
    direction = np.exp(1j * theta)
    steps = np.linspace(0.0, spec.ray_reach, 257)[1:]
    stations = origin + steps[None, :] * direction[:, None]
    inside = mandelbrot_inside(stations, spec.max_iter)
    if not mandelbrot_inside(np.array([origin]), spec.max_iter)[0]:
        raise ValueError("mandelbrot ray origin must lie inside the set")

    first_out = np.argmax(~inside, axis=1)
    s_hi = steps[first_out]
    s_lo = np.where(first_out > 0, steps[np.maximum(first_out - 1, 0)], 0.0)
    while (s_hi - s_lo).max() > spec.bracket_width:
        mid = 0.5 * (s_lo + s_hi)
        mid_inside = mandelbrot_inside(origin + mid * direction, spec.max_iter)
        s_lo = np.where(mid_inside, mid, s_lo)
        s_hi = np.where(mid_inside, s_hi, mid)

    def to_xy(c):
        return np.stack([c.real, c.imag], axis=-1)

    lo_pts, hi_pts = to_xy(origin + s_lo * direction), to_xy(origin + s_hi * direction)
    return 0.5 * (lo_pts + hi_pts), np.stack([lo_pts, hi_pts], axis=1)


def synth_shape(spec: ShapeSpec, n_points: int, seed: int) -> tuple[PointCloud, SyntheticShape]:
    """Surface samples and ground truth of a synthetic shape, in the shape's own frame"""
    rng = np.random.default_rng(seed)
    dim = spec.dim
    center = np.zeros(dim) if spec.center is None else np.asarray(spec.center, dtype=np.float64)
    if center.shape != (dim,):
        raise ValueError(f"{spec.kind} needs a {dim}-dimensional center")
    brackets = None

    if spec.kind == "circle":
        r = spec.radius
        theta = rng.uniform(0.0, 2 * np.pi, size=n_points)
        points = center + r * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        sdf = lambda x: np.linalg.norm(np.atleast_2d(x) - center, axis=1) - r
        params = {"radius": r, "center": center.tolist()}
    elif spec.kind == "sphere":
        r = spec.radius
        n = rng.normal(size=(n_points, 3))
        points = center + r * n / np.linalg.norm(n, axis=1, keepdims=True)
        sdf = lambda x: np.linalg.norm(np.atleast_2d(x) - center, axis=1) - r
        params = {"radius": r, "center": center.tolist()}
    elif spec.kind == "torus":
        R, r = spec.major_radius, spec.minor_radius
        theta = rng.uniform(0.0, 2 * np.pi, size=n_points)
        phi = rng.uniform(0.0, 2 * np.pi, size=n_points)
        ring = R + r * np.cos(phi)
        points = center + np.stack(
            [ring * np.cos(theta), ring * np.sin(theta), r * np.sin(phi)], axis=1
        )

        def sdf(x):
            q = np.atleast_2d(x) - center
            return np.sqrt((np.hypot(q[:, 0], q[:, 1]) - R) ** 2 + q[:, 2] ** 2) - r

        params = {"major_radius": R, "minor_radius": r, "center": center.tolist()}
    else:
        points, brackets = _mandelbrot_rays(spec, n_points, rng)
        sdf = None
        params = {"max_iter": spec.max_iter, "bracket_width": spec.bracket_width}

    if sdf is not None:
        inside = lambda x, _sdf=sdf: _sdf(x) < 0
    else:
        inside = lambda x: mandelbrot_inside(
            np.atleast_2d(x)[:, 0] + 1j * np.atleast_2d(x)[:, 1], spec.max_iter
        )

    cloud = PointCloud(dim=dim, points=points, bbox=_tight_bbox(points))
    shape = SyntheticShape(spec.kind, dim, params, sdf, inside, brackets)
    return cloud, shape
