import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import polars as pl
from scipy.interpolate import RegularGridInterpolator

from . import _mc_tables
from .errors import DataError
from .field_net import SineMlpParams, field_values

logger = logging.getLogger(__name__)

GRID_MAGIC = b"VGRD"
GRID_VERSION = 1


@dataclass
class GridField:
    """Scalar samples on a regular isotropic grid.

    `values` has shape `shape` with axis k running along coordinate k, so the
    flat row-major order matches `points()`.
    """

    dim: int
    origin: np.ndarray
    spacing: float
    shape: tuple[int, ...]
    values: np.ndarray
    periodic: bool = False

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.shape = tuple(int(s) for s in self.shape)
        values = np.asarray(self.values, dtype=np.float64)
        if values.size != int(np.prod(self.shape)):
            raise ValueError(f"{values.size} values do not fill a grid of shape {self.shape}")
        self.values = values.reshape(self.shape)
        if self.dim not in (2, 3) or len(self.shape) != self.dim or self.origin.shape != (self.dim,):
            raise ValueError("grid dim, origin and shape disagree")
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")
        if not np.isfinite(self.values).all():
            raise ValueError("grid values must be finite")

    def axes(self) -> list[np.ndarray]:
        return [self.origin[k] + self.spacing * np.arange(n) for k, n in enumerate(self.shape)]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def with_values(self, values) -> "GridField":
        return GridField(self.dim, self.origin, self.spacing, self.shape, values, self.periodic)

    def interpolate(self, xs) -> np.ndarray:
        """Multilinear interpolation of the grid values at xs"""
        interp = RegularGridInterpolator(
            self.axes(), self.values, method="linear", bounds_error=False, fill_value=None
        )
        return interp(np.atleast_2d(np.asarray(xs, dtype=np.float64)))

    def diameter(self) -> float:
        return float(self.spacing * np.linalg.norm(np.array(self.shape) - 1))


def grid_geometry(bbox, resolution: int) -> tuple[np.ndarray, float, tuple[int, ...]]:
    """Origin, isotropic spacing and shape of a grid with `resolution` nodes on the shortest side"""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    if resolution < 2:
        raise ValueError("grid resolution must be at least 2 per axis")
    extent = hi - lo
    if np.any(extent <= 0):
        raise ValueError("bounding box must have positive extent on every axis")
    h = float(extent.min() / (resolution - 1))
    shape = tuple(int(np.floor(e / h + 1e-9)) + 1 for e in extent)
    return lo, h, shape


def eval_grid(
    params: SineMlpParams | Callable[[np.ndarray], np.ndarray],
    bbox,
    resolution: int,
    workers: int = 1,
    slab_size: int = 65_536,
) -> GridField:
    origin, h, shape = grid_geometry(bbox, resolution)
    grid = GridField(len(shape), origin, h, shape, np.zeros(shape))
    points = grid.points()
    if isinstance(params, SineMlpParams):
        fn = lambda xs: field_values(params, xs)
    else:
        fn = params
    slabs = [points[i : i + slab_size] for i in range(0, len(points), slab_size)]
    if workers > 1 and len(slabs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, slabs))
    else:
        parts = [fn(s) for s in slabs]
    values = np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])
    logger.info("evaluated %s grid (h=%.4g)", "x".join(map(str, shape)), h)
    return grid.with_values(values)


def save_grid(grid: GridField, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(
        {
            "dim": grid.dim,
            "origin": grid.origin.tolist(),
            "spacing": grid.spacing,
            "shape": list(grid.shape),
            "periodic": grid.periodic,
        }
    ).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<II", GRID_VERSION, len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())
    return path


def load_grid(path) -> GridField:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read grid: {exc}", path=path) from exc
    if blob[:4] != GRID_MAGIC or len(blob) < 12:
        raise DataError("not a viscosdf grid (bad magic)", path=path)
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != GRID_VERSION:
        raise DataError(f"unsupported grid version {version}", path=path)
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
        values = np.frombuffer(blob[12 + header_len :], dtype="<f8").astype(np.float64)
        return GridField(
            header["dim"],
            header["origin"],
            header["spacing"],
            header["shape"],
            values,
            header.get("periodic", False),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"corrupt grid: {exc}", path=path) from exc


# --- marching --------------------------------------------------------------


@dataclass
class SurfaceMesh:
    """Triangles (3D) or segments (2D) over a shared vertex array"""

    dim: int
    vertices: np.ndarray = None
    elements: np.ndarray = None

    def __post_init__(self):
        k = self.dim
        if self.vertices is None:
            self.vertices = np.zeros((0, k))
        if self.elements is None:
            self.elements = np.zeros((0, k), dtype=np.int64)
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, k)
        self.elements = np.asarray(self.elements, dtype=np.int64).reshape(-1, k)
        if self.elements.size:
            if self.elements.min() < 0 or self.elements.max() >= len(self.vertices):
                raise ValueError("element index out of range")
            s = np.sort(self.elements, axis=1)
            if np.any(s[:, 1:] == s[:, :-1]):
                raise ValueError("degenerate element with a repeated vertex")

    @property
    def is_empty(self) -> bool:
        return len(self.elements) == 0

    def open_edges(self) -> int:
        """Edges (3D) or vertices (2D) not shared by exactly two elements"""
        if self.is_empty:
            return 0
        if self.dim == 2:
            _, counts = np.unique(self.elements.ravel(), return_counts=True)
        else:
            e = self.elements
            edges = np.sort(np.concatenate([e[:, [0, 1]], e[:, [1, 2]], e[:, [2, 0]]]), axis=1)
            _, counts = np.unique(edges, axis=0, return_counts=True)
        return int((counts != 2).sum())

    def polylines(self) -> list[np.ndarray]:
        """Chain 2D segments into vertex-index paths; closed loops repeat their first index"""
        if self.dim != 2:
            raise ValueError("polylines are defined for 2D contours only")
        neighbours: dict[int, list[int]] = {}
        for a, b in self.elements.tolist():
            neighbours.setdefault(a, []).append(b)
            neighbours.setdefault(b, []).append(a)
        seen: set[tuple[int, int]] = set()
        ends = [v for v, n in neighbours.items() if len(n) != 2]
        starts = sorted(ends) + sorted(neighbours)
        lines = []
        for start in starts:
            for nxt in neighbours[start]:
                if (min(start, nxt), max(start, nxt)) in seen:
                    continue
                path, prev, cur = [start], start, nxt
                seen.add((min(prev, cur), max(prev, cur)))
                while True:
                    path.append(cur)
                    step = [
                        n for n in neighbours[cur] if (min(cur, n), max(cur, n)) not in seen
                    ]
                    if not step:
                        break
                    prev, cur = cur, step[0]
                    seen.add((min(prev, cur), max(prev, cur)))
                lines.append(np.array(path))
        return lines


# marching squares: corner offsets, (axis, low corner) per edge, segments per case
_SQ_CORNERS = np.array([[0, 0], [1, 0], [1, 1], [0, 1]])
_SQ_EDGES = np.array([[0, 0], [1, 1], [0, 3], [1, 0]])
# Ambiguous cases 5 and 10 always isolate the below-iso corners.
_SQ_SEGMENTS = [
    [],
    [(3, 0)],
    [(0, 1)],
    [(3, 1)],
    [(1, 2)],
    [(3, 0), (1, 2)],
    [(0, 2)],
    [(3, 2)],
    [(2, 3)],
    [(0, 2)],
    [(0, 1), (2, 3)],
    [(1, 2)],
    [(1, 3)],
    [(0, 1)],
    [(3, 0)],
    [],
]
_SQ_TABLE = np.full((16, 4), -1, dtype=np.int64)
for _case, _segs in enumerate(_SQ_SEGMENTS):
    _flat = [e for seg in _segs for e in seg]
    _SQ_TABLE[_case, : len(_flat)] = _flat


def _cell_cases(values: np.ndarray, iso: float, corners: np.ndarray) -> np.ndarray:
    below = values < iso
    cells = tuple(n - 1 for n in values.shape)
    case = np.zeros(cells, dtype=np.int64)
    for bit, offset in enumerate(corners):
        view = below[tuple(slice(o, o + n) for o, n in zip(offset, cells))]
        case |= view.astype(np.int64) << bit
    return case


def march(grid: GridField, iso: float = 0.0) -> SurfaceMesh:
    """Zero level set (or `iso` level set) of a grid as a mesh.

    Vertices are placed by linear interpolation on sign-change edges and keyed
    by the global id of the grid edge they sit on, so the output order is a
    function of the grid alone.
    """
    dim = grid.dim
    if min(grid.shape) < 2:
        return SurfaceMesh(dim)
    if dim == 3:
        corners, edges, table = _mc_tables.CORNERS, _mc_tables.EDGES, _mc_tables.TRIANGLES
    else:
        corners, edges, table = _SQ_CORNERS, _SQ_EDGES, _SQ_TABLE

    case = _cell_cases(grid.values, iso, corners)
    cells = np.argwhere((case != 0) & (case != 2 ** len(corners) - 1))
    if len(cells) == 0:
        return SurfaceMesh(dim)

    rows = table[case[tuple(cells.T)]]
    valid = rows >= 0
    edge_ids = rows[valid]
    owner = np.nonzero(valid)[0]
    axis = edges[edge_ids, 0]
    base = cells[owner] + corners[edges[edge_ids, 1]]
    gid = np.ravel_multi_index(tuple(base.T), grid.shape) * dim + axis

    keys, inverse = np.unique(gid, return_inverse=True)
    elements = inverse.reshape(-1, dim)

    node = np.array(np.unravel_index(keys // dim, grid.shape)).T
    step = np.eye(dim, dtype=np.int64)[keys % dim]
    v0 = grid.values[tuple(node.T)]
    v1 = grid.values[tuple((node + step).T)]
    t = (iso - v0) / (v1 - v0)
    vertices = grid.origin + grid.spacing * (node + t[:, None] * step)

    mesh = SurfaceMesh(dim, vertices, elements)
    logger.info(
        "marched %d cells into %d vertices and %d elements",
        len(cells),
        len(vertices),
        len(elements),
    )
    return mesh


# --- mesh files ------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def export_mesh(mesh: SurfaceMesh, path, format: Literal["obj", "ply"] | None = None) -> Path:
    """Write a mesh as OBJ (v/f, or v/l for 2D contours) or ASCII PLY"""
    path = Path(path)
    format = format or path.suffix.lstrip(".").lower()
    verts = mesh.vertices
    if mesh.dim == 2:
        verts = np.column_stack([verts, np.zeros(len(verts))])
    lines: list[str] = []
    if format == "obj":
        tag = "f" if mesh.dim == 3 else "l"
        lines += ["v " + " ".join(_fmt(c) for c in v) for v in verts]
        lines += [f"{tag} " + " ".join(str(i + 1) for i in e) for e in mesh.elements]
    elif format == "ply":
        element = "face" if mesh.dim == 3 else "edge"
        lines += [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(verts)}",
            "property double x",
            "property double y",
            "property double z",
            f"element {element} {len(mesh.elements)}",
        ]
        if mesh.dim == 3:
            lines.append("property list uchar int vertex_indices")
        else:
            lines += ["property int vertex1", "property int vertex2"]
        lines.append("end_header")
        lines += [" ".join(_fmt(c) for c in v) for v in verts]
        prefix = "3 " if mesh.dim == 3 else ""
        lines += [prefix + " ".join(str(i) for i in e) for e in mesh.elements]
    else:
        raise ValueError(f"unknown mesh format {format!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def _load_obj(fp: Path) -> SurfaceMesh:
    verts, faces, segs = [], [], []
    for lineno, line in enumerate(fp.read_text().splitlines(), start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        try:
            if tokens[0] == "v":
                verts.append([float(t) for t in tokens[1:4]])
            elif tokens[0] == "f":
                faces.append([int(t.split("/")[0]) - 1 for t in tokens[1:4]])
            elif tokens[0] == "l":
                segs.append([int(t) - 1 for t in tokens[1:3]])
        except ValueError as exc:
            raise DataError(f"malformed OBJ line: {line!r}", fp, lineno) from exc
    if segs and not faces:
        return SurfaceMesh(2, np.array(verts).reshape(-1, 3)[:, :2], segs)
    return SurfaceMesh(3, np.array(verts).reshape(-1, 3), np.array(faces).reshape(-1, 3))


def _load_ply_mesh(fp: Path) -> SurfaceMesh:
    lines = fp.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DataError("missing 'ply' magic line", fp, 1)
    counts: dict[str, int] = {}
    order: list[str] = []
    start = None
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if tokens and tokens[0] == "element":
            counts[tokens[1]] = int(tokens[2])
            order.append(tokens[1])
        elif tokens and tokens[0] == "end_header":
            start = lineno
            break
    if start is None:
        raise DataError("PLY header has no end_header", fp)
    body = [l.split() for l in lines[start:] if l.strip()]
    blocks: dict[str, list[list[str]]] = {}
    pos = 0
    for name in order:
        blocks[name] = body[pos : pos + counts[name]]
        pos += counts[name]
    try:
        verts = np.array([[float(t) for t in r[:3]] for r in blocks.get("vertex", [])])
        if "edge" in blocks:
            segs = [[int(t) for t in r[:2]] for r in blocks["edge"]]
            return SurfaceMesh(2, verts.reshape(-1, 3)[:, :2], segs)
        faces = [[int(t) for t in r[1:4]] for r in blocks.get("face", [])]
    except ValueError as exc:
        raise DataError(f"malformed PLY body: {exc}", fp) from exc
    return SurfaceMesh(3, verts.reshape(-1, 3), np.array(faces).reshape(-1, 3))


def load_mesh(path) -> SurfaceMesh:
    path = Path(path)
    if not path.exists():
        raise DataError("mesh file not found", path=path)
    suffix = path.suffix.lstrip(".").lower()
    if suffix == "obj":
        return _load_obj(path)
    if suffix == "ply":
        return _load_ply_mesh(path)
    raise DataError(f"unknown mesh format {suffix!r}", path=path)


def contour_frame(mesh: SurfaceMesh) -> pl.DataFrame:
    """2D contour as ordered polyline points with columns x, y, segment_id"""
    xs, ys, ids = [], [], []
    for k, line in enumerate(mesh.polylines()):
        pts = mesh.vertices[line]
        xs += pts[:, 0].tolist()
        ys += pts[:, 1].tolist()
        ids += [k] * len(line)
    return pl.DataFrame(
        {"x": xs, "y": ys, "segment_id": ids},
        schema={"x": pl.Float64, "y": pl.Float64, "segment_id": pl.Int64},
    )


def write_contour_csv(mesh: SurfaceMesh, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    contour_frame(mesh).write_csv(path)
    return path
