"""Sine-activated MLP carrying spatial jets.

The forward pass propagates, per point, the triple (value, gradient w.r.t. x,
Laplacian w.r.t. x) through every layer. For a pre-activation jet
(z, Jz, Lz) the sine layer produces

    (sin z, cos z * Jz, cos z * Lz - sin z * |Jz|^2)

with |Jz|^2 taken row-wise over the spatial axis. A reverse pass over the
same graph turns adjoints of the output jet into parameter gradients, so any
loss written on (u, grad u, lap u) can be differentiated exactly without a
generic higher-order autodiff engine.
"""

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Protocol, Sequence

import numpy as np

from .errors import DataError, NonFiniteError
from .models import Architecture

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VSDF"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Jet2:
    value: float
    grad: np.ndarray
    laplacian: float


@dataclass
class JetBatch:
    """Jets of many points stored as arrays; indexes and iterates like a list of Jet2"""

    value: np.ndarray
    grad: np.ndarray
    laplacian: np.ndarray

    def __len__(self) -> int:
        return self.value.shape[0]

    def __getitem__(self, index):
        if isinstance(index, (int, np.integer)):
            return Jet2(
                value=float(self.value[index]),
                grad=self.grad[index].copy(),
                laplacian=float(self.laplacian[index]),
            )
        return JetBatch(self.value[index], self.grad[index], self.laplacian[index])

    def __iter__(self) -> Iterator[Jet2]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_jets(cls, jets: Sequence[Jet2]) -> "JetBatch":
        if isinstance(jets, JetBatch):
            return jets
        jets = list(jets)
        if not jets:
            return cls(np.zeros(0), np.zeros((0, 0)), np.zeros(0))
        return cls(
            value=np.array([j.value for j in jets], dtype=np.float64),
            grad=np.stack([np.asarray(j.grad, dtype=np.float64) for j in jets]),
            laplacian=np.array([j.laplacian for j in jets], dtype=np.float64),
        )

    @classmethod
    def concat(cls, parts: Sequence["JetBatch"]) -> "JetBatch":
        return cls(
            value=np.concatenate([p.value for p in parts]),
            grad=np.concatenate([p.grad for p in parts]),
            laplacian=np.concatenate([p.laplacian for p in parts]),
        )

    def grad_norm(self) -> np.ndarray:
        return np.linalg.norm(self.grad, axis=1)

    def is_finite(self) -> bool:
        return bool(
            np.isfinite(self.value).all()
            and np.isfinite(self.grad).all()
            and np.isfinite(self.laplacian).all()
        )


@dataclass
class JetAdjoint:
    """d(loss)/d(value, grad, laplacian) for every point of a JetBatch"""

    value: np.ndarray
    grad: np.ndarray
    laplacian: np.ndarray

    @classmethod
    def zeros(cls, n: int, dim: int) -> "JetAdjoint":
        return cls(np.zeros(n), np.zeros((n, dim)), np.zeros(n))


@dataclass
class SineMlpParams:
    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        shapes = self.arch.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ValueError(
                f"expected {len(shapes)} layers, got {len(self.weights)} weights "
                f"and {len(self.biases)} biases"
            )
        for k, ((out, inp), W, b) in enumerate(zip(shapes, self.weights, self.biases)):
            if W.shape != (out, inp) or b.shape != (out,):
                raise ValueError(
                    f"layer {k}: expected W{(out, inp)} b{(out,)}, got W{W.shape} b{b.shape}"
                )

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def is_finite(self) -> bool:
        return all(
            np.isfinite(W).all() and np.isfinite(b).all()
            for W, b in zip(self.weights, self.biases)
        )

    def flatten(self) -> np.ndarray:
        """Row-major weights then bias, layer after layer"""
        return np.concatenate(
            [np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)]
        )

    def with_flat(self, flat: np.ndarray) -> "SineMlpParams":
        weights, biases = _split_flat(self.arch, flat)
        return SineMlpParams(self.arch, weights, biases)

    def copy(self) -> "SineMlpParams":
        return SineMlpParams(
            self.arch, [W.copy() for W in self.weights], [b.copy() for b in self.biases]
        )

    def layer_frequency(self, k: int) -> float:
        """Frequency multiplying the pre-activation of layer k (1 for the output)"""
        if k == 0:
            return self.arch.omega0
        if k < len(self.weights) - 1:
            return self.arch.omega_hidden
        return 1.0


@dataclass
class ParamGrad:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __add__(self, other: "ParamGrad") -> "ParamGrad":
        return ParamGrad(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)]
        )

    def norm(self) -> float:
        return float(np.linalg.norm(self.flatten()))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.flatten()).all())


def _split_flat(arch: Architecture, flat: np.ndarray):
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size != arch.n_params():
        raise ValueError(f"expected {arch.n_params()} parameters, got {flat.size}")
    weights, biases, pos = [], [], 0
    for out, inp in arch.layer_shapes():
        weights.append(flat[pos : pos + out * inp].reshape(out, inp).copy())
        pos += out * inp
        biases.append(flat[pos : pos + out].copy())
        pos += out
    return weights, biases


# --- initialization --------------------------------------------------------


def init_bounds(arch: Architecture) -> list[tuple[float, float]]:
    """Uniform (weight, bias) half-widths of the plain sine initialization"""
    bounds = []
    shapes = arch.layer_shapes()
    for k, (_, inp) in enumerate(shapes):
        if k == 0:
            bounds.append((1.0 / inp, 1.0 / inp))
        elif k < len(shapes) - 1:
            bounds.append(
                (np.sqrt(6.0 / inp) / arch.omega_hidden, 1.0 / np.sqrt(inp) / arch.omega_hidden)
            )
        else:
            bounds.append((np.sqrt(6.0 / inp), 0.0))
    return bounds


def init_geometric(arch: Architecture, seed: int) -> SineMlpParams:
    """Plain uniform sine-network initialization, no shape prior"""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for (out, inp), (wb, bb) in zip(arch.layer_shapes(), init_bounds(arch)):
        weights.append(rng.uniform(-wb, wb, size=(out, inp)))
        biases.append(rng.uniform(-bb, bb, size=out) if bb > 0 else np.zeros(out))
    return SineMlpParams(arch, weights, biases)


def _sphere_directions(dim: int, count: int) -> np.ndarray:
    if dim == 2:
        theta = 2 * np.pi * (np.arange(count) + 0.5) / count
        return np.stack([np.cos(theta), np.sin(theta)], axis=1)
    # Fibonacci lattice on S^2
    k = np.arange(count) + 0.5
    z = 1 - 2 * k / count
    phi = np.pi * (1 + 5**0.5) * k
    r = np.sqrt(1 - z**2)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def init_mfgi(
    arch: Architecture,
    seed: int,
    sphere_scale: float = 1.6,
    perturb: float = 0.1,
    radius: float = 0.35,
) -> SineMlpParams:
    """Multi-frequency geometric initialization.

    Half of the first-layer neurons become low-frequency cosines
    cos(sphere_scale * w.x) along random unit directions w; their sum peaks at
    the origin and falls off radially, so the network starts as a sphere-like
    field. The remaining neurons keep the high-frequency sine initialization.
    Hidden layers start as scaled identities plus `perturb`-sized noise, and the
    output layer is calibrated so that u(0) = -radius and u vanishes on
    average on the sphere of that radius.
    """
    rng = np.random.default_rng(seed)
    d, m = arch.input_dim, arch.width
    shapes = arch.layer_shapes()
    n_geo = max(1, m // 2)
    gain = 0.5

    W0 = rng.uniform(-1.0 / d, 1.0 / d, size=(m, d))
    b0 = rng.uniform(-1.0 / d, 1.0 / d, size=m)
    dirs = rng.normal(size=(n_geo, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    W0[:n_geo] = sphere_scale * dirs / arch.omega0
    b0[:n_geo] = 0.5 * np.pi / arch.omega0
    weights, biases = [W0], [b0]

    for _ in range(len(shapes) - 2):
        noise = rng.uniform(-1.0, 1.0, size=(m, m)) * perturb / m
        weights.append((gain * np.eye(m) + noise) / arch.omega_hidden)
        biases.append(np.zeros(m))

    v = np.zeros(m)
    v[:n_geo] = -1.0
    v[n_geo:] = rng.uniform(-1.0, 1.0, size=m - n_geo) * perturb / m
    weights.append(v[None, :])
    biases.append(np.zeros(1))
    params = SineMlpParams(arch, weights, biases)

    center = field_values(params, np.zeros((1, d)))[0]
    shell = field_values(params, radius * _sphere_directions(d, 64)).mean()
    spread = shell - center
    scale = radius / spread if spread > 0 else 1.0
    if spread <= 0:
        logger.warning("mfgi calibration found no radial spread; output left unscaled")
    weights[-1] = weights[-1] * scale
    biases[-1] = np.array([-shell * scale])
    return SineMlpParams(arch, weights, biases)


# --- forward ---------------------------------------------------------------


def _check_points(params: SineMlpParams, xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[None, :]
    if xs.ndim != 2 or xs.shape[1] != params.arch.input_dim:
        raise ValueError(
            f"points must have dimension {params.arch.input_dim}, got shape {xs.shape}"
        )
    return xs


def field_values(params: SineMlpParams, xs) -> np.ndarray:
    """Network values only, no derivatives"""
    a = _check_points(params, xs)
    for k in range(len(params.weights) - 1):
        a = np.sin(params.layer_frequency(k) * (a @ params.weights[k].T + params.biases[k]))
    return a @ params.weights[-1][0] + params.biases[-1][0]


# Spatial Jacobians are stored as (d, n, width): J[e, j, i] is the derivative
# of unit i at point j along axis e, so every layer product is one matmul.


def _forward(params: SineMlpParams, x: np.ndarray, keep: bool):
    n, d = x.shape
    a = x
    J = np.broadcast_to(np.eye(d)[:, None, :], (d, n, d))
    L = np.zeros((n, d))
    tape = []
    for k in range(len(params.weights) - 1):
        W, b, w = params.weights[k], params.biases[k], params.layer_frequency(k)
        z = w * (a @ W.T + b)
        Jz = w * (J @ W.T)
        Lz = w * (L @ W.T)
        s, c = np.sin(z), np.cos(z)
        q = np.square(Jz).sum(axis=0)
        if keep:
            tape.append((a, J, L, Jz, Lz, s, c, q))
        a, J, L = s, c * Jz, c * Lz - s * q
    v = params.weights[-1][0]
    jet = JetBatch(
        value=a @ v + params.biases[-1][0],
        grad=np.ascontiguousarray((J @ v).T),
        laplacian=L @ v,
    )
    return jet, (tape, a, J, L)


def _backward(params: SineMlpParams, state, adjoint: JetAdjoint) -> ParamGrad:
    tape, a, J, L = state
    n_layers = len(params.weights)
    gW: list[np.ndarray] = [None] * n_layers
    gb: list[np.ndarray] = [None] * n_layers

    v = params.weights[-1][0]
    u_bar, l_bar = adjoint.value, adjoint.laplacian
    g_bar = np.ascontiguousarray(adjoint.grad.T)
    gW[-1] = (u_bar @ a + g_bar.reshape(-1) @ J.reshape(-1, v.size) + l_bar @ L)[None, :]
    gb[-1] = np.array([u_bar.sum()])

    a_bar = np.outer(u_bar, v)
    J_bar = g_bar[..., None] * v
    L_bar = np.outer(l_bar, v)
    for k in reversed(range(n_layers - 1)):
        a_in, J_in, L_in, Jz, Lz, s, c, q = tape[k]
        W, w = params.weights[k], params.layer_frequency(k)
        m, i = W.shape
        z_bar = a_bar * c - s * (J_bar * Jz).sum(axis=0) - L_bar * (s * Lz + c * q)
        Jz_bar = c * J_bar - 2.0 * (L_bar * s) * Jz
        Lz_bar = L_bar * c
        gW[k] = w * (
            z_bar.T @ a_in
            + Jz_bar.reshape(-1, m).T @ J_in.reshape(-1, i)
            + Lz_bar.T @ L_in
        )
        gb[k] = w * z_bar.sum(axis=0)
        if k > 0:
            a_bar = w * (z_bar @ W)
            J_bar = w * (Jz_bar @ W)
            L_bar = w * (Lz_bar @ W)
    return ParamGrad(gW, gb)


def forward_jet(params: SineMlpParams, x) -> Jet2:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"forward_jet takes a single point, got shape {x.shape}")
    jet, _ = _forward(params, _check_points(params, x), keep=False)
    return jet[0]


def forward_jet_batch(
    params: SineMlpParams,
    xs,
    chunk_size: int | None = None,
    workers: int = 1,
) -> JetBatch:
    """Jets of every point in xs, in input order.

    With chunk_size set, the batch is split into contiguous chunks that may be
    evaluated on `workers` threads; chunks are merged back in order, so the
    result does not depend on the worker count.
    """
    xs = _check_points(params, xs)
    if chunk_size is None or xs.shape[0] <= chunk_size:
        return _forward(params, xs, keep=False)[0]
    chunks = [xs[i : i + chunk_size] for i in range(0, xs.shape[0], chunk_size)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _forward(params, c, keep=False)[0], chunks))
    else:
        parts = [_forward(params, c, keep=False)[0] for c in chunks]
    return JetBatch.concat(parts)


class JetObjective(Protocol):
    """A scalar loss written on named groups of jets.

    Returns a breakdown object exposing `.total` and the adjoint of the total
    with respect to every group's jets.
    """

    def __call__(self, jets: Mapping[str, JetBatch]) -> tuple[object, Mapping[str, JetAdjoint]]: ...


def loss_gradient(params: SineMlpParams, batch, objective: JetObjective):
    """Loss breakdown and exact parameter gradient of `objective` on `batch`.

    `batch` maps group names to point arrays (a TrainBatch is accepted through
    its `groups()`); `objective` receives the jets of every group.
    """
    groups: Mapping[str, np.ndarray] = batch.groups() if hasattr(batch, "groups") else batch
    jets, states = {}, {}
    for name, points in groups.items():
        jet, state = _forward(params, _check_points(params, points), keep=True)
        if not jet.is_finite():
            raise NonFiniteError(f"jets[{name}]")
        jets[name], states[name] = jet, state

    breakdown, adjoints = objective(jets)
    if not np.isfinite(breakdown.total):
        raise NonFiniteError("total")

    grad = None
    for name, adjoint in adjoints.items():
        part = _backward(params, states[name], adjoint)
        grad = part if grad is None else grad + part
    if grad is None:
        grad = ParamGrad(
            [np.zeros_like(W) for W in params.weights], [np.zeros_like(b) for b in params.biases]
        )
    if not grad.is_finite():
        raise NonFiniteError("parameter gradient")
    return breakdown, grad


# --- checkpoints -----------------------------------------------------------


def save_params(params: SineMlpParams, path) -> Path:
    """Write a checkpoint: magic, version, JSON header, row-major float64 layers"""
    if not params.is_finite():
        raise NonFiniteError("checkpoint parameters")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(
        {"arch": params.arch.model_dump(), "shapes": params.arch.layer_shapes()}
    ).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for W, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return path


def load_params(path) -> SineMlpParams:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}", path=path) from exc
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError("not a viscosdf checkpoint (bad magic)", path=path)
    if len(blob) < 12:
        raise DataError("truncated checkpoint header", path=path)
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}", path=path)
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
        arch = Architecture(**header["arch"])
    except (ValueError, KeyError) as exc:
        raise DataError(f"corrupt checkpoint header: {exc}", path=path) from exc
    body = blob[12 + header_len :]
    if len(body) != 8 * arch.n_params():
        raise DataError(
            f"checkpoint body has {len(body)} bytes, expected {8 * arch.n_params()}", path=path
        )
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    weights, biases = _split_flat(arch, flat)
    return SineMlpParams(arch, weights, biases)
