"""Gradient flows of the (visco-)Eikonal energy on the periodic square [0, 2pi)^2.

Fields are stored on an n x n grid with axis 0 along x1. Integer wavenumbers
follow scipy's fftfreq ordering, so mode (w1, w2) of a field is
fft2(values)[k1, k2] with fftfreq(n, 1/n)[k] = w.

The nonlinear simulator evolves u = a . x + v with v periodic and the
background slope a = (1, 0) (the unit ramp), and implements the p = 1 flow

    u_t = div(kappa(x) g(|grad u|) grad u) - eps^2 kappa_e lap^2 u
    g(s) = 1 / sqrt(s^2 + delta^2) - 1,   kappa(x) = sign(1 + eps lap u - |grad u|)

whose linearization about the ramp has the exponent kappa_e w1^2 - kappa_e eps^2 |w|^4.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import polars as pl
from scipy import fft

from .errors import ConfigError
from .extract import GridField
from .models import FlowConfig, ModeSpec

logger = logging.getLogger(__name__)

BLOW_UP = 1e6
# forward-Euler margins: lap^2 has spectral radius 64 / h^4 and lap 8 / h^2 on the 5-point stencil
CFL_FOURTH = 1.0 / 64.0
CFL_SECOND = 1.0 / 8.0


def periodic_grid(n: int, values=None) -> GridField:
    h = 2 * np.pi / n
    return GridField(2, np.zeros(2), h, (n, n), np.zeros((n, n)) if values is None else values, True)


def wavenumbers(n: int) -> tuple[np.ndarray, np.ndarray]:
    k = fft.fftfreq(n, 1.0 / n)
    return np.meshgrid(k, k, indexing="ij")


def linear_growth_exponent(mode: ModeSpec, p: int) -> complex:
    w1, w2 = mode.omega
    w4 = float(w1 * w1 + w2 * w2) ** 2
    eps2 = mode.epsilon**2
    if p == 1:
        return complex(mode.kappa_e * w1 * w1 - mode.kappa_e * eps2 * w4, 0.0)
    if p == 2:
        return complex(-(w1 * w1) - eps2 * w4, float(w1) ** 3)
    raise ValueError(f"p must be 1 or 2, got {p}")


def growth_exponents(n: int, kappa_e: int, epsilon: float, p: int) -> np.ndarray:
    """Exponent of every grid mode; the mean mode is held fixed"""
    w1, w2 = wavenumbers(n)
    w4 = (w1**2 + w2**2) ** 2
    if p == 1:
        lam = (kappa_e * w1**2 - kappa_e * epsilon**2 * w4).astype(np.complex128)
    elif p == 2:
        lam = -(w1**2) - epsilon**2 * w4 + 1j * w1**3
    else:
        raise ValueError(f"p must be 1 or 2, got {p}")
    lam[0, 0] = 0.0
    return lam


def mode_field(n: int, omega: tuple[int, int], amplitude: float = 1.0, phase: float = 0.0) -> np.ndarray:
    """amplitude * sin(w . x + phase) on the n x n grid"""
    x = 2 * np.pi * np.arange(n) / n
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    return amplitude * np.sin(omega[0] * X1 + omega[1] * X2 + phase)


def perturbed_ramp(n: int, amplitude: float = 1e-3, shell: float = 16.0, seed: int = 0) -> np.ndarray:
    """Periodic part of ramp + perturbation: random-phase modes with round(|w|) == shell"""
    if shell >= n / 2:
        raise ConfigError(f"perturbation shell {shell} is not resolved on a {n}-point grid")
    rng = np.random.default_rng(seed)
    r = int(np.ceil(shell)) + 1
    modes = [
        (a, b)
        for a in range(0, r + 1)
        for b in range(-r, r + 1)
        if (a > 0 or b > 0) and round(np.hypot(a, b)) == round(shell)
    ]
    v = np.zeros((n, n))
    for omega in modes:
        v += mode_field(n, omega, 1.0, rng.uniform(0, 2 * np.pi))
    return amplitude * v / np.sqrt(len(modes))


# --- trajectories ----------------------------------------------------------


def default_bands(n: int) -> list[tuple[float, float]]:
    return [(0.0, n / 8), (n / 8, n / 4), (n / 4, np.inf)]


def band_energy(values: np.ndarray, bands: Sequence[tuple[float, float]]) -> list[float]:
    """Mean-square energy of the modes with lo < |w| <= hi, per band"""
    n = values.shape[0]
    power = np.abs(fft.fft2(values)) ** 2 / n**4
    w1, w2 = wavenumbers(n)
    radius = np.hypot(w1, w2)
    return [float(power[(radius > lo) & (radius <= hi)].sum()) for lo, hi in bands]


@dataclass
class FlowState:
    field: GridField
    time: float = 0.0
    dt: float = 0.0

    def __post_init__(self):
        if not self.field.periodic or self.field.dim != 2:
            raise ConfigError("flows run on 2D periodic grids only")
        if self.time < 0:
            raise ValueError("flow time must be nonnegative")


@dataclass
class FlowTrajectory:
    dt: float
    bands: list[tuple[float, float]]
    times: list[float] = field(default_factory=list)
    max_abs: list[float] = field(default_factory=list)
    energies: list[list[float]] = field(default_factory=list)
    snapshots: list[GridField] = field(default_factory=list)
    blew_up: bool = False

    def record(self, t: float, values: np.ndarray, grid: GridField) -> None:
        self.times.append(float(t))
        self.max_abs.append(float(np.abs(values).max()))
        self.energies.append(band_energy(values, self.bands))
        self.snapshots.append(grid.with_values(values))

    @property
    def final(self) -> GridField:
        return self.snapshots[-1]

    def energy_of(self, band: int) -> np.ndarray:
        return np.array([e[band] for e in self.energies])

    def to_frame(self) -> pl.DataFrame:
        rows = [
            {"t": t, "band_lo": lo, "band_hi": hi, "energy": e[k]}
            for t, e in zip(self.times, self.energies)
            for k, (lo, hi) in enumerate(self.bands)
        ]
        return pl.DataFrame(
            rows,
            schema={"t": pl.Float64, "band_lo": pl.Float64, "band_hi": pl.Float64, "energy": pl.Float64},
        )

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().write_csv(path)
        return path


def _steps(T: float, dt: float) -> int:
    steps = int(round(T / dt))
    if steps < 1:
        raise ConfigError(f"time step {dt} exceeds the horizon {T}")
    return steps


def simulate_linear_flow(
    init: FlowState | GridField,
    kappa_e: int,
    epsilon: float,
    p: int,
    T: float,
    dt: float | None = None,
    record_every: int = 1,
    workers: int = 1,
) -> FlowTrajectory:
    """Exact spectral stepping of the linearized flow: every mode is multiplied by exp(lambda dt)"""
    grid = init.field if isinstance(init, FlowState) else init
    if not grid.periodic:
        raise ConfigError("spectral stepping needs a periodic grid")
    n = grid.shape[0]
    dt = T / 100 if dt is None else dt
    steps = _steps(T, dt)
    propagator = np.exp(growth_exponents(n, kappa_e, epsilon, p) * dt)
    traj = FlowTrajectory(dt=dt, bands=default_bands(n))
    coeffs = fft.fft2(grid.values, workers=workers)
    traj.record(0.0, grid.values, grid)
    for step in range(1, steps + 1):
        coeffs = coeffs * propagator
        if step % record_every == 0 or step == steps:
            values = fft.ifft2(coeffs, workers=workers).real
            traj.record(step * dt, values, grid)
    return traj


def cfl_limit(n: int, epsilon: float) -> float:
    h = 2 * np.pi / n
    if epsilon > 0:
        return CFL_FOURTH * h**4 / epsilon**2
    return CFL_SECOND * h**2


def _grad(v: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    return (
        (np.roll(v, -1, 0) - np.roll(v, 1, 0)) / (2 * h),
        (np.roll(v, -1, 1) - np.roll(v, 1, 1)) / (2 * h),
    )


def _lap(v: np.ndarray, h: float) -> np.ndarray:
    return (
        np.roll(v, 1, 0) + np.roll(v, -1, 0) + np.roll(v, 1, 1) + np.roll(v, -1, 1) - 4 * v
    ) / h**2


def simulate_eikonal_flow(
    init: FlowState | GridField,
    epsilon: float | Callable[[float], float],
    p: int,
    T: float,
    dt: float | None = None,
    kappa_e: int = 1,
    delta: float = 1e-8,
    slope: tuple[float, float] = (1.0, 0.0),
    record_every: int = 10,
) -> FlowTrajectory:
    """Explicit finite-difference stepping of the nonlinear p = 1 flow.

    `init` holds the periodic part v of u = slope . x + v. Divergence and
    bilaplacian are central-difference compositions on the torus, so the mean
    of v is conserved. A trajectory whose max|v| exceeds 1e6 (or turns
    non-finite) stops early with `blew_up` set.
    """
    if p != 1:
        raise ConfigError("the nonlinear flow is implemented for p = 1 only")
    grid = init.field if isinstance(init, FlowState) else init
    if not grid.periodic:
        raise ConfigError("flows run on periodic grids only")
    schedule = epsilon if callable(epsilon) else (lambda t, e=float(epsilon): e)
    n, h = grid.shape[0], grid.spacing
    eps_max = max(schedule(0.0), schedule(T))
    limit = cfl_limit(n, eps_max)
    dt = 0.5 * limit if dt is None else dt
    if dt > limit:
        raise ConfigError(f"dt={dt:.3g} exceeds the explicit stability bound {limit:.3g}")
    steps = _steps(T, dt)
    a1, a2 = slope

    v = np.array(grid.values, dtype=np.float64)
    traj = FlowTrajectory(dt=dt, bands=default_bands(n))
    traj.record(0.0, v, grid)
    for step in range(1, steps + 1):
        t = (step - 1) * dt
        eps = schedule(t)
        d1, d2 = _grad(v, h)
        u1, u2 = a1 + d1, a2 + d2
        s = np.hypot(u1, u2)
        lap = _lap(v, h)
        kappa = np.sign(1.0 + eps * lap - s)
        coef = kappa * (1.0 / np.sqrt(s * s + delta * delta) - 1.0)
        f1, f2 = coef * u1, coef * u2
        div = _grad(f1, h)[0] + _grad(f2, h)[1]
        rate = div - eps**2 * kappa_e * _lap(lap, h)
        v = v + dt * rate

        peak = np.abs(v).max()
        if not np.isfinite(peak) or peak > BLOW_UP:
            traj.blew_up = True
            traj.times.append(step * dt)
            traj.max_abs.append(float(peak))
            traj.energies.append([float("inf")] * len(traj.bands))
            logger.warning("flow blew up at t=%.4g (max|v|=%.3g)", step * dt, peak)
            break
        if step % record_every == 0 or step == steps:
            traj.record(step * dt, v, grid)
    return traj


def run_flow(config: FlowConfig) -> FlowTrajectory:
    """Perturbed-ramp experiment described by a FlowConfig"""
    v0 = perturbed_ramp(config.n, config.amplitude, config.shell, config.seed)
    state = FlowState(periodic_grid(config.n, v0))
    if config.p == 2:
        return simulate_linear_flow(
            state, config.kappa_e, config.epsilon, 2, config.T, config.dt, config.record_every
        )
    return simulate_eikonal_flow(
        state,
        config.epsilon,
        1,
        config.T,
        config.dt,
        kappa_e=config.kappa_e,
        delta=config.delta,
        record_every=config.record_every,
    )


# --- reports ---------------------------------------------------------------


@dataclass
class StabilityReport:
    bands: list[tuple[float, float]]
    slopes: list[float]
    blew_up: bool

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            {
                "band_lo": [lo for lo, _ in self.bands],
                "band_hi": [hi for _, hi in self.bands],
                "growth_rate": self.slopes,
                "blew_up": [self.blew_up] * len(self.bands),
            }
        )


def stability_report(traj: FlowTrajectory) -> StabilityReport:
    """Least-squares slope of log amplitude (half log energy) against time, per band"""
    times = np.array(traj.times)
    slopes = []
    for k in range(len(traj.bands)):
        energy = traj.energy_of(k)
        ok = np.isfinite(energy) & (energy > 0)
        if ok.sum() < 2 or np.allclose(energy[ok], energy[ok][0], rtol=1e-12, atol=0):
            slopes.append(0.0)
            continue
        slope, _ = np.polyfit(times[ok], 0.5 * np.log(energy[ok]), 1)
        slopes.append(float(slope))
    return StabilityReport(list(traj.bands), slopes, traj.blew_up)
