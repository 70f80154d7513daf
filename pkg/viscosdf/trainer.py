import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import polars as pl

from .errors import NonFiniteError
from .field_net import ParamGrad, SineMlpParams, init_geometric, init_mfgi, loss_gradient
from .losses import LossBreakdown, LossSpec, epsilon_at
from .models import AdamConfig, TrainConfig
from .sampler_io import PointCloud, sample_batch

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["iter", "eps", "L_m", "L_nm", "L_veik", "total", "grad_norm", "ms"]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(
    state: AdamState,
    params: SineMlpParams,
    grad: ParamGrad,
    lr: float,
    config: AdamConfig = AdamConfig(),
) -> tuple[AdamState, SineMlpParams]:
    """One bias-corrected Adam update; inputs are left untouched"""
    g = grad.flatten()
    theta = params.flatten()
    if g.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError("gradient, moments and parameters must be shape-congruent")
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * g
    v = config.beta2 * state.v + (1.0 - config.beta2) * (g * g)
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + config.eps_hat)
    return AdamState(m, v, t), params.with_flat(theta)


@dataclass(frozen=True)
class LogRecord:
    iteration: int
    epsilon: float
    breakdown: LossBreakdown
    grad_norm: float
    ms: float


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)
    checkpoints: list[tuple[int, SineMlpParams]] = field(default_factory=list)

    def append(self, record: LogRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("log iterations must be strictly increasing")
        self.records.append(record)

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            {
                "iter": [r.iteration for r in self.records],
                "eps": [r.epsilon for r in self.records],
                "L_m": [r.breakdown.manifold for r in self.records],
                "L_nm": [r.breakdown.nonmanifold for r in self.records],
                "L_veik": [r.breakdown.eikonal_or_visco for r in self.records],
                "total": [r.breakdown.total for r in self.records],
                "grad_norm": [r.grad_norm for r in self.records],
                "ms": [r.ms for r in self.records],
            },
            schema={c: (pl.Int64 if c == "iter" else pl.Float64) for c in LOG_COLUMNS},
        )

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().write_csv(path, float_precision=None)
        return path

    def residual_spikes(self, factor: float = 10.0) -> int:
        """Logged iterations whose (visco-)Eikonal term exceeds factor x the run median"""
        residual = self.to_frame()["L_veik"]
        if residual.len() == 0:
            return 0
        return int((residual > factor * residual.median()).sum())


def initial_params(config: TrainConfig, dim: int) -> SineMlpParams:
    arch = config.arch
    if arch.input_dim != dim:
        arch = arch.model_copy(update={"input_dim": dim})
    if config.init == "mfgi":
        return init_mfgi(arch, config.seed, config.sphere_scale, config.perturb)
    return init_geometric(arch, config.seed)


def train(config: TrainConfig, cloud: PointCloud) -> tuple[SineMlpParams, TrainLog]:
    """Fit a sine network to a normalized cloud with Adam.

    Iteration i samples its batch from a generator seeded by (seed, i) and
    uses eps = epsilon_at(schedule, i / iterations), so the trajectory is a
    pure function of (config, cloud).
    """
    params = initial_params(config, cloud.dim)
    state = AdamState.zeros(params.n_params)
    log = TrainLog()
    marks = set(config.checkpoint_iterations())
    logger.info(
        "training %d params for %d iterations (schedule %s, viscous=%s)",
        params.n_params,
        config.iterations,
        config.schedule.label(),
        config.viscous,
    )

    for i in range(config.iterations):
        started = time.perf_counter()
        eps = epsilon_at(config.schedule, i / config.iterations) if config.viscous else 0.0
        batch = sample_batch(
            cloud, np.random.default_rng([config.seed, i]), config.n_surface, config.n_domain
        )
        objective = LossSpec(config.weights, eps, config.viscous)
        try:
            breakdown, grad = loss_gradient(params, batch, objective)
        except NonFiniteError as exc:
            logger.error("aborting at iteration %d (eps=%g): %s", i, eps, exc)
            raise NonFiniteError(exc.term, iteration=i, epsilon=eps) from exc

        state, params = adam_step(state, params, grad, config.learning_rate, config.adam)
        if not params.is_finite():
            raise NonFiniteError("parameters", iteration=i, epsilon=eps)

        if i % config.log_every == 0 or i == config.iterations - 1:
            ms = (time.perf_counter() - started) * 1e3 if config.record_wall_time else 0.0
            grad_norm = grad.norm()
            log.append(LogRecord(i, eps, breakdown, grad_norm, ms))
            logger.info(
                "iter %d eps %.4g total %.6g grad_norm %.4g", i, eps, breakdown.total, grad_norm
            )
        if i + 1 in marks:
            log.checkpoints.append((i + 1, params.copy()))

    return params, log
