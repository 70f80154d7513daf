import datetime
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Architecture(BaseModel):
    model_config = ConfigDict(frozen=True)

    input_dim: Literal[2, 3] = 3
    hidden_layers: int = Field(default=3, ge=1)
    width: int = Field(default=64, ge=1)
    omega0: float = Field(default=30.0, gt=0)
    omega_hidden: float = Field(default=1.0, gt=0)

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) shape of every affine layer, input to scalar output"""
        dims = [self.input_dim] + [self.width] * self.hidden_layers + [1]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())


class LossWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha_m: float = Field(default=3000.0, ge=0)
    alpha_nm: float = Field(default=100.0, ge=0)
    alpha_e: float = Field(default=50.0, ge=0)
    alpha_exp: float = Field(default=100.0, gt=0)
    p: Literal[1, 2] = 1

    @model_validator(mode="after")
    def _some_weight_positive(self):
        if max(self.alpha_m, self.alpha_nm, self.alpha_e) <= 0:
            raise ValueError("at least one of alpha_m, alpha_nm, alpha_e must be positive")
        return self

    def scaled(self, c: float) -> "LossWeights":
        return self.model_copy(
            update=dict(
                alpha_m=self.alpha_m * c,
                alpha_nm=self.alpha_nm * c,
                alpha_e=self.alpha_e * c,
            )
        )


BASELINE_BREAKPOINTS = [(0.0, 1.0), (0.2, 0.8), (0.4, 0.08), (0.6, 0.01), (0.8, 0.0)]

SCHEDULE_PRESETS: dict[str, dict] = {
    "baseline": dict(breakpoints=BASELINE_BREAKPOINTS),
    "baseline_x2": dict(breakpoints=[(t, 2 * e) for t, e in BASELINE_BREAKPOINTS]),
    "baseline_x0.5": dict(breakpoints=[(t, 0.5 * e) for t, e in BASELINE_BREAKPOINTS]),
    "fast": dict(breakpoints=[(0.0, 1.0), (0.2, 0.0)]),
    "slow": dict(breakpoints=[(0.0, 1.0), (0.9, 0.0)]),
    "zero": dict(breakpoints=[(0.0, 0.0)]),
    "piecewise_constant": dict(breakpoints=BASELINE_BREAKPOINTS, interpolation="constant"),
    "quintic": dict(breakpoints=[(0.0, 1.0), (0.8, 0.0)], interpolation="quintic"),
    "lordquas": dict(
        breakpoints=[(0.0, 1.0), (0.2, 0.5), (0.4, 0.2), (0.6, 0.05), (0.8, 0.0)]
    ),
    "scene": dict(breakpoints=[(0.0, 0.5), (0.5, 0.01), (0.6, 0.0)]),
    "shapenet": dict(
        breakpoints=[(0.0, 1.0), (0.1, 0.75), (0.2, 0.5), (0.3, 0.25), (0.4, 0.0)]
    ),
}


def parse_breakpoints(text: str) -> list[tuple[float, float]]:
    """Parse the "progress:epsilon, ..." schedule syntax"""
    pairs = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        progress, sep, epsilon = chunk.partition(":")
        if not sep:
            raise ValueError(f"schedule entry {chunk!r} is not of the form progress:epsilon")
        pairs.append((float(progress), float(epsilon)))
    return pairs


class ViscositySchedule(BaseModel):
    model_config = ConfigDict(frozen=True)

    breakpoints: list[tuple[float, float]] = Field(
        default_factory=lambda: list(BASELINE_BREAKPOINTS)
    )
    interpolation: Literal["linear", "constant", "quintic"] = "linear"
    name: str | None = None

    @field_validator("breakpoints", mode="before")
    @classmethod
    def _parse_text(cls, value):
        if isinstance(value, str):
            return parse_breakpoints(value)
        return value

    @field_validator("breakpoints")
    @classmethod
    def _check_breakpoints(cls, value):
        if not value:
            raise ValueError("schedule needs at least one breakpoint")
        progress = [t for t, _ in value]
        if progress[0] != 0.0:
            raise ValueError("first breakpoint must be at progress 0")
        if any(b <= a for a, b in zip(progress, progress[1:])):
            raise ValueError("breakpoint progress must be strictly increasing")
        if progress[-1] > 1.0:
            raise ValueError("breakpoint progress must lie in [0, 1]")
        if any(e < 0 for _, e in value):
            raise ValueError("epsilon must be nonnegative at every breakpoint")
        if value[-1][1] != 0.0:
            raise ValueError("last breakpoint must bring epsilon to 0")
        return value

    @classmethod
    def preset(cls, name: str) -> "ViscositySchedule":
        if name not in SCHEDULE_PRESETS:
            raise ValueError(
                f"unknown schedule preset {name!r}; choose from {sorted(SCHEDULE_PRESETS)}"
            )
        return cls(name=name, **SCHEDULE_PRESETS[name])

    def scaled(self, c: float) -> "ViscositySchedule":
        return self.model_copy(
            update=dict(breakpoints=[(t, c * e) for t, e in self.breakpoints])
        )

    def is_zero(self) -> bool:
        return all(e == 0.0 for _, e in self.breakpoints)

    def label(self) -> str:
        if self.name:
            return self.name
        return ", ".join(f"{t:g}:{e:g}" for t, e in self.breakpoints)


class AdamConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    beta1: float = Field(default=0.9, gt=0, lt=1)
    beta2: float = Field(default=0.999, gt=0, lt=1)
    eps_hat: float = Field(default=1e-8, gt=0)


class TrainConfig(BaseModel):
    iterations: int = Field(default=10_000, gt=0)
    learning_rate: float = Field(default=1e-4, gt=0)
    weights: LossWeights = Field(default_factory=LossWeights)
    schedule: ViscositySchedule = Field(default_factory=ViscositySchedule)
    viscous: bool = True
    arch: Architecture = Field(default_factory=Architecture)
    init: Literal["mfgi", "geometric"] = "mfgi"
    sphere_scale: float = Field(default=1.6, gt=0)
    perturb: float = Field(default=0.1, ge=0)
    n_surface: int = Field(default=2_000, gt=0)
    n_domain: int = Field(default=2_000, gt=0)
    seed: int = 0
    log_every: int = Field(default=10, gt=0)
    checkpoint_fraction: float = Field(default=0.1, gt=0, le=1)
    adam: AdamConfig = Field(default_factory=AdamConfig)
    record_wall_time: bool = True

    @field_validator("schedule", mode="before")
    @classmethod
    def _schedule_by_name(cls, value):
        if isinstance(value, str) and ":" not in value:
            return ViscositySchedule.preset(value)
        if isinstance(value, str):
            return ViscositySchedule(breakpoints=value)
        return value

    def checkpoint_iterations(self) -> list[int]:
        """Iterations (1-based, after the update) at which snapshots are kept"""
        every = max(1, round(self.iterations * self.checkpoint_fraction))
        marks = list(range(every, self.iterations + 1, every))
        if not marks or marks[-1] != self.iterations:
            marks.append(self.iterations)
        return marks


TRAIN_PRESETS: dict[str, dict] = {
    "desk": dict(),
    "srb": dict(
        arch=dict(hidden_layers=5, width=128),
        n_surface=15_000,
        n_domain=15_000,
        iterations=10_000,
        learning_rate=1e-4,
        weights=dict(alpha_m=3000, alpha_nm=100, alpha_e=50),
        schedule="baseline",
    ),
    "shapenet": dict(
        arch=dict(hidden_layers=4, width=256),
        n_surface=15_000,
        n_domain=15_000,
        iterations=10_000,
        learning_rate=5e-5,
        weights=dict(alpha_m=5000, alpha_nm=100, alpha_e=50),
        schedule="shapenet",
    ),
    "scene": dict(
        arch=dict(hidden_layers=8, width=512),
        n_surface=15_000,
        n_domain=15_000,
        iterations=100_000,
        learning_rate=8e-6,
        weights=dict(alpha_m=5000, alpha_nm=100, alpha_e=50),
        schedule="scene",
    ),
}


class ShapeSpec(BaseModel):
    kind: Literal["circle", "sphere", "torus", "mandelbrot_boundary"] = "circle"
    radius: float = Field(default=0.5, gt=0)
    center: tuple[float, ...] | None = None
    major_radius: float = Field(default=0.35, gt=0)
    minor_radius: float = Field(default=0.15, gt=0)
    max_iter: int = Field(default=500, gt=0)
    bracket_width: float = Field(default=1e-6, gt=0)
    ray_origin: tuple[float, float] = (-0.2, 0.0)
    ray_reach: float = Field(default=2.5, gt=0)

    @model_validator(mode="after")
    def _check_torus(self):
        if self.kind == "torus" and self.minor_radius >= self.major_radius:
            raise ValueError("torus needs minor_radius < major_radius")
        return self

    @property
    def dim(self) -> int:
        return 3 if self.kind in ("sphere", "torus") else 2


class FlowConfig(BaseModel):
    n: int = Field(default=48, ge=8)
    epsilon: float = Field(default=0.3, ge=0)
    p: Literal[1, 2] = 1
    kappa_e: Literal[-1, 1] = 1
    T: float = Field(default=0.05, gt=0)
    dt: float | None = Field(default=None, gt=0)
    amplitude: float = Field(default=1e-3, ge=0)
    shell: float = Field(default=16.0, gt=0)
    delta: float = Field(default=1e-8, gt=0)
    record_every: int = Field(default=10, gt=0)
    seed: int = 0


class RunManifest(BaseModel):
    command: str
    config_path: str | None = None
    seed: int | None = None
    git_describe: str = "unknown"
    out_dir: str
    input_hashes: dict[str, str] = Field(default_factory=dict)
    exit_code: int | None = None
    started_at: datetime.datetime = Field(default_factory=datetime.datetime.now)
    finished_at: datetime.datetime | None = None


class MetricsReport(BaseModel):
    name: str = ""
    chamfer: float = Field(ge=0)
    hausdorff: float = Field(ge=0)
    squared_chamfer: float = Field(ge=0)
    iou: float | None = Field(default=None, ge=0, le=1)

    def to_row(self) -> dict:
        """Row keyed by the column names used in reconstruction tables"""
        return {
            "name": self.name,
            "d_C": self.chamfer,
            "d_H": self.hausdorff,
            "squared_chamfer": self.squared_chamfer,
            "iou": self.iou,
        }


NOT_ESTIMATED = "not estimated"


class BoundDiagnostics(BaseModel):
    iteration: int
    linf_error: float = Field(ge=0)
    sqrt_Lm: float = Field(ge=0)
    sqrt_Leik: float = Field(ge=0)
    n_surface: int
    n_domain: int
    beta_hat: float
    constants: dict[str, str] = Field(
        default_factory=lambda: {
            name: NOT_ESTIMATED
            for name in ("M_theta", "C_theta", "C_Omega", "C_prime_Omega", "C_g")
        }
    )

    @property
    def loss_bound(self) -> float:
        return self.sqrt_Lm + self.sqrt_Leik


class LemmaReport(BaseModel):
    lemma: Literal["boundary", "slowness"]
    lhs: float
    rhs: float
    slack: float
    passed: bool
    extras: dict[str, float] = Field(default_factory=dict)


class ModeSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    omega: tuple[int, int]
    kappa_e: Literal[-1, 1] = 1
    epsilon: float = Field(default=0.0, ge=0)

    @field_validator("omega")
    @classmethod
    def _nonzero(cls, value):
        if value == (0, 0):
            raise ValueError("growth rates are defined for nonzero wavevectors only")
        return value
