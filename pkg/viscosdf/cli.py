"""viscosdf command line: train, extract, eval, oracle, flow, ablate.

Every invocation writes one manifest.json into its output directory and
appends the same manifest to the duckdb registry under the output root.
Exit codes: 0 success, 1 failed verification, 2 usage or config error,
3 data or file error, 4 numeric failure.
"""

import argparse
import datetime
import hashlib
import json
import logging
import subprocess
import sys
import tomllib
from pathlib import Path

import numpy as np
import polars as pl
from pydantic import ValidationError

from .database import RunDatabase, output_root, write_manifest
from .dftools import summarize_ablation
from .eikonal_oracle import (
    bound_diagnostics,
    circle_band_problem,
    fmm_solve,
    lemma_frame,
    point_source_problem,
    smooth_slowness,
    verify_lemma1,
    verify_lemma2,
)
from .errors import ConfigError, DataError, ViscoSDFError
from .experiments import (
    DEFAULT_ABLATION,
    FULL_ABLATION,
    prepare_shape,
    run_ablation,
    score_params,
)
from .extract import (
    eval_grid,
    export_mesh,
    load_mesh,
    march,
    save_grid,
    write_contour_csv,
)
from .field_net import load_params, save_params
from .flow_lab import (
    growth_exponents,
    mode_field,
    periodic_grid,
    run_flow,
    simulate_linear_flow,
    stability_report,
)
from .metrics import evaluate, metrics_frame, sample_mesh_surface, write_metrics_csv
from .models import (
    TRAIN_PRESETS,
    FlowConfig,
    RunManifest,
    ShapeSpec,
    TrainConfig,
    ViscositySchedule,
)
from .plotting import Charts, Figures, Tables
from .sampler_io import load_point_cloud, normalize, write_point_cloud
from .trainer import train

logger = logging.getLogger(__name__)

# normalize() maps every cloud into this box
NORMALIZED_HALF_WIDTH = 0.55
SHAPE_FILE = "shape.json"
CHECKPOINT = "checkpoint.vsdf"


class VerificationFailed(ViscoSDFError):
    exit_code = 1


# --- configuration ---------------------------------------------------------


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _deep_merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def train_config(args, config: dict) -> TrainConfig:
    """Preset, then the [train] and [arch] tables, then command-line flags"""
    preset = getattr(args, "preset", None) or config.get("train", {}).get("preset", "desk")
    if preset not in TRAIN_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(TRAIN_PRESETS)}")
    values = _deep_merge(TRAIN_PRESETS[preset], config.get("train", {}))
    values.pop("preset", None)
    if "arch" in config:
        values["arch"] = _deep_merge(values.get("arch", {}), config["arch"])
    if getattr(args, "iters", None) is not None:
        values["iterations"] = args.iters
    if getattr(args, "schedule", None) is not None:
        values["schedule"] = args.schedule
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    values.setdefault("record_wall_time", getattr(args, "wall_time", False))
    return TrainConfig(**values)


def shape_spec(args, config: dict) -> ShapeSpec:
    values = dict(config.get("shape", {}))
    if getattr(args, "shape", None) is not None:
        values["kind"] = args.shape
    return ShapeSpec(**values)


def flow_config(args, config: dict) -> FlowConfig:
    values = dict(config.get("flow", {}))
    for key in ("n", "epsilon", "p", "T", "dt", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    return FlowConfig(**values)


# --- run plumbing ----------------------------------------------------------


def git_describe() -> str:
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            check=False,
            cwd=Path(__file__).parent,
        )
    except OSError:
        return "unknown"
    return result.stdout.strip() or "unknown"


def sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def run_dir(args, label: str) -> Path:
    """Output directory for this invocation; refuses to reuse a non-empty one without --force"""
    out = Path(args.out) if args.out else output_root() / f"{args.command}-{label}-seed{args.seed or 0}"
    if out.exists() and not out.is_dir():
        raise DataError("output path exists and is not a directory", path=out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    args.out_dir = out
    return out


def add_input(args, path: Path) -> None:
    args.inputs.append(Path(path))


def _print_frame(df: pl.DataFrame) -> None:
    with pl.Config(tbl_rows=-1, tbl_cols=-1, float_precision=6):
        print(df)


# --- train -----------------------------------------------------------------


def cmd_train(args) -> int:
    config = load_config(args.config)
    tconfig = train_config(args, config)
    if args.cloud:
        add_input(args, args.cloud)
        cloud = normalize(load_point_cloud(args.cloud))
        label, shape_info = Path(args.cloud).stem, None
    else:
        spec = shape_spec(args, config)
        cloud, _ = prepare_shape(spec, args.points, tconfig.seed)
        label = spec.kind
        shape_info = {"spec": spec.model_dump(), "n_points": args.points, "seed": tconfig.seed}
    out = run_dir(args, label)

    params, log = train(tconfig, cloud)
    save_params(params, out / CHECKPOINT)
    for iteration, snapshot in log.checkpoints:
        save_params(snapshot, out / "checkpoints" / f"ckpt_{iteration:06d}.vsdf")
    log.write_csv(out / "log.csv")
    write_point_cloud(cloud, out / "cloud.xyz")
    (out / "config.json").write_text(tconfig.model_dump_json(indent=2))
    if shape_info is not None:
        (out / SHAPE_FILE).write_text(json.dumps(shape_info, indent=2))
    frame = log.to_frame()
    Charts.save(Charts.training_curves(frame, subtitle=label), out / "losses.html")
    Charts.save(Charts.viscosity(frame), out / "viscosity.html")

    last = log.records[-1]
    print(f"trained {label}: {tconfig.iterations} iterations, final total {last.breakdown.total:.6g}")
    print(f"outputs in {out}")
    return 0


# --- extract ---------------------------------------------------------------


def normalized_bbox(dim: int):
    half = np.full(dim, NORMALIZED_HALF_WIDTH)
    return -half, half


def cmd_extract(args) -> int:
    add_input(args, args.checkpoint)
    params = load_params(args.checkpoint)
    out = run_dir(args, Path(args.checkpoint).stem)
    dim = params.arch.input_dim
    grid = eval_grid(params, normalized_bbox(dim), args.res, workers=args.workers)
    mesh = march(grid, args.iso)
    save_grid(grid, out / "field.vgrd")
    if dim == 2:
        write_contour_csv(mesh, out / "contour.csv")
        export_mesh(mesh, out / "contour.obj")
        Figures.field_contour(grid, mesh, out / "contour.png", title=Path(args.checkpoint).stem)
    else:
        export_mesh(mesh, out / f"mesh.{args.format}")
    if mesh.is_empty:
        logger.warning("zero level set of %s is empty at resolution %d", args.checkpoint, args.res)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.elements)} elements -> {out}")
    return 0


# --- eval ------------------------------------------------------------------


def _eval_points(path: Path, n: int, seed: int) -> np.ndarray:
    """Points of a cloud file, or area/length samples of a mesh file"""
    suffix = path.suffix.lower()
    if suffix == ".xyz":
        return load_point_cloud(path).points
    if suffix == ".obj":
        return sample_mesh_surface(load_mesh(path), n, seed)
    if suffix == ".ply":
        mesh = load_mesh(path)
        if len(mesh.elements):
            return sample_mesh_surface(mesh, n, seed)
        return load_point_cloud(path).points
    raise DataError(f"cannot evaluate a {suffix or 'suffix-less'} file", path=path)


def _load_run(run: Path):
    info_path = run / SHAPE_FILE
    if not info_path.exists():
        raise DataError("run directory has no shape description", path=info_path)
    info = json.loads(info_path.read_text())
    spec = ShapeSpec(**info["spec"])
    cloud, shape = prepare_shape(spec, info["n_points"], info["seed"])
    return spec, cloud, shape, info["seed"]


def cmd_eval(args) -> int:
    if args.run:
        run = Path(args.run)
        add_input(args, run / CHECKPOINT)
        params = load_params(run / CHECKPOINT)
        spec, cloud, shape, seed = _load_run(run)
        out = run_dir(args, run.name)
        report, _ = score_params(
            run.name, params, cloud, shape, spec, args.res, args.samples, seed, args.workers
        )
    else:
        if not (args.pred and args.truth):
            raise ConfigError("eval needs --run, or both --pred and --truth")
        pred_path, truth_path = Path(args.pred), Path(args.truth)
        add_input(args, pred_path)
        add_input(args, truth_path)
        pred = _eval_points(pred_path, args.samples, args.seed or 0)
        truth = _eval_points(truth_path, args.samples, args.seed or 0)
        if pred.shape[1] != truth.shape[1]:
            raise DataError(
                f"dimension mismatch: {pred.shape[1]}D prediction vs {truth.shape[1]}D truth"
            )
        out = run_dir(args, pred_path.stem)
        report = evaluate(pred_path.stem, pred, truth, workers=args.workers)

    write_metrics_csv([report], out / "metrics.csv")
    df = metrics_frame([report])
    Tables.save(Tables.metrics(df), out / "metrics.html")
    _print_frame(df)
    return 0


# --- oracle ----------------------------------------------------------------


def _oracle_settings(args, config: dict) -> dict:
    values = {"h": 0.01, "fixture": "circle", "trials": 10, "amplitude": 0.05, "slowness": 1.0}
    values.update(config.get("oracle", {}))
    for key in values:
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    return values


def _fixture(settings: dict):
    if settings["fixture"] == "circle":
        return circle_band_problem(settings["h"], f=settings["slowness"])
    if settings["fixture"] == "point":
        return point_source_problem(settings["h"], f=settings["slowness"])
    raise ConfigError(f"unknown fixture {settings['fixture']!r}")


def _exact_solution(settings: dict, points: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(points, axis=1)
    if settings["fixture"] == "circle":
        return settings["slowness"] * np.abs(r - 0.5)
    return settings["slowness"] * r


def cmd_oracle(args) -> int:
    settings = _oracle_settings(args, load_config(args.config))
    problem = _fixture(settings)
    seed = args.seed or 0

    if args.action == "solve":
        out = run_dir(args, f"solve-{settings['fixture']}")
        u = fmm_solve(problem)
        save_grid(u, out / "solution.vgrd")
        err = np.abs(u.values.ravel() - _exact_solution(settings, u.points()))
        df = pl.DataFrame(
            {"fixture": [settings["fixture"]], "h": [settings["h"]], "max_error": [float(err.max())]}
        )
        df.write_csv(out / "solve.csv")
        _print_frame(df)
        return 0

    if args.action == "bound":
        if not args.run:
            raise ConfigError("oracle bound needs --run pointing at a training run")
        run = Path(args.run)
        spec, cloud, shape, seed = _load_run(run)
        paths = sorted((run / "checkpoints").glob("ckpt_*.vsdf"))
        if not paths:
            raise DataError("run has no checkpoints", path=run / "checkpoints")
        for path in paths:
            add_input(args, path)
        checkpoints = [(int(p.stem.split("_")[1]), load_params(p)) for p in paths]
        out = run_dir(args, f"bound-{run.name}")
        series = bound_diagnostics(checkpoints, shape, cloud, args.res, seed=seed)
        series.write_csv(out / "bound.csv")
        _print_frame(series.to_frame())
        print(f"spearman rho: {series.spearman_rho}")
        return 0

    out = run_dir(args, f"{args.action}-{settings['fixture']}")
    rng = np.random.default_rng(seed)
    reports = []
    for trial in range(settings["trials"]):
        if args.action == "lemma1":
            g1 = problem.g
            noise = rng.uniform(-1.0, 1.0, size=problem.grid.shape)
            g2 = np.where(problem.boundary_mask, g1 + settings["amplitude"] * noise, 0.0)
            reports.append(verify_lemma1(problem, g1, g2))
        else:
            base = problem.with_boundary(np.zeros(problem.grid.shape))
            f2 = problem.f * smooth_slowness(problem.grid, settings["amplitude"], seed + trial)
            reports.append(verify_lemma2(base, problem.f, f2))
    df = lemma_frame(reports)
    if args.action == "lemma2":
        df = df.with_columns(
            corrected_rhs=pl.Series([r.extras["corrected_rhs"] for r in reports])
        )
    df.write_csv(out / f"{args.action}.csv")
    _print_frame(df)
    failed = sum(not r.passed for r in reports)
    if failed:
        raise VerificationFailed(f"{failed} of {len(reports)} {args.action} checks failed")
    return 0


# --- flow ------------------------------------------------------------------


def cmd_flow(args) -> int:
    config = flow_config(args, load_config(args.config))

    if args.action == "spectral":
        out = run_dir(args, f"spectral-{args.mode[0]}-{args.mode[1]}")
        omega = tuple(args.mode)
        grid = periodic_grid(config.n, mode_field(config.n, omega, 1.0))
        start = float(np.linalg.norm(grid.values))
        if start == 0:
            raise ConfigError(f"mode {omega} vanishes on a {config.n}-point grid")
        traj = simulate_linear_flow(grid, config.kappa_e, config.epsilon, config.p, config.T, config.dt)
        lam = growth_exponents(config.n, config.kappa_e, config.epsilon, config.p)[
            omega[0] % config.n, omega[1] % config.n
        ]
        measured = float(np.linalg.norm(traj.final.values)) / start
        expected = float(np.exp(lam.real * traj.times[-1]))
        rel = abs(measured - expected) / expected
        df = pl.DataFrame(
            {
                "w1": [omega[0]],
                "w2": [omega[1]],
                "exponent": [float(lam.real)],
                "measured_ratio": [measured],
                "expected_ratio": [expected],
                "rel_error": [rel],
            }
        )
        df.write_csv(out / "spectral.csv")
        _print_frame(df)
        if rel > 1e-8:
            raise VerificationFailed(f"spectral amplitude off by {rel:.3g}")
        return 0

    out = run_dir(args, f"flow-eps{config.epsilon:g}")
    traj = run_flow(config)
    traj.write_csv(out / "band_energy.csv")
    report = stability_report(traj)
    report.to_frame().write_csv(out / "stability.csv")
    Charts.save(
        Charts.band_energy(traj.to_frame(), subtitle=f"eps = {config.epsilon:g}"),
        out / "band_energy.html",
    )
    _print_frame(report.to_frame())
    return 0


# --- ablate ----------------------------------------------------------------


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    base = train_config(args, config)
    spec = shape_spec(args, config)
    if args.schedules:
        schedules = args.schedules
    else:
        schedules = FULL_ABLATION if args.full else DEFAULT_ABLATION
    for name in schedules:
        ViscositySchedule.preset(name)
    seeds = args.seeds if args.seeds else [base.seed]
    out = run_dir(args, spec.kind)

    runs = run_ablation(spec, base, schedules, seeds, args.points, args.res)
    summary = summarize_ablation(runs)
    runs.write_csv(out / "ablation.csv")
    summary.write_csv(out / "summary.csv")
    Tables.save(Tables.ablation(summary), out / "ablation.html")
    Charts.save(Charts.ablation(summary), out / "ablation_chart.html")
    if args.db is not None:
        args.db.df2db(runs, "ablation_runs")
        args.db.df2db(summary, "ablation_summary")
    _print_frame(summary)
    return 0


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default: $VISCOSDF_OUT/<command>-...)")
    common.add_argument("--force", action="store_true", help="reuse a non-empty output directory")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="viscosdf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="fit a neural SDF")
    p.add_argument("--shape", choices=["circle", "sphere", "torus", "mandelbrot_boundary"])
    p.add_argument("--cloud", type=Path, help="XYZ or PLY point cloud instead of a synthetic shape")
    p.add_argument("--points", type=int, default=2_000)
    p.add_argument("--iters", type=int)
    p.add_argument("--schedule", help="preset name or 'progress:eps, ...'")
    p.add_argument("--preset", choices=sorted(TRAIN_PRESETS))
    p.add_argument("--wall-time", action="store_true", help="record per-iteration ms in the log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", parents=[common], help="checkpoint -> contour or mesh")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--iso", type=float, default=0.0)
    p.add_argument("--format", choices=["obj", "ply"], default="obj")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", parents=[common], help="reconstruction metrics")
    p.add_argument("--run", type=Path, help="training run directory")
    p.add_argument("--pred", help="predicted cloud or mesh")
    p.add_argument("--truth", help="ground-truth cloud or mesh")
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--samples", type=int, default=30_000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", parents=[common], help="fast marching and stability checks")
    p.add_argument("action", choices=["solve", "lemma1", "lemma2", "bound"])
    p.add_argument("--fixture", choices=["circle", "point"])
    p.add_argument("--h", type=float)
    p.add_argument("--trials", type=int)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--slowness", type=float)
    p.add_argument("--run", type=Path)
    p.add_argument("--res", type=int, default=64)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("flow", parents=[common], help="gradient-flow stability experiments")
    p.add_argument("action", choices=["spectral", "nonlinear"])
    p.add_argument("--mode", type=int, nargs=2, default=[1, 0], metavar=("W1", "W2"))
    p.add_argument("--n", type=int)
    p.add_argument("--eps", dest="epsilon", type=float)
    p.add_argument("--p", type=int, choices=[1, 2])
    p.add_argument("--T", type=float)
    p.add_argument("--dt", type=float)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("ablate", parents=[common], help="viscosity schedule ablation")
    p.add_argument("--shape", choices=["circle", "sphere", "torus", "mandelbrot_boundary"])
    p.add_argument("--schedules", nargs="+")
    p.add_argument("--full", action="store_true", help="include constant and quintic decays")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--points", type=int, default=2_000)
    p.add_argument("--iters", type=int)
    p.add_argument("--preset", choices=sorted(TRAIN_PRESETS))
    p.add_argument("--res", type=int, default=128)
    p.set_defaults(func=cmd_ablate)
    return parser


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    if args.config is not None and not args.config.exists():
        parser.error(f"config file {args.config} does not exist")

    args.out_dir = None
    args.inputs = []
    args.db = None
    if args.config is not None:
        add_input(args, args.config)
    started = datetime.datetime.now()
    code = 1
    try:
        args.db = RunDatabase()
        code = args.func(args)
    except ValidationError as exc:
        logger.error("invalid configuration:\n%s", exc)
        code = 2
    except ViscoSDFError as exc:
        logger.error("%s", exc)
        code = exc.exit_code
    except ValueError as exc:
        logger.error("%s", exc)
        code = 2
    except OSError as exc:
        error = DataError(exc.strerror or str(exc), path=exc.filename)
        logger.error("%s", error)
        code = error.exit_code
    finally:
        if args.out_dir is not None:
            manifest = RunManifest(
                command=args.command,
                config_path=str(args.config) if args.config else None,
                seed=args.seed,
                git_describe=git_describe(),
                out_dir=str(args.out_dir),
                input_hashes={str(p): sha256(p) for p in args.inputs if Path(p).is_file()},
                exit_code=code,
                started_at=started,
                finished_at=datetime.datetime.now(),
            )
            write_manifest(manifest, args.out_dir, args.db)
        if args.db is not None:
            args.db.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
