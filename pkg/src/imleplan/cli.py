"""Command-line entry point: ``imleplan datagen|train|plan|bench``.

Exit codes: 0 success, 1 I/O, 2 usage, 3 training divergence, 4 shape mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .costs import CostConfig
from .diffusion import DDPM_MAGIC, denoiser_dims_for_dataset, load_denoiser, save_denoiser, train_ddpm
from .exceptions import (
    CheckpointError,
    ConfigurationError,
    DatasetFormatError,
    DimensionError,
    NumericError,
    TimerResolutionError,
    TrainingDivergedError,
)
from .generator import CHECKPOINT_MAGIC, load_checkpoint, round_to_float32, save_checkpoint
from .imle import TrainConfig, dims_for_dataset, format_epoch_line, train
from .metrics import MIN_TRIALS, bench_csv, collision_rate, jerk, metrics_csv, sampling_frequency
from .planners import (
    DiffusionProposal,
    GaussianAroundPrevious,
    IMLEProposal,
    MPPIConfig,
    StraightLine,
    plan_once,
    receding_horizon_run,
)
from .simdata import (
    AugmentationSpec,
    Scene,
    augment,
    generate_bimodal_dataset,
    generate_navigation_dataset,
    load_raw_trajectories,
    load_scenes,
    make_crossing_scenes,
    obstacle_track,
)
from .trajectory import Context, load_dataset, save_dataset

log = logging.getLogger("imleplan")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DIVERGED, EXIT_SHAPE = 0, 1, 2, 3, 4

REQUIRED_KEYS = ("latent_dim", "hidden", "m", "K", "L", "eta", "batch", "minibatch", "weighting", "beta_w", "seed")
OPTIONAL_KEYS = {
    "optimizer": "sgd",
    "film_hidden": 32,
    "position_scale": 4.0,
    "diffusion_steps": 50,
    "time_dim": 16,
}


class UsageError(Exception):
    pass


def load_config(path) -> dict:
    """Flat JSON training config; missing or unknown keys are usage errors."""
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a flat JSON object")
    missing = [k for k in REQUIRED_KEYS if k not in cfg]
    if missing:
        raise UsageError(f"config is missing required key(s): {', '.join(missing)}")
    unknown = sorted(set(cfg) - set(REQUIRED_KEYS) - set(OPTIONAL_KEYS))
    if unknown:
        raise UsageError(f"config has unknown key(s): {', '.join(unknown)}")
    for k, v in cfg.items():
        if isinstance(v, (dict, list)) and k != "hidden":
            raise UsageError(f"config key {k!r} must be a scalar")
    out = dict(OPTIONAL_KEYS)
    out.update(cfg)
    hidden = out["hidden"]
    out["hidden"] = tuple(hidden) if isinstance(hidden, list) else (int(hidden),)
    return out


# datagen ------------------------------------------------------------------

def cmd_datagen(args) -> int:
    if args.kind == "raw":
        if not args.input:
            raise UsageError("--kind raw needs --in <raw file>")
        ds = load_raw_trajectories(args.input, args.horizon, args.dt, seconds_per_frame=args.seconds_per_frame)
    elif args.kind == "navigation":
        ds = generate_navigation_dataset(args.n, args.horizon, args.dt, args.seed)
    else:
        ds = generate_bimodal_dataset(args.n, args.horizon, args.dt, args.seed)
    if args.augment:
        try:
            spec = AugmentationSpec.parse(args.augment)
        except ValueError as exc:
            raise UsageError(f"bad --augment spec: {exc}") from exc
        ds = augment(ds, spec)
    save_dataset(ds, args.out)
    print(f"samples={len(ds)}")
    return EXIT_OK


# train --------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(args.data)
    if args.model == "imle":
        try:
            tc = TrainConfig(
                sample_factor=cfg["m"], epochs=cfg["K"], inner_steps=cfg["L"], step_size=cfg["eta"],
                batch_size=cfg["batch"], minibatch_size=cfg["minibatch"], beta_w=cfg["beta_w"],
                weighting=cfg["weighting"], optimizer=cfg["optimizer"], seed=cfg["seed"],
            )
        except ConfigurationError as exc:
            raise UsageError(str(exc)) from exc
        dims = dims_for_dataset(ds, cfg["latent_dim"], cfg["hidden"], cfg["film_hidden"], cfg["position_scale"])
        last = {}

        def report(epoch, loss, wall_ms):
            last["loss"] = loss
            log.info(format_epoch_line(epoch, loss, wall_ms))

        params = round_to_float32(train(ds, tc, report, dims=dims))
        save_checkpoint(params, args.out)
        log.info(f"final_loss={last['loss']:.9g}")
    else:
        dims = denoiser_dims_for_dataset(ds, cfg["hidden"], cfg["film_hidden"], cfg["position_scale"],
                                         cfg["diffusion_steps"], cfg["time_dim"])
        steps = cfg["K"] * cfg["L"]

        def report(step, loss):
            if step % max(1, cfg["L"]) == 0:
                log.info(f"step={step} ddpm_loss={loss:.9g}")

        params = train_ddpm(ds, dims.schedule(), steps, cfg["eta"], cfg["seed"], dims=dims,
                            batch_size=cfg["minibatch"], optimizer=cfg["optimizer"], reporter=report)
        save_denoiser(round_to_float32(params), args.out)
    log.info(f"wrote {args.out}")
    return EXIT_OK


# plan ---------------------------------------------------------------------

def _checkpoint_magic(path) -> str:
    with open(path, "rb") as fh:
        return fh.readline().split(b" ", 1)[0].decode("ascii", "replace")


def load_any_checkpoint(path):
    magic = _checkpoint_magic(path)
    if magic == CHECKPOINT_MAGIC:
        return load_checkpoint(path)
    if magic == DDPM_MAGIC:
        return load_denoiser(path)
    raise CheckpointError(f"{path}: not an IMLE or DDPM checkpoint")


def _make_source(proposal: str, params, cost_cfg, horizon: int, dt: float):
    if proposal == "line":
        return StraightLine(horizon=horizon, dt=dt)
    if proposal == "gauss":
        return GaussianAroundPrevious(horizon=horizon, dt=dt)
    if params is None:
        raise UsageError(f"--proposal {proposal} needs --ckpt")
    d = params.dims
    if d.state_dim != 2 or d.goal_dim != 2:
        raise DimensionError(f"checkpoint expects state_dim={d.state_dim} goal_dim={d.goal_dim}; scenes are planar (2, 2)")
    if proposal == "imle":
        if _is_ddpm(params):
            raise DimensionError("--proposal imle needs an IMLE checkpoint")
        return IMLEProposal(params, align_goal=True)
    if not _is_ddpm(params):
        raise DimensionError("--proposal ddpm needs a DDPM checkpoint")
    return DiffusionProposal(params, cost_cfg)


def _is_ddpm(params) -> bool:
    return hasattr(params.dims, "steps")


def _load_scenes(spec: str, kind: str, seed: int) -> list:
    if spec.isdigit():
        n = int(spec)
        if kind == "empty":
            return [Scene(np.zeros(2), np.array([8.0, 0.0]), duration=30) for _ in range(n)]
        return make_crossing_scenes(n, seed)
    return load_scenes(spec)


def _run_scene(job):
    scene, idx, seed, proposal, ckpt, mode, safety_radius, mppi = job
    params = load_any_checkpoint(ckpt) if ckpt else None
    cost_cfg = CostConfig(safety_radius=safety_radius)
    src = _make_source(proposal, params, cost_cfg, params.dims.horizon if params else 20,
                       params.dims.dt if params else scene.dt)
    ep = receding_horizon_run(scene, src, mode, mppi, cost_cfg, np.random.default_rng([seed, idx]))
    return ep


def cmd_plan(args) -> int:
    scenes = _load_scenes(args.scenes, args.scene_kind, args.seed)
    mppi = MPPIConfig(args.temperature, args.perturbations, args.sigma, args.candidates)
    if args.ckpt:
        params = load_any_checkpoint(args.ckpt)
        _make_source(args.proposal, params, CostConfig(safety_radius=args.safety_radius), 20, 0.4)
    elif args.proposal in ("imle", "ddpm"):
        raise UsageError(f"--proposal {args.proposal} needs --ckpt")
    jobs = [(s, i, args.seed, args.proposal, args.ckpt, args.mode, args.safety_radius, mppi)
            for i, s in enumerate(scenes)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            episodes = list(pool.map(_run_scene, jobs))
    else:
        episodes = [_run_scene(j) for j in jobs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, ep in enumerate(episodes):
        (out / f"episode_{i:04d}.log").write_text(ep.to_text(args.radius))
        if ep.status == "error":
            log.warning(f"scene {i}: {ep.error}")
    (out / "metrics.csv").write_text(metrics_csv(episodes, args.radius))
    jerks = [jerk(e.path, e.scene.dt) for e in episodes if len(e.path) >= 4]
    log.info(
        f"scenes={len(episodes)} collision_rate={collision_rate(episodes, radius=args.radius):.4f} "
        f"mean_jerk={np.mean(jerks) if jerks else float('nan'):.4f}"
    )
    return EXIT_OK


# bench --------------------------------------------------------------------

def bench_closure(src, mode: str, mppi: MPPIConfig, cost_cfg: CostConfig, seed: int):
    """Plan call on a fixed crossing context, timed with the generator/guidance split."""
    scene = make_crossing_scenes(1, seed)[0]
    ctx = Context(scene.robot_start, scene.goal, scene.obstacle_positions[:, None, :])
    forecast = obstacle_track(scene, src.horizon)
    rng = np.random.default_rng(seed)

    def plan(batch, stopwatch):
        cfg = MPPIConfig(mppi.temperature, mppi.n_perturbations, mppi.sigma, batch)
        plan_once(ctx, forecast, src, mode, cfg, cost_cfg, rng, None, stopwatch)

    return plan


def cmd_bench(args) -> int:
    if args.trials < MIN_TRIALS:
        raise UsageError(f"--trials must be >= {MIN_TRIALS}")
    cost_cfg = CostConfig()
    mppi = MPPIConfig()
    results = []
    for name, path, proposal in (("imle", args.ckpt_imle, "imle"), ("ddpm", args.ckpt_ddpm, "ddpm")):
        params = load_any_checkpoint(path)
        src = _make_source(proposal, params, cost_cfg, params.dims.horizon, params.dims.dt)
        closure = bench_closure(src, args.mode, mppi, cost_cfg, args.seed)
        res = sampling_frequency(closure, args.batch, args.trials, name=name)
        log.info(f"{name}: median_ms={res.median_ms:.3f} gen_ms={res.gen_ms:.3f} "
                 f"guidance_ms={res.guidance_ms:.3f} hz={res.hz:.2f}")
        results.append(res)
    Path(args.out).write_text(bench_csv(results))
    return EXIT_OK


# parser -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="imleplan", description="IMLE trajectory generation and sampling-based planning")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("datagen", help="write an IMLE-DS v1 dataset")
    d.add_argument("--kind", choices=("bimodal", "raw", "navigation"), required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--in", dest="input")
    d.add_argument("--n", type=int, default=200)
    d.add_argument("--horizon", type=int, default=20)
    d.add_argument("--dt", type=float, default=0.4)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--augment", help='e.g. "t=0:0;1:0 r=0,0.5 w=3"')
    d.add_argument("--seconds-per-frame", type=float, help="raw files only; inferred from frame spacing if absent")
    d.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train", help="train an IMLE generator or DDPM baseline")
    t.add_argument("--model", choices=("imle", "ddpm"), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    pl = sub.add_parser("plan", help="closed-loop receding-horizon evaluation")
    pl.add_argument("--ckpt")
    pl.add_argument("--scenes", required=True, help="scene count or JSON scene file")
    pl.add_argument("--scene-kind", choices=("crossing", "empty"), default="crossing")
    pl.add_argument("--mode", choices=("score_rank", "mppi"), default="mppi")
    pl.add_argument("--proposal", choices=("imle", "line", "gauss", "ddpm"), default="imle")
    pl.add_argument("--radius", type=float, default=0.5, help="collision radius for the metrics")
    pl.add_argument("--safety-radius", type=float, default=CostConfig.safety_radius,
                    help="CBF radius used by the planner's cost")
    pl.add_argument("--out", required=True)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--jobs", type=int, default=1)
    pl.add_argument("--temperature", type=float, default=0.5)
    pl.add_argument("--perturbations", type=int, default=32)
    pl.add_argument("--sigma", type=float, default=0.1)
    pl.add_argument("--candidates", type=int, default=64)
    pl.set_defaults(func=cmd_plan)

    b = sub.add_parser("bench", help="median per-plan latency of IMLE vs DDPM")
    b.add_argument("--ckpt-imle", required=True)
    b.add_argument("--ckpt-ddpm", required=True)
    b.add_argument("--batch", type=int, default=64)
    b.add_argument("--trials", type=int, default=50)
    b.add_argument("--out", required=True)
    b.add_argument("--mode", choices=("score_rank", "mppi"), default="score_rank")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.DEBUG)
        return args.func(args)
    except UsageError as exc:
        log.error(f"usage error: {exc}")
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        log.error(f"training diverged: {exc}")
        return EXIT_DIVERGED
    except DimensionError as exc:
        log.error(f"shape mismatch: {exc}")
        return EXIT_SHAPE
    except (OSError, DatasetFormatError, CheckpointError) as exc:
        log.error(f"I/O error: {exc}")
        return EXIT_IO
    except (ConfigurationError, NumericError, ValueError, TimerResolutionError) as exc:
        log.error(f"usage error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
