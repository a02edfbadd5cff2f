"""Sampling-based MPC: proposal sources, score-ranked selection, MPPI
refinement over state trajectories and the closed-loop receding-horizon driver."""

from __future__ import annotations

import json
import math
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .costs import CostConfig, cost_gradient, total_cost
from .diffusion import reverse_sample
from .exceptions import ConfigurationError, DimensionError
from .generator import encode_contexts, forward_batch
from .metrics import episode_collided, goal_error, jerk, smoothness
from .simdata import Scene, obstacle_track, step_scene
from .trajectory import Context, Trajectory
from .validation import check_rng

GOAL_TOLERANCE = 0.2
PLAN_MODES = ("score_rank", "mppi")


def _section(timer, name):
    return timer(name) if timer is not None else nullcontext()


# proposal sources ---------------------------------------------------------

class ProposalSource:
    """Maps a context to a ``(count, H, D)`` batch of candidate plans.

    The first state of every candidate equals ``context.current_state``.
    """

    horizon: int
    dt: float

    def propose(self, context: Context, count: int, rng, *, previous=None, forecast=None, timer=None):
        raise NotImplementedError


@dataclass
class StraightLine(ProposalSource):
    """Constant-speed line toward the goal, clamped once the goal is reached."""

    speed: float = 1.05
    horizon: int = 20
    dt: float = 0.4

    def line(self, context: Context) -> np.ndarray:
        start = context.current_state[:2]
        delta = context.goal[:2] - start
        dist = float(np.linalg.norm(delta))
        direction = delta / dist if dist > 0 else np.zeros(2)
        s = np.minimum(np.arange(self.horizon) * self.speed * self.dt, dist)
        pts = start + s[:, None] * direction
        out = np.repeat(context.current_state[None], self.horizon, axis=0).astype(np.float64)
        out[:, :2] = pts
        return out

    def propose(self, context, count, rng, *, previous=None, forecast=None, timer=None):
        with _section(timer, "generator"):
            return np.repeat(self.line(context)[None], count, axis=0)


@dataclass
class GaussianAroundPrevious(ProposalSource):
    """Previous plan shifted one step (last state held) plus i.i.d. Gaussian noise.

    Without a previous plan the straight line to the goal is perturbed instead.
    """

    sigma: float = 0.2
    speed: float = 1.05
    horizon: int = 20
    dt: float = 0.4

    def propose(self, context, count, rng, *, previous=None, forecast=None, timer=None):
        with _section(timer, "generator"):
            rng = check_rng(rng)
            if previous is None:
                base = StraightLine(self.speed, self.horizon, self.dt).line(context)
            else:
                prev = np.asarray(previous, dtype=np.float64)
                base = np.concatenate([prev[1:], prev[-1:]], axis=0)
            out = base[None] + rng.normal(0.0, self.sigma, size=(count,) + base.shape)
            out[:, 0, : context.current_state.size] = context.current_state
            return out


class IMLEProposal(ProposalSource):
    """Fresh latent code per candidate through a trained generator.

    With ``align_goal`` the context is rotated about the robot so the goal
    lies on +x before generation, and the plans are rotated back; the
    generator then only needs to cover goal-aligned data.
    """

    def __init__(self, params, align_goal: bool = False):
        self.params = params
        self.align_goal = align_goal
        self.horizon = params.dims.horizon
        self.dt = params.dims.dt
        if align_goal and (params.dims.state_dim != 2 or params.dims.out_dim != 2):
            raise DimensionError("goal alignment needs a position-only model")

    def _frame(self, context: Context):
        pos = context.current_state[:2]
        delta = context.goal[:2] - pos
        theta = math.atan2(delta[1], delta[0]) if np.any(delta) else 0.0
        c, s = math.cos(theta), math.sin(theta)
        return pos, np.array([[c, -s], [s, c]])

    def propose(self, context, count, rng, *, previous=None, forecast=None, timer=None):
        rng = check_rng(rng)
        with _section(timer, "generator"):
            d = self.params.dims
            if self.align_goal:
                pos, R = self._frame(context)
                hist = context.obstacle_history
                local = Context(
                    np.zeros(2),
                    (context.goal[:2] - pos) @ R,
                    ((hist.reshape(-1, 2) - pos) @ R).reshape(hist.shape) if hist.size else hist,
                )
            else:
                local = context
            C, states = encode_contexts([local], d)
            Z = rng.standard_normal((count, d.latent_dim))
            out = forward_batch(self.params, Z, np.repeat(C, count, axis=0), np.repeat(states, count, axis=0))
            if self.align_goal:
                out = out @ R.T + pos
                out[:, 0] = context.current_state
            return out


class DiffusionProposal(ProposalSource):
    """DDPM reverse sampling with analytic cost guidance (negative cost gradient)."""

    def __init__(self, params, cost_cfg: Optional[CostConfig] = None, guidance_scale: float = 1.0,
                 guided: bool = True):
        self.params = params
        self.cost_cfg = cost_cfg or CostConfig()
        self.guidance_scale = guidance_scale
        self.guided = guided
        self.horizon = params.dims.horizon
        self.dt = params.dims.dt
        self.schedule = params.dims.schedule()

    def propose(self, context, count, rng, *, previous=None, forecast=None, timer=None):
        guidance = None
        if self.guided:
            fc = np.zeros((0, self.horizon, 2)) if forecast is None else forecast
            goal = context.goal[:2]

            def guidance(trajs, t):
                g = np.zeros_like(trajs)
                g[..., :2] = -cost_gradient(trajs, fc, goal, previous, self.cost_cfg)
                return g

        return reverse_sample(self.params, context, self.schedule, rng, guidance, n_samples=count,
                              guidance_scale=self.guidance_scale, timer=timer)


def sample_candidates(src: ProposalSource, c: Context, count: int, rng=None, **kwargs) -> list:
    """``count`` candidate trajectories from ``src``; deterministic given ``rng``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    arr = src.propose(c, count, check_rng(rng), **kwargs)
    sd = c.current_state.size
    return [Trajectory.from_values(a, sd, src.dt) for a in arr]


# selection ----------------------------------------------------------------

def score_rank_select(candidates: Sequence, reward: Callable):
    """Index and trajectory of the highest reward; ties go to the lowest index."""
    if len(candidates) == 0:
        raise ValueError("no candidates to rank")
    scores = np.array([float(reward(c)) for c in candidates])
    idx = int(np.argmax(scores))
    return idx, candidates[idx]


@dataclass(frozen=True)
class MPPIConfig:
    temperature: float = 0.5
    n_perturbations: int = 32
    sigma: float = 0.1
    n_candidates: int = 64

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError("temperature must be > 0")
        if self.n_perturbations < 0 or self.n_candidates < 1:
            raise ConfigurationError("need n_perturbations >= 0 and n_candidates >= 1")
        if not self.sigma >= 0:
            raise ConfigurationError("sigma must be >= 0")


def mppi_weights(costs, temperature: float) -> np.ndarray:
    """Softmax of ``-(c - min c) / temperature``.

    ``temperature = 0`` is the zero-temperature limit, taken as one-hot on
    the first minimum; an underflowing softmax falls back to the same.
    """
    c = np.asarray(costs, dtype=np.float64).ravel()
    if c.size == 0:
        raise ValueError("empty cost vector")
    if not np.all(np.isfinite(c)):
        raise ValueError("costs must be finite")
    if not temperature >= 0:
        raise ConfigurationError("temperature must be >= 0")
    if temperature > 0:
        w = np.exp(-(c - c.min()) / temperature)
        return w / w.sum()
    w = np.zeros_like(c)
    w[int(np.argmin(c))] = 1.0
    return w


def _costs(trajs, forecast, goal, previous, cost_cfg, timer=None):
    with _section(timer, "guidance"):
        total, parts = total_cost(np.asarray(trajs)[..., :2], forecast, goal, previous, cost_cfg)
    return np.atleast_1d(total), parts


def mppi_step(proposals, forecast, goal, previous_plan, cfg: MPPIConfig, cost_cfg: CostConfig, rng=None,
              timer=None) -> np.ndarray:
    """One MPPI refinement around the lowest-cost proposal, ``(H, D)``.

    Perturbations are i.i.d. Gaussian on the x/y channels of every state but
    the first; the result is ``nominal + sum_k w_k delta_k`` with the
    nominal's own offset being zero, so the first state stays pinned.
    """
    rng = check_rng(rng)
    props = np.asarray([p.values if isinstance(p, Trajectory) else p for p in proposals], dtype=np.float64)
    if props.ndim != 3 or props.shape[0] == 0:
        raise ValueError("need a nonempty (B, H, D) batch of proposals")
    prev = None if previous_plan is None else np.asarray(previous_plan, dtype=np.float64)[..., :2]
    costs, _ = _costs(props, forecast, goal, prev, cost_cfg, timer)
    nominal = props[int(np.argmin(costs))]
    P = cfg.n_perturbations
    if P == 0:
        return nominal.copy()
    H = nominal.shape[0]
    deltas = np.zeros((P + 1, H, nominal.shape[1]))
    deltas[1:, 1:, :2] = rng.normal(0.0, cfg.sigma, size=(P, H - 1, 2))
    pert_costs, _ = _costs(nominal[None] + deltas, forecast, goal, prev, cost_cfg, timer)
    w = mppi_weights(pert_costs, cfg.temperature)
    return nominal + np.tensordot(w, deltas, axes=1)


# closed loop --------------------------------------------------------------

@dataclass
class StepRecord:
    t: int
    position: np.ndarray
    cost: float
    cbf: float
    clf: float
    dev: float
    plan_ms: float
    plan: np.ndarray

    def line(self) -> str:
        return (
            f"t={self.t} x={self.position[0]:.6f} y={self.position[1]:.6f} cost={self.cost:.6f} "
            f"cbf={self.cbf:.6f} clf={self.clf:.6f} dev={self.dev:.6f} plan_ms={self.plan_ms:.3f}"
        )


@dataclass
class Episode:
    """Executed robot path (start included) and one record per planning step."""

    scene: Scene
    positions: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    status: str = "running"
    error: Optional[str] = None

    @property
    def path(self) -> np.ndarray:
        return np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)

    def log_lines(self) -> list:
        return [s.line() for s in self.steps]

    def summary(self, radius: float) -> dict:
        path = self.path
        dt = self.scene.dt
        return {
            "status": self.status,
            "steps": len(self.steps),
            "collision": bool(episode_collided(self, radius)),
            "goal_error": goal_error(path, self.scene.goal),
            "smoothness": smoothness(path, dt),
            "jerk": jerk(path, dt) if len(path) >= 4 else None,
            "error": self.error,
        }

    def to_text(self, radius: float) -> str:
        lines = self.log_lines() + [json.dumps(self.summary(radius), sort_keys=True)]
        return "\n".join(lines) + "\n"


def shift_plan(previous, current_state, dim: int) -> np.ndarray:
    """Previous plan advanced one step with the last state held and the first re-pinned."""
    prev = np.asarray(previous, dtype=np.float64)
    out = np.zeros((prev.shape[0], dim))
    k = min(dim, prev.shape[1])
    out[:, :k] = np.concatenate([prev[1:, :k], prev[-1:, :k]])
    out[0, : current_state.size] = current_state
    return out


def plan_once(context: Context, forecast, src: ProposalSource, mode: str, mppi_cfg: MPPIConfig,
              cost_cfg: CostConfig, rng, previous=None, timer=None, warm_start: bool = True) -> np.ndarray:
    """One planning call: candidates, then score-ranked pick or MPPI refinement.

    With ``warm_start`` the previous plan, shifted by the executed step,
    joins the candidate set.
    """
    if mode not in PLAN_MODES:
        raise ConfigurationError(f"mode must be one of {PLAN_MODES}")
    cands = src.propose(context, mppi_cfg.n_candidates, rng, previous=previous, forecast=forecast, timer=timer)
    if warm_start and previous is not None:
        cands = np.concatenate([cands, shift_plan(previous, context.current_state, cands.shape[2])[None]])
    goal = context.goal[:2]
    prev = None if previous is None else np.asarray(previous)[..., :2]
    if mode == "score_rank":
        costs, _ = _costs(cands, forecast, goal, prev, cost_cfg, timer)
        return cands[int(np.argmin(costs))].copy()
    return mppi_step(cands, forecast, goal, previous, mppi_cfg, cost_cfg, rng, timer)


def receding_horizon_run(
    scene: Scene,
    src: ProposalSource,
    mode: str = "mppi",
    mppi_cfg: Optional[MPPIConfig] = None,
    cost_cfg: Optional[CostConfig] = None,
    rng=None,
    *,
    goal_tolerance: float = GOAL_TOLERANCE,
    clock=time.perf_counter,
) -> Episode:
    """Replan every step and execute the plan's second state (perfect tracking).

    The context holds the robot position, the goal and the current
    obstacle positions; costs use a constant-velocity forecast. Stops at the
    goal or after ``scene.duration`` steps. Planner exceptions end the
    episode with ``status="error"`` and a partial log.
    """
    mppi_cfg = mppi_cfg or MPPIConfig()
    cost_cfg = cost_cfg or CostConfig()
    rng = check_rng(rng)
    H = src.horizon
    ep = Episode(scene)
    state = scene.robot_start.copy()
    ep.positions.append(state.copy())
    current, previous = scene, None
    for k in range(scene.duration):
        if np.linalg.norm(state - scene.goal) <= goal_tolerance:
            ep.status = "goal"
            return ep
        ctx = Context(state, scene.goal, current.obstacle_positions[:, None, :])
        forecast = obstacle_track(current, H)
        try:
            t0 = clock()
            plan = plan_once(ctx, forecast, src, mode, mppi_cfg, cost_cfg, rng, previous)
            plan_ms = (clock() - t0) * 1e3
            cost, parts = total_cost(plan[:, :2], forecast, scene.goal, previous, cost_cfg)
        except Exception as exc:  # partial log is the contract
            ep.status, ep.error = "error", f"{type(exc).__name__}: {exc}"
            return ep
        ep.steps.append(StepRecord(k, state.copy(), float(cost), float(parts["cbf"]), float(parts["clf"]),
                                   float(parts["dev"]), plan_ms, plan))
        state = plan[1, :2].copy()
        ep.positions.append(state.copy())
        previous = plan
        current = step_scene(current)
    ep.status = "goal" if np.linalg.norm(state - scene.goal) <= goal_tolerance else "timeout"
    return ep


class MPCPlanner(BaseEstimator):
    """Receding-horizon planner around a proposal source.

    ``fit`` is a no-op kept for pipeline compatibility; ``predict`` runs
    one episode per scene.
    """

    def __init__(self, source=None, mode="mppi", temperature=0.5, n_perturbations=32, sigma=0.1,
                 n_candidates=64, safety_radius=0.5, cbf_rate=0.2, cbf_weight=10.0, clf_weight=1.0,
                 deviation_weight=0.5, deviation_discount=0.9, random_state=0):
        self.source = source
        self.mode = mode
        self.temperature = temperature
        self.n_perturbations = n_perturbations
        self.sigma = sigma
        self.n_candidates = n_candidates
        self.safety_radius = safety_radius
        self.cbf_rate = cbf_rate
        self.cbf_weight = cbf_weight
        self.clf_weight = clf_weight
        self.deviation_weight = deviation_weight
        self.deviation_discount = deviation_discount
        self.random_state = random_state

    def _configs(self):
        mppi = MPPIConfig(self.temperature, self.n_perturbations, self.sigma, self.n_candidates)
        cost = CostConfig(self.safety_radius, self.cbf_rate, self.cbf_weight, self.clf_weight,
                          self.deviation_weight, self.deviation_discount)
        return mppi, cost

    def fit(self, X=None, y=None):
        if self.mode not in PLAN_MODES:
            raise ConfigurationError(f"mode must be one of {PLAN_MODES}")
        self._configs()
        return self

    def plan(self, context: Context, forecast, previous=None, random_state=None) -> np.ndarray:
        mppi, cost = self._configs()
        return plan_once(context, forecast, self.source or StraightLine(), self.mode, mppi, cost,
                         check_rng(random_state if random_state is not None else self.random_state), previous)

    def run(self, scene: Scene, random_state=None) -> Episode:
        mppi, cost = self._configs()
        rng = check_rng(random_state if random_state is not None else self.random_state)
        return receding_horizon_run(scene, self.source or StraightLine(), self.mode, mppi, cost, rng)

    def predict(self, scenes) -> list:
        """One episode per scene; scene ``i`` uses seed ``random_state + i``."""
        base = 0 if self.random_state is None else int(self.random_state)
        return [self.run(s, base + i) for i, s in enumerate(scenes)]
