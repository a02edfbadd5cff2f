"""Synthetic navigation data, augmentation, raw pedestrian ingestion and a
constant-velocity obstacle simulator."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError, DimensionError, RawParseError
from .trajectory import Context, Dataset, Trajectory, WeightedSample, compute_return

LEFT, RIGHT = 1, -1


@dataclass(frozen=True, eq=False)
class Scene:
    """Robot start/goal plus point obstacles moving at constant velocity."""

    robot_start: np.ndarray
    goal: np.ndarray
    obstacle_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    obstacle_velocities: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    duration: int = 40
    dt: float = 0.4

    def __post_init__(self):
        for name in ("robot_start", "goal"):
            v = np.array(getattr(self, name), dtype=np.float64).reshape(2)
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        pos = np.array(self.obstacle_positions, dtype=np.float64).reshape(-1, 2)
        vel = np.array(self.obstacle_velocities, dtype=np.float64).reshape(-1, 2)
        if pos.shape != vel.shape:
            raise DimensionError("one velocity per obstacle required")
        for a in (pos, vel):
            if not np.all(np.isfinite(a)):
                raise ValueError("obstacle state must be finite")
            a.setflags(write=False)
        object.__setattr__(self, "obstacle_positions", pos)
        object.__setattr__(self, "obstacle_velocities", vel)
        if self.duration < 1:
            raise ValueError("duration must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @classmethod
    def from_obstacles(cls, robot_start, goal, obstacles, duration=40, dt=0.4) -> "Scene":
        """Build from a list of ``(position, velocity)`` pairs."""
        pos = [p for p, _ in obstacles]
        vel = [v for _, v in obstacles]
        return cls(robot_start, goal, np.reshape(pos, (-1, 2)), np.reshape(vel, (-1, 2)), duration, dt)

    @property
    def n_obstacles(self) -> int:
        return self.obstacle_positions.shape[0]

    def to_dict(self) -> dict:
        return {
            "robot_start": self.robot_start.tolist(),
            "goal": self.goal.tolist(),
            "obstacles": [
                {"position": p.tolist(), "velocity": v.tolist()}
                for p, v in zip(self.obstacle_positions, self.obstacle_velocities)
            ],
            "duration": int(self.duration),
            "dt": float(self.dt),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        obstacles = [(o["position"], o["velocity"]) for o in d.get("obstacles", [])]
        return cls.from_obstacles(d["robot_start"], d["goal"], obstacles, d.get("duration", 40), d.get("dt", 0.4))


@dataclass(frozen=True)
class AugmentationSpec:
    translations: tuple = ((0.0, 0.0),)
    rotations: tuple = (0.0,)
    smoothing_window: int = 1

    def __post_init__(self):
        w = self.smoothing_window
        if int(w) != w or w < 1 or w % 2 == 0:
            raise ConfigurationError(f"smoothing_window must be an odd integer >= 1, got {w}")
        for r in self.rotations:
            if not (-math.pi < r <= math.pi):
                raise ConfigurationError(f"rotation {r} outside (-pi, pi]")
        object.__setattr__(self, "translations", tuple(tuple(map(float, t)) for t in self.translations))
        object.__setattr__(self, "rotations", tuple(float(r) for r in self.rotations))

    @classmethod
    def parse(cls, text: str) -> "AugmentationSpec":
        """Parse ``"t=dx:dy;dx:dy r=a,b w=3"`` (all parts optional)."""
        kwargs = {}
        for part in text.split():
            key, _, value = part.partition("=")
            if key == "t":
                kwargs["translations"] = tuple(
                    tuple(float(v) for v in pair.split(":")) for pair in value.split(";") if pair
                )
            elif key == "r":
                kwargs["rotations"] = tuple(float(v) for v in value.split(",") if v)
            elif key == "w":
                kwargs["smoothing_window"] = int(value)
            else:
                raise ConfigurationError(f"unknown augmentation field {key!r}")
        return cls(**kwargs)


# bimodal toy data ---------------------------------------------------------

def bimodal_nominal(horizon: int, goal_distance: float = 8.0, amplitude: float = 1.5) -> np.ndarray:
    """Left-mode nominal detour, ``(H, 2)``; the right mode mirrors ``y``."""
    s = np.linspace(0.0, 1.0, horizon)
    return np.stack([goal_distance * s, amplitude * np.sin(np.pi * s)], axis=1)


def trajectory_mode(traj) -> int:
    """``LEFT`` (+1) if the mid-trajectory point has positive ``y``, else ``RIGHT``."""
    pos = traj.positions if isinstance(traj, Trajectory) else np.asarray(traj)[..., :2]
    return LEFT if pos[pos.shape[0] // 2, 1] > 0 else RIGHT


def generate_bimodal_dataset(
    n: int,
    horizon: int = 20,
    dt: float = 0.4,
    seed: int = 0,
    *,
    goal_distance: float = 8.0,
    amplitude: float = 1.5,
    noise: float = 0.05,
) -> Dataset:
    """Trajectories from the origin to ``(goal_distance, 0)`` around a central obstacle.

    Even-indexed samples pass left (positive ``y``), odd-indexed pass right.
    Every waypoint but the start gets i.i.d. Gaussian noise of std ``noise``.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    rng = np.random.default_rng(seed)
    nominal = bimodal_nominal(horizon, goal_distance, amplitude)
    start = np.zeros(2)
    goal = np.array([goal_distance, 0.0])
    obstacle = np.array([[[goal_distance / 2.0, 0.0]]])
    ctx = Context(start, goal, obstacle)
    samples = []
    for i in range(n):
        sign = LEFT if i % 2 == 0 else RIGHT
        pts = nominal * np.array([1.0, sign])
        pts = pts + np.vstack([np.zeros((1, 2)), rng.normal(0.0, noise, size=(horizon - 1, 2))])
        samples.append(WeightedSample(Trajectory(pts, None, dt), ctx, 0.0, 1.0))
    meta = {
        "source": "bimodal",
        "seed": seed,
        "goal_distance": goal_distance,
        "amplitude": amplitude,
        "noise": noise,
    }
    return Dataset(samples, horizon, dt, meta)


def generate_navigation_dataset(
    n: int,
    horizon: int = 20,
    dt: float = 0.4,
    seed: int = 0,
    *,
    speed: float = 1.05,
    max_goal_distance: float = 10.0,
    max_amplitude: float = 2.0,
    noise: float = 0.02,
) -> Dataset:
    """Goal-reaching detours in a goal-aligned frame (start at the origin, goal on +x).

    Each sample advances along x at ``speed`` until it reaches the goal and
    then holds. One obstacle sits near the path; the trajectory bulges
    sideways around it by a random amplitude on a random side (a
    ``sin^2`` bump peaking at the obstacle's x). A fifth of the samples
    keep the obstacle well off the path and go straight.
    """
    if n < 1 or horizon < 2:
        raise ValueError("need n >= 1 and horizon >= 2")
    rng = np.random.default_rng(seed)
    t = np.arange(horizon) * dt
    samples = []
    for _ in range(n):
        d = rng.uniform(0.5, max_goal_distance)
        x = np.minimum(d, speed * t)
        reach = min(d, speed * t[-1])
        if rng.random() < 0.2 or reach < 1.5:
            ox = rng.uniform(-2.0, reach + 2.0)
            oy = rng.choice([-1.0, 1.0]) * rng.uniform(2.5, 5.0)
            y = np.zeros(horizon)
        else:
            ox = rng.uniform(0.75, reach - 0.5) if reach > 1.25 else 0.75
            oy = rng.uniform(-0.5, 0.5)
            side = rng.choice([-1.0, 1.0])
            amp = rng.uniform(0.0, max_amplitude)
            width = 2.0 * ox
            bump = np.where(x <= width, np.sin(np.pi * x / width) ** 2, 0.0)
            y = side * amp * bump
        pts = np.stack([x, y], axis=1)
        pts[1:] += rng.normal(0.0, noise, size=(horizon - 1, 2))
        ctx = Context(np.zeros(2), np.array([d, 0.0]), np.array([[[ox, oy]]]))
        samples.append(WeightedSample(Trajectory(pts, None, dt), ctx, 0.0, 1.0))
    meta = {"source": "navigation", "seed": seed, "speed": speed, "noise": noise}
    return Dataset(samples, horizon, dt, meta)


# augmentation -------------------------------------------------------------

def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average along axis 0 with edge replication."""
    values = np.asarray(values, dtype=np.float64)
    if window == 1:
        return values.copy()
    half = window // 2
    padded = np.concatenate([np.repeat(values[:1], half, axis=0), values, np.repeat(values[-1:], half, axis=0)])
    csum = np.concatenate([np.zeros((1,) + values.shape[1:]), np.cumsum(padded, axis=0)])
    return (csum[window:] - csum[:-window]) / window


def augment(ds: Dataset, spec: AugmentationSpec, reward: Optional[Callable] = None) -> Dataset:
    """Rotated/translated/smoothed copies of every sample.

    For each translation and then each rotation, the trajectory is rotated
    about its first position and translated; context positions (state, goal,
    obstacle history) get the same rigid motion. The trajectory is then
    smoothed along time with all but the first state, which stays pinned to
    the context's current state. Only the x/y channels are transformed.
    Returns are recomputed with ``reward`` when given, otherwise copied.
    """
    if spec.smoothing_window > ds.horizon:
        raise ConfigurationError(
            f"smoothing window {spec.smoothing_window} exceeds horizon {ds.horizon}"
        )
    out = []
    for sample in ds.samples:
        traj, ctx = sample.trajectory, sample.context
        anchor = traj.states[0, :2].copy()
        for shift in spec.translations:
            shift = np.asarray(shift)
            for theta in spec.rotations:
                R = _rotation(theta)

                def move(p):
                    return (np.asarray(p) - anchor) @ R.T + anchor + shift

                states = traj.states.copy()
                states[:, :2] = move(states[:, :2])
                if spec.smoothing_window > 1:
                    smoothed = moving_average(states, spec.smoothing_window)
                    smoothed[0] = states[0]
                    states = smoothed
                cur = ctx.current_state.copy()
                cur[:2] = move(cur[:2])
                goal = ctx.goal.copy()
                if goal.size >= 2:
                    goal[:2] = move(goal[:2])
                hist = ctx.obstacle_history
                hist = move(hist.reshape(-1, 2)).reshape(hist.shape) if hist.size else hist
                new_traj = Trajectory(states, traj.actions, traj.dt)
                ret = compute_return(new_traj, reward) if reward is not None else sample.return_value
                out.append(WeightedSample(new_traj, Context(cur, goal, hist), ret, sample.weight))
    meta = dict(ds.metadata)
    meta["augmented"] = (
        f"translations={len(spec.translations)} rotations={len(spec.rotations)} "
        f"window={spec.smoothing_window}"
    )
    return Dataset(out, ds.horizon, ds.dt, meta)


# raw pedestrian files -----------------------------------------------------

def _read_raw(path) -> list:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 4:
                raise RawParseError(f"{path}:{lineno}: expected 4 fields 'frame agent x y', got {len(parts)}")
            try:
                frame, agent, x, y = (float(p) for p in parts)
            except ValueError:
                raise RawParseError(f"{path}:{lineno}: non-numeric field in {text!r}") from None
            if not all(map(math.isfinite, (frame, agent, x, y))):
                raise RawParseError(f"{path}:{lineno}: non-finite value in {text!r}")
            rows.append((frame, agent, x, y))
    return rows


def window_starts(length: int, horizon: int) -> list:
    """Start indices of length-``horizon`` windows with stride ``max(1, horizon // 2)``."""
    stride = max(1, horizon // 2)
    return list(range(0, length - horizon + 1, stride))


def load_raw_trajectories(
    path,
    horizon: int,
    dt: float,
    *,
    seconds_per_frame: Optional[float] = None,
    reward: Optional[Callable] = None,
) -> Dataset:
    """Slice ``frame_id agent_id x y`` observations into fixed-horizon windows.

    Frame ids are converted to seconds with ``seconds_per_frame``; when it is
    ``None`` the median frame step across agents is taken to be ``dt``.
    Each agent track is linearly resampled to ``dt`` and cut into windows of
    ``horizon`` steps with stride ``horizon // 2``. A window's context is its
    first position, its last position as the goal, and the positions of other
    agents present at the window start (one history step each).
    """
    rows = _read_raw(path)
    tracks = defaultdict(list)
    for frame, agent, x, y in rows:
        tracks[agent].append((frame, x, y))
    for agent in tracks:
        tracks[agent].sort()
        frames = [f for f, _, _ in tracks[agent]]
        if len(set(frames)) != len(frames):
            raise RawParseError(f"{path}: agent {agent:g} has duplicate frame ids")

    if seconds_per_frame is None:
        steps = [np.diff([f for f, _, _ in tr]) for tr in tracks.values() if len(tr) > 1]
        steps = np.concatenate(steps) if steps else np.zeros(0)
        seconds_per_frame = dt / float(np.median(steps)) if steps.size else dt

    resampled = {}
    for agent, tr in sorted(tracks.items()):
        arr = np.array(tr)
        times = arr[:, 0] * seconds_per_frame
        grid = times[0] + dt * np.arange(int(math.floor((times[-1] - times[0]) / dt + 1e-9)) + 1)
        pos = np.stack([np.interp(grid, times, arr[:, 1]), np.interp(grid, times, arr[:, 2])], axis=1)
        resampled[agent] = (grid, pos)

    def position_at(agent, t):
        grid, pos = resampled[agent]
        if t < grid[0] - 1e-9 or t > grid[-1] + 1e-9:
            return None
        return np.array([np.interp(t, grid, pos[:, 0]), np.interp(t, grid, pos[:, 1])])

    samples, skipped = [], 0
    for agent, (grid, pos) in resampled.items():
        if len(grid) < horizon:
            skipped += 1
            continue
        for s in window_starts(len(grid), horizon):
            states = pos[s : s + horizon]
            t0 = grid[s]
            others = [position_at(a, t0) for a in resampled if a != agent]
            others = [p for p in others if p is not None]
            hist = np.array(others).reshape(len(others), 1, 2) if others else np.zeros((0, 0, 2))
            traj = Trajectory(states, None, dt)
            ret = compute_return(traj, reward) if reward is not None else 0.0
            samples.append(WeightedSample(traj, Context(states[0], states[-1], hist), ret, 1.0))
    meta = {"source": f"raw:{Path(path).name}", "skipped_agents": skipped, "agents": len(resampled)}
    return Dataset(samples, horizon, dt, meta)


# constant-velocity obstacles ----------------------------------------------

def constant_velocity_forecast(scene: Scene, steps: int) -> np.ndarray:
    """Predicted obstacle positions for steps ``1..steps``, shape ``(O, steps, 2)``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    t = np.arange(1, steps + 1, dtype=np.float64)[None, :, None]
    return scene.obstacle_positions[:, None, :] + t * scene.dt * scene.obstacle_velocities[:, None, :]


def obstacle_track(scene: Scene, horizon: int) -> np.ndarray:
    """Current positions followed by ``horizon - 1`` forecast steps, ``(O, horizon, 2)``."""
    now = scene.obstacle_positions[:, None, :]
    if horizon == 1:
        return now.copy()
    return np.concatenate([now, constant_velocity_forecast(scene, horizon - 1)], axis=1)


def step_scene(scene: Scene) -> Scene:
    """Advance every obstacle by one ``dt``; the robot is moved by the planner."""
    return replace(
        scene,
        obstacle_positions=scene.obstacle_positions + scene.dt * scene.obstacle_velocities,
    )


def make_crossing_scenes(
    n: int,
    seed: int = 0,
    *,
    goal_distance: float = 8.0,
    duration: int = 30,
    dt: float = 0.4,
    robot_speed: float = 1.05,
) -> list:
    """Scenes where one pedestrian crosses the robot's straight path.

    The pedestrian reaches the robot's line near the moment an unobstructed
    robot at ``robot_speed`` would arrive there, so straight-line plans are
    on a collision course.
    """
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(n):
        x_cross = rng.uniform(0.35, 0.65) * goal_distance
        t_cross = x_cross / robot_speed + rng.uniform(-0.4, 0.4)
        speed = rng.uniform(0.4, 1.0)
        side = rng.choice([-1.0, 1.0])
        vel = np.array([rng.uniform(-0.15, 0.15), -side * speed])
        pos = np.array([x_cross, 0.0]) - t_cross * vel
        scenes.append(Scene(np.zeros(2), np.array([goal_distance, 0.0]), [pos], [vel], duration, dt))
    return scenes


def save_scenes(scenes: Sequence[Scene], path) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in scenes], indent=1) + "\n")


def load_scenes(path) -> list:
    return [Scene.from_dict(d) for d in json.loads(Path(path).read_text())]
