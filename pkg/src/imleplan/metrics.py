"""Episode metrics and the sampling-frequency benchmark."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import DimensionError, TimerResolutionError
from .timing import Stopwatch

BENCH_COLUMNS = ("planner", "batch", "median_ms", "gen_ms", "guidance_ms", "hz")
METRIC_COLUMNS = ("scene_id", "collision", "goal_error", "smoothness", "jerk")
WARMUP_CALLS = 5
MIN_TRIALS = 10


def _path(episode) -> np.ndarray:
    if hasattr(episode, "path"):
        return episode.path
    arr = np.asarray(episode, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise DimensionError(f"expected a (T, 2) path, got {arr.shape}")
    return arr[:, :2]


def obstacle_positions_at(scene, steps: int) -> np.ndarray:
    """Ground-truth obstacle positions at times ``0..steps-1``, ``(steps, O, 2)``."""
    t = np.arange(steps, dtype=np.float64)[:, None, None]
    return scene.obstacle_positions[None] + t * scene.dt * scene.obstacle_velocities[None]


def min_clearances(episode, scene=None) -> np.ndarray:
    """Per-step distance from the robot to the nearest obstacle (``inf`` when none)."""
    scene = scene if scene is not None else episode.scene
    path = _path(episode)
    if len(path) > scene.duration + 1:
        raise DimensionError(f"episode has {len(path)} positions but the scene lasts {scene.duration} steps")
    if scene.n_obstacles == 0:
        return np.full(len(path), np.inf)
    obs = obstacle_positions_at(scene, len(path))
    return np.linalg.norm(path[:, None, :] - obs, axis=-1).min(axis=1)


def episode_collided(episode, radius: float, scene=None) -> bool:
    return bool(np.any(min_clearances(episode, scene) < radius))


def collision_rate(episodes: Sequence, scenes: Optional[Sequence] = None, radius: float = 0.5) -> float:
    """Fraction of episodes with at least one step closer than ``radius`` to an obstacle."""
    if len(episodes) == 0:
        raise ValueError("no episodes")
    if scenes is None:
        scenes = [e.scene for e in episodes]
    if len(scenes) != len(episodes):
        raise DimensionError("one scene per episode required")
    hits = [episode_collided(e, radius, s) for e, s in zip(episodes, scenes)]
    return float(np.mean(hits))


def goal_error(episode, goal) -> float:
    """Distance from the final position to the goal."""
    path = _path(episode)
    return float(np.linalg.norm(path[-1] - np.asarray(goal, dtype=np.float64)[:2]))


def velocities(episode, dt: float) -> np.ndarray:
    return np.diff(_path(episode), axis=0) / dt


def smoothness(episode, dt: float) -> float:
    """Largest per-step change in velocity, ``max |v[t+1] - v[t]|``; 0 for fewer than 3 positions."""
    v = velocities(episode, dt)
    if len(v) < 2:
        return 0.0
    return float(np.max(np.linalg.norm(np.diff(v, axis=0), axis=1)))


def jerk(episode, dt: float) -> float:
    """Mean of ``|v[t+2] - 2 v[t+1] + v[t]| / dt^2``; needs at least 4 positions."""
    path = _path(episode)
    if len(path) < 4:
        raise ValueError(f"jerk needs at least 4 positions, got {len(path)}")
    v = velocities(path, dt)
    second = v[2:] - 2.0 * v[1:-1] + v[:-2]
    return float(np.mean(np.linalg.norm(second, axis=1)) / dt**2)


def episode_metrics(episode, radius: float) -> dict:
    path = episode.path
    dt = episode.scene.dt
    return {
        "collision": int(episode_collided(episode, radius)),
        "goal_error": goal_error(path, episode.scene.goal),
        "smoothness": smoothness(path, dt),
        "jerk": jerk(path, dt) if len(path) >= 4 else float("nan"),
    }


def metrics_csv(episodes: Sequence, radius: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for i, ep in enumerate(episodes):
        m = episode_metrics(ep, radius)
        w.writerow([i, m["collision"], f"{m['goal_error']:.9g}", f"{m['smoothness']:.9g}", f"{m['jerk']:.9g}"])
    return buf.getvalue()


# benchmark ----------------------------------------------------------------

@dataclass
class BenchResult:
    planner: str
    batch: int
    median_ms: float
    gen_ms: float
    guidance_ms: float
    trials: int

    @property
    def hz(self) -> float:
        return 1000.0 / self.median_ms


def timer_resolution_ns(clock=time.perf_counter_ns, samples: int = 50) -> int:
    """Smallest nonzero step observed on ``clock``."""
    best = None
    for _ in range(samples):
        a = clock()
        b = clock()
        while b == a:
            b = clock()
        best = b - a if best is None else min(best, b - a)
    return int(best)


def sampling_frequency(
    plan: Callable,
    batch: int,
    trials: int = 50,
    *,
    name: str = "planner",
    warmup: int = WARMUP_CALLS,
    clock=time.perf_counter_ns,
) -> BenchResult:
    """Median latency of ``plan(batch, stopwatch)`` over ``trials`` timed calls.

    ``plan`` receives a :class:`Stopwatch` and should time its generator
    and guidance work under those section names. Generator and guidance
    milliseconds are medians of the per-call section totals. Warm-up calls
    are not timed. Raises :class:`TimerResolutionError` when the median is
    below a hundred clock ticks.
    """
    if trials < MIN_TRIALS:
        raise ValueError(f"trials must be >= {MIN_TRIALS}, got {trials}")
    for _ in range(warmup):
        plan(batch, Stopwatch(clock))
    total, gen, guide = [], [], []
    for _ in range(trials):
        sw = Stopwatch(clock)
        t0 = clock()
        plan(batch, sw)
        total.append(clock() - t0)
        gen.append(sw.totals_ns.get("generator", 0))
        guide.append(sw.totals_ns.get("guidance", 0))
    median_ns = float(np.median(total))
    tick = timer_resolution_ns(clock)
    if median_ns < 100 * tick:
        raise TimerResolutionError(
            f"median call took {median_ns:.0f} ns with a {tick} ns clock tick; increase batch or work per call"
        )
    return BenchResult(name, batch, median_ns / 1e6, float(np.median(gen)) / 1e6,
                       float(np.median(guide)) / 1e6, trials)


def bench_csv(results: Sequence[BenchResult], with_ratio: bool = True) -> str:
    """Bench table; ``ratio`` is each planner's median latency over the fastest one's."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS + (("ratio",) if with_ratio else ()))
    fastest = min(r.median_ms for r in results) if results else 1.0
    for r in results:
        row = [r.planner, r.batch, f"{r.median_ms:.6f}", f"{r.gen_ms:.6f}", f"{r.guidance_ms:.6f}", f"{r.hz:.6f}"]
        if with_ratio:
            row.append(f"{r.median_ms / fastest:.6f}")
        w.writerow(row)
    return buf.getvalue()
