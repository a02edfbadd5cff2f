"""Trajectories, planning contexts, weighted datasets and the IMLE-DS file format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import DatasetFormatError, DimensionError, NumericError

DATASET_MAGIC = "IMLE-DS"
DATASET_VERSION = "v1"


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must have {ndim} dimension(s), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Fixed-horizon sequence of states, optionally with actions.

    ``states`` is ``(H, D_s)`` and ``actions`` is ``(H, D_a)`` or ``None``.
    Values are stored time-major; ``values`` concatenates states and actions
    per step, which is the layout every distance and file routine uses.
    """

    states: np.ndarray
    actions: Optional[np.ndarray] = None
    dt: float = 0.4

    def __post_init__(self):
        states = _frozen(self.states, 2, "states")
        if states.shape[0] < 2:
            raise DimensionError(f"horizon must be >= 2, got {states.shape[0]}")
        object.__setattr__(self, "states", states)
        if self.actions is not None:
            actions = _frozen(self.actions, 2, "actions")
            if actions.shape[0] != states.shape[0]:
                raise DimensionError("actions and states must share the horizon")
            object.__setattr__(self, "actions", actions)
        dt = float(self.dt)
        if not (dt > 0 and math.isfinite(dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "dt", dt)

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return 0 if self.actions is None else self.actions.shape[1]

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    @property
    def values(self) -> np.ndarray:
        """``(H, D_s + D_a)`` array of all channels."""
        if self.actions is None:
            return self.states
        return np.concatenate([self.states, self.actions], axis=1)

    @classmethod
    def from_values(cls, values, state_dim: int, dt: float) -> "Trajectory":
        values = np.asarray(values, dtype=np.float64)
        if values.shape[1] == state_dim:
            return cls(values, None, dt)
        return cls(values[:, :state_dim], values[:, state_dim:], dt)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.dt == other.dt
            and self.values.shape == other.values.shape
            and self.state_dim == other.state_dim
            and bool(np.array_equal(self.values, other.values))
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Context:
    """Conditioning variables for the generator.

    ``obstacle_history`` is ``(O, P, 2)``: O obstacles, P past positions each,
    oldest first. Either dimension may be zero.
    """

    current_state: np.ndarray
    goal: np.ndarray
    obstacle_history: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 2)))

    def __post_init__(self):
        object.__setattr__(self, "current_state", _frozen(self.current_state, 1, "current_state"))
        object.__setattr__(self, "goal", _frozen(self.goal, 1, "goal"))
        hist = np.array(self.obstacle_history, dtype=np.float64)
        if hist.size == 0 and hist.ndim != 3:
            hist = hist.reshape(0, 0, 2)
        object.__setattr__(self, "obstacle_history", _frozen(hist, 3, "obstacle_history"))
        if self.obstacle_history.shape[2] != 2:
            raise DimensionError("obstacle_history last axis must be 2 (x, y)")

    @property
    def position(self) -> np.ndarray:
        return self.current_state[:2]

    def to_vector(self) -> np.ndarray:
        """Flat encoding used by the dataset file: ``O, P, state, goal, history``."""
        o, p, _ = self.obstacle_history.shape
        return np.concatenate(
            [[o, p], self.current_state, self.goal, self.obstacle_history.ravel()]
        )

    @classmethod
    def from_vector(cls, vec, state_dim: int) -> "Context":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size < 2 + state_dim:
            raise DimensionError("context vector too short")
        o, p = int(vec[0]), int(vec[1])
        if o < 0 or p < 0 or o != vec[0] or p != vec[1]:
            raise DimensionError("context obstacle counts must be non-negative integers")
        n_hist = 2 * o * p
        goal_dim = vec.size - 2 - state_dim - n_hist
        if goal_dim < 0:
            raise DimensionError("context vector length inconsistent with its obstacle counts")
        state = vec[2 : 2 + state_dim]
        goal = vec[2 + state_dim : 2 + state_dim + goal_dim]
        hist = vec[2 + state_dim + goal_dim :].reshape(o, p, 2)
        return cls(state, goal, hist)

    def __eq__(self, other):
        if not isinstance(other, Context):
            return NotImplemented
        a, b = self.to_vector(), other.to_vector()
        return a.shape == b.shape and bool(np.array_equal(a, b))

    __hash__ = None


@dataclass(frozen=True)
class WeightedSample:
    trajectory: Trajectory
    context: Context
    return_value: float = 0.0
    weight: float = 1.0

    def __post_init__(self):
        w = float(self.weight)
        if not (math.isfinite(w) and w >= 0):
            raise NumericError(f"weight must be finite and >= 0, got {self.weight}")
        r = float(self.return_value)
        if not math.isfinite(r):
            raise NumericError(f"return must be finite, got {self.return_value}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "return_value", r)


@dataclass(frozen=True)
class Dataset:
    samples: tuple
    horizon: int
    dt: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "metadata", {str(k): str(v) for k, v in self.metadata.items()})
        for s in self.samples:
            if s.trajectory.horizon != self.horizon:
                raise DimensionError(
                    f"sample horizon {s.trajectory.horizon} != dataset horizon {self.horizon}"
                )
            if s.trajectory.dt != self.dt:
                raise DimensionError(f"sample dt {s.trajectory.dt} != dataset dt {self.dt}")
        if self.samples:
            ds0, da0 = self.samples[0].trajectory.state_dim, self.samples[0].trajectory.action_dim
            for s in self.samples:
                if (s.trajectory.state_dim, s.trajectory.action_dim) != (ds0, da0):
                    raise DimensionError("all samples must share state and action dimensions")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def state_dim(self) -> int:
        return self.samples[0].trajectory.state_dim if self.samples else 0

    @property
    def action_dim(self) -> int:
        return self.samples[0].trajectory.action_dim if self.samples else 0

    @property
    def returns(self) -> np.ndarray:
        return np.array([s.return_value for s in self.samples], dtype=np.float64)

    @property
    def weights(self) -> np.ndarray:
        return np.array([s.weight for s in self.samples], dtype=np.float64)

    def trajectory_array(self) -> np.ndarray:
        """``(N, H, D)`` stack of all trajectory channels."""
        return np.stack([s.trajectory.values for s in self.samples])

    def with_returns(self, returns) -> "Dataset":
        returns = np.asarray(returns, dtype=np.float64)
        if returns.shape != (len(self),):
            raise DimensionError("one return per sample required")
        samples = [replace(s, return_value=float(r)) for s, r in zip(self.samples, returns)]
        return replace(self, samples=samples)

    def with_weights(self, weights) -> "Dataset":
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(self),):
            raise DimensionError("one weight per sample required")
        samples = [replace(s, weight=float(w)) for s, w in zip(self.samples, weights)]
        return replace(self, samples=samples)


def trajectory_distance(a: Trajectory, b: Trajectory) -> float:
    """Euclidean norm of the difference over every state and action entry."""
    if a.state_dim != b.state_dim or a.action_dim != b.action_dim or a.horizon != b.horizon:
        raise DimensionError(
            f"trajectory shapes differ: {a.values.shape} (Ds={a.state_dim}) "
            f"vs {b.values.shape} (Ds={b.state_dim})"
        )
    return float(np.linalg.norm((a.values - b.values).ravel()))


def compute_return(traj: Trajectory, reward: Callable) -> float:
    """Undiscounted sum of ``reward(state, action)`` over the horizon.

    ``action`` is ``None`` for state-only trajectories.
    """
    total = 0.0
    for t in range(traj.horizon):
        a = None if traj.actions is None else traj.actions[t]
        r = float(reward(traj.states[t], a))
        if not math.isfinite(r):
            raise NumericError(f"reward at step {t} is not finite: {r}")
        total += r
    return total


# IMLE-DS v1 ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_list(xs) -> str:
    return ",".join(_fmt(x) for x in np.asarray(xs, dtype=np.float64).ravel())


def _parse_list(s: str) -> np.ndarray:
    if s == "":
        return np.zeros(0)
    return np.array([float(x) for x in s.split(",")], dtype=np.float64)


def format_dataset(ds: Dataset) -> str:
    lines = [
        f"{DATASET_MAGIC} {DATASET_VERSION} H={ds.horizon} dt={_fmt(ds.dt)} "
        f"Ds={ds.state_dim} Da={ds.action_dim} N={len(ds)}"
    ]
    for k in sorted(ds.metadata):
        lines.append(f"# {k}={ds.metadata[k]}")
    for s in ds.samples:
        lines.append(
            f"R={_fmt(s.return_value)} W={_fmt(s.weight)} "
            f"C={_fmt_list(s.context.to_vector())} T={_fmt_list(s.trajectory.values)}"
        )
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(format_dataset(ds))


def parse_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("empty dataset file")
    head = lines[0].split()
    if len(head) < 2 or head[0] != DATASET_MAGIC:
        raise DatasetFormatError(f"line 1: not an {DATASET_MAGIC} file")
    if head[1] != DATASET_VERSION:
        raise DatasetFormatError(f"line 1: unsupported version {head[1]!r}")
    try:
        fields = dict(tok.split("=", 1) for tok in head[2:])
        horizon, dt = int(fields["H"]), float(fields["dt"])
        ds_dim, da_dim, n = int(fields["Ds"]), int(fields["Da"]), int(fields["N"])
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"line 1: malformed header: {exc}") from exc

    metadata, samples = {}, []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            metadata[key] = value
            continue
        try:
            rec = dict(tok.split("=", 1) for tok in line.split(" "))
            values = _parse_list(rec["T"])
            width = ds_dim + da_dim
            if values.size != horizon * width:
                raise DimensionError(f"expected {horizon * width} trajectory values, got {values.size}")
            traj = Trajectory.from_values(values.reshape(horizon, width), ds_dim, dt)
            ctx = Context.from_vector(_parse_list(rec["C"]), ds_dim)
            samples.append(WeightedSample(traj, ctx, float(rec["R"]), float(rec["W"])))
        except (KeyError, ValueError, DimensionError, NumericError) as exc:
            raise DatasetFormatError(f"line {lineno}: {exc}") from exc
    if len(samples) != n:
        raise DatasetFormatError(f"header declares N={n} but file holds {len(samples)} records")
    return Dataset(samples, horizon, dt, metadata)


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_text())


def stack_values(trajs: Sequence[Trajectory]) -> np.ndarray:
    return np.stack([t.values for t in trajs])
