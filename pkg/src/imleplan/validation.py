"""Input checks shared by the estimators."""

import numbers

import numpy as np

from .exceptions import ConfigurationError, DimensionError, NumericError
from .trajectory import Context, Dataset, Trajectory


def check_rng(random_state) -> np.random.Generator:
    """Turn ``None``, an int seed or a ``Generator`` into a ``Generator``."""
    if isinstance(random_state, np.random.Generator):
        return random_state
    if random_state is None or isinstance(random_state, (numbers.Integral, np.integer)):
        return np.random.default_rng(random_state)
    raise ConfigurationError(f"cannot use {random_state!r} as a random state")


def check_finite_vector(x, name: str = "values") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def check_positive(value, name: str, strict: bool = True) -> float:
    v = float(value)
    ok = v > 0 if strict else v >= 0
    if not (ok and np.isfinite(v)):
        raise ConfigurationError(f"{name} must be {'>' if strict else '>='} 0, got {value}")
    return v


def check_count(value, name: str, minimum: int = 1) -> int:
    if int(value) != value or value < minimum:
        raise ConfigurationError(f"{name} must be an integer >= {minimum}, got {value}")
    return int(value)


def check_dataset(ds, nonempty: bool = True) -> Dataset:
    if not isinstance(ds, Dataset):
        raise TypeError(f"expected a Dataset, got {type(ds).__name__}")
    if nonempty and len(ds) == 0:
        raise ValueError("dataset is empty")
    return ds


def check_contexts(contexts) -> list:
    if isinstance(contexts, Context):
        return [contexts]
    contexts = list(contexts)
    for c in contexts:
        if not isinstance(c, Context):
            raise TypeError(f"expected Context, got {type(c).__name__}")
    return contexts


def check_trajectory_batch(trajs, horizon=None, dim=None) -> np.ndarray:
    """``(B, H, D)`` float array from a Trajectory, list of them, or an array."""
    if isinstance(trajs, Trajectory):
        arr = trajs.values[None]
    elif isinstance(trajs, (list, tuple)) and trajs and isinstance(trajs[0], Trajectory):
        arr = np.stack([t.values for t in trajs])
    else:
        arr = np.asarray(trajs, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
    if arr.ndim != 3:
        raise DimensionError(f"expected (B, H, D) trajectories, got shape {arr.shape}")
    if horizon is not None and arr.shape[1] != horizon:
        raise DimensionError(f"expected horizon {horizon}, got {arr.shape[1]}")
    if dim is not None and arr.shape[2] != dim:
        raise DimensionError(f"expected {dim} channels, got {arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("trajectories contain non-finite entries")
    return arr
