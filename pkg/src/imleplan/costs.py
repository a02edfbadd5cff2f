"""Analytic planning costs: discrete exponential CBF, CLF goal progress and
discounted deviation from the previous plan.

All functions accept positions shaped ``(H, 2)`` or batched ``(B, H, 2)``
(or :class:`Trajectory` objects) and return a scalar or ``(B,)`` array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, DimensionError
from .trajectory import Trajectory


@dataclass(frozen=True)
class CostConfig:
    safety_radius: float = 0.5
    cbf_rate: float = 0.2
    cbf_weight: float = 10.0
    clf_weight: float = 1.0
    deviation_weight: float = 0.5
    deviation_discount: float = 0.9

    def __post_init__(self):
        if not self.safety_radius > 0:
            raise ConfigurationError("safety_radius must be > 0")
        if not 0 < self.cbf_rate <= 1:
            raise ConfigurationError("cbf_rate must lie in (0, 1]")
        if not 0 < self.deviation_discount <= 1:
            raise ConfigurationError("deviation_discount must lie in (0, 1]")
        for name in ("cbf_weight", "clf_weight", "deviation_weight"):
            w = getattr(self, name)
            if not (np.isfinite(w) and w >= 0):
                raise ConfigurationError(f"{name} must be finite and >= 0")


def _positions(traj) -> np.ndarray:
    if isinstance(traj, Trajectory):
        return traj.positions
    arr = np.asarray(traj, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[-1] < 2:
        raise DimensionError(f"expected (..., H, >=2) positions, got {arr.shape}")
    return arr[..., :2]


def _obstacles(forecast, horizon: int) -> np.ndarray:
    obs = np.asarray(forecast, dtype=np.float64)
    if obs.size == 0:
        return np.zeros((0, horizon, 2))
    if obs.ndim != 3 or obs.shape[2] != 2:
        raise DimensionError(f"obstacle forecast must be (O, H, 2), got {obs.shape}")
    if obs.shape[1] < horizon:
        raise DimensionError(f"forecast horizon {obs.shape[1]} shorter than trajectory horizon {horizon}")
    return obs[:, :horizon]


def barrier_values(traj, obstacle_forecast, radius: float) -> np.ndarray:
    """``h = |p_t - q_t|^2 - r^2``, shape ``(..., O, H)``."""
    p = _positions(traj)
    q = _obstacles(obstacle_forecast, p.shape[-2])
    diff = p[..., None, :, :] - q
    return np.sum(diff * diff, axis=-1) - radius**2


def cbf_penalty(traj, obstacle_forecast, cfg: CostConfig):
    """Hinge penalty on the discrete exponential CBF condition and on radius violations.

    ``sum max(0, -(h[t+1] - (1 - rate) h[t])) + sum max(0, -h[t])``.
    """
    h = barrier_values(traj, obstacle_forecast, cfg.safety_radius)
    decay = h[..., 1:] - (1.0 - cfg.cbf_rate) * h[..., :-1]
    pen = np.maximum(0.0, -decay).sum(axis=(-1, -2)) + np.maximum(0.0, -h).sum(axis=(-1, -2))
    return pen if np.ndim(pen) else float(pen)


def clf_cost(traj, goal, cfg: CostConfig = None):
    """Terminal squared goal distance plus every increase of it along the path."""
    p = _positions(traj)
    goal = np.asarray(goal, dtype=np.float64)
    if goal.shape[-1] != 2:
        raise DimensionError("goal must be a 2-vector")
    V = np.sum((p - goal) ** 2, axis=-1)
    cost = V[..., -1] + np.maximum(0.0, np.diff(V, axis=-1)).sum(axis=-1)
    return cost if np.ndim(cost) else float(cost)


def deviation_penalty(traj, previous_plan, cfg: CostConfig):
    """``sum_t discount^t |p_t - prev_{t+1}|^2`` over the overlapping steps."""
    p = _positions(traj)
    prev = _positions(previous_plan)
    shifted = prev[..., 1:, :]
    n = min(p.shape[-2], shifted.shape[-2])
    disc = cfg.deviation_discount ** np.arange(n)
    d = np.sum((p[..., :n, :] - shifted[..., :n, :]) ** 2, axis=-1)
    cost = (disc * d).sum(axis=-1)
    return cost if np.ndim(cost) else float(cost)


def total_cost(traj, obstacle_forecast, goal, previous_plan, cfg: CostConfig):
    """Weighted sum of the three terms and a per-term breakdown.

    The deviation term is skipped when ``previous_plan`` is ``None``.
    """
    cbf = cbf_penalty(traj, obstacle_forecast, cfg)
    clf = clf_cost(traj, goal, cfg)
    dev = deviation_penalty(traj, previous_plan, cfg) if previous_plan is not None else 0.0 * clf
    total = cfg.cbf_weight * cbf + cfg.clf_weight * clf + cfg.deviation_weight * dev
    return total, {"cbf": cbf, "clf": clf, "dev": dev}


def format_breakdown(parts: dict) -> str:
    return f"cbf={float(parts['cbf']):.9g} clf={float(parts['clf']):.9g} dev={float(parts['dev']):.9g}"


def cost_gradient(traj, obstacle_forecast, goal, previous_plan, cfg: CostConfig, parts: bool = False):
    """Subgradient of :func:`total_cost` w.r.t. positions, ``(..., H, 2)``.

    Hinges contribute only where strictly active (zero at the kink). With
    ``parts=True`` the unweighted ``cbf``/``clf``/``dev`` gradients are
    returned as well.
    """
    p = _positions(traj)
    H = p.shape[-2]
    goal = np.asarray(goal, dtype=np.float64)

    # CBF: d h[o,t] / d p_t = 2 (p_t - q_{o,t})
    q = _obstacles(obstacle_forecast, H)
    diff = p[..., None, :, :] - q
    h = np.sum(diff * diff, axis=-1) - cfg.safety_radius**2
    dh = 2.0 * diff
    decay = h[..., 1:] - (1.0 - cfg.cbf_rate) * h[..., :-1]
    act_decay = (decay < 0).astype(np.float64)
    act_h = (h < 0).astype(np.float64)
    coef = -act_h
    coef[..., 1:] -= act_decay
    coef[..., :-1] += (1.0 - cfg.cbf_rate) * act_decay
    g_cbf = np.sum(coef[..., None] * dh, axis=-3)

    # CLF: V_t = |p_t - g|^2
    gv = 2.0 * (p - goal)
    V = np.sum((p - goal) ** 2, axis=-1)
    inc = (np.diff(V, axis=-1) > 0).astype(np.float64)
    vcoef = np.zeros_like(V)
    vcoef[..., -1] = 1.0
    vcoef[..., 1:] += inc
    vcoef[..., :-1] -= inc
    g_clf = vcoef[..., None] * gv

    g_dev = np.zeros_like(p)
    if previous_plan is not None:
        prev = _positions(previous_plan)
        shifted = prev[..., 1:, :]
        n = min(H, shifted.shape[-2])
        disc = cfg.deviation_discount ** np.arange(n)
        g_dev[..., :n, :] = 2.0 * disc[:, None] * (p[..., :n, :] - shifted[..., :n, :])

    grad = cfg.cbf_weight * g_cbf + cfg.clf_weight * g_clf + cfg.deviation_weight * g_dev
    if parts:
        return grad, {"cbf": g_cbf, "clf": g_clf, "dev": g_dev}
    return grad


def navigation_reward(obstacle_forecast, radius: float = 1.0, cbf_rate: float = 0.2):
    """Trajectory-level reward ``-cbf_penalty`` at a conservative radius, for dataset weighting."""
    cfg = CostConfig(safety_radius=radius, cbf_rate=cbf_rate)

    def reward(traj):
        return -cbf_penalty(traj, obstacle_forecast, cfg)

    return reward


def context_reward(traj: Trajectory, context, radius: float = 1.0, cbf_rate: float = 0.2) -> float:
    """``-cbf_penalty`` of a dataset sample against its context's obstacles held static."""
    hist = context.obstacle_history
    if hist.size == 0:
        return 0.0
    last = hist[:, -1, :]
    forecast = np.repeat(last[:, None, :], traj.horizon, axis=1)
    return -cbf_penalty(traj, forecast, CostConfig(safety_radius=radius, cbf_rate=cbf_rate))
