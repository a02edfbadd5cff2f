"""Minimal DDPM trajectory diffuser used as the latency and coverage baseline.

The noise predictor reuses the generator's FiLM MLP: its input is the noisy
trajectory (relative to the robot, divided by the position scale)
concatenated with a sinusoidal embedding of the step index.
"""

from __future__ import annotations

import math
from contextlib import nullcontext
from dataclasses import dataclass, fields
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import DimensionError, TrainingDivergedError
from .generator import (
    NetworkParams,
    GeneratorDims,
    _init_arrays,
    _read_checkpoint,
    _write_checkpoint,
    encode_contexts,
    network_backward,
    network_forward,
)
from .imle import _Adam, dims_for_dataset
from .trajectory import Context, Dataset, Trajectory
from .validation import check_contexts, check_dataset, check_rng

DDPM_MAGIC = "DDPM-CKPT"
MAX_BETA = 0.5
REFERENCE_STEPS = 1000


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64).ravel()
        if b.size < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to step ``t``; ``t = 0`` is the clean data (1.0)."""
        if not 0 <= t <= self.T:
            raise ValueError(f"step {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def linear_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear betas, stretched by ``1000 / T`` when ``T < 1000``.

    The stretch keeps the total noise of the 1000-step reference schedule,
    so ``alpha_bar_T`` stays near zero for short chains. The stretch is
    capped so no beta exceeds ``MAX_BETA``; larger values make the reverse
    step divide by almost zero.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    scale = max(1.0, min(REFERENCE_STEPS / T, MAX_BETA / beta_end))
    betas = np.linspace(beta_start * scale, beta_end * scale, T)
    return NoiseSchedule(np.clip(betas, 1e-8, 0.999))


def forward_noise(tau0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Sample of ``q(tau_t | tau_0)`` for given noise: ``sqrt(ab) tau0 + sqrt(1 - ab) eps``."""
    tau0 = np.asarray(tau0.values if isinstance(tau0, Trajectory) else tau0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != tau0.shape:
        raise DimensionError(f"noise shape {eps.shape} != trajectory shape {tau0.shape}")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * tau0 + math.sqrt(1.0 - ab) * eps


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of step indices, ``(len(t), dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.size, 1))], axis=1)
    return emb


@dataclass(frozen=True)
class DenoiserDims(GeneratorDims):
    """Generator dims plus the diffusion chain; ``latent_dim`` is unused (0)."""

    latent_dim: int = 0
    time_dim: int = 16
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.state_dim < 2 or self.out_dim < self.state_dim or not self.hidden:
            raise DimensionError(f"invalid denoiser dims {self}")
        if self.steps < 1 or self.time_dim < 1:
            raise DimensionError("steps and time_dim must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.horizon * self.out_dim + self.time_dim

    @classmethod
    def from_header_fields(cls, tokens):
        kwargs = {}
        floats = {"position_scale", "dt", "beta_start", "beta_end"}
        names = {f.name for f in fields(cls)}
        for tok in tokens:
            key, _, value = tok.partition("=")
            if key not in names:
                continue
            if key == "hidden":
                kwargs[key] = tuple(int(x) for x in value.split(","))
            elif key in floats:
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.steps, self.beta_start, self.beta_end)


class DenoiserParams(NetworkParams):
    pass


def init_denoiser(dims: DenoiserDims, seed: int = 0) -> DenoiserParams:
    p = DenoiserParams(dims)
    p.arrays = _init_arrays(p.shapes(), np.random.default_rng(seed))
    return p


def denoiser_dims_for_dataset(ds: Dataset, hidden=(64, 64), film_hidden=32, position_scale=4.0,
                              steps=50, time_dim=16) -> DenoiserDims:
    g = dims_for_dataset(ds, 1, hidden, film_hidden, position_scale)
    return DenoiserDims(
        hidden=g.hidden, film_hidden=g.film_hidden, horizon=g.horizon, out_dim=g.out_dim,
        state_dim=g.state_dim, goal_dim=g.goal_dim, n_obstacles=g.n_obstacles, history=g.history,
        position_scale=g.position_scale, dt=g.dt, steps=steps, time_dim=time_dim,
    )


# normalized frame ---------------------------------------------------------

def _offsets(states: np.ndarray, dims) -> np.ndarray:
    off = np.zeros((states.shape[0], 1, dims.out_dim))
    off[:, 0, :2] = states[:, :2]
    return off


def normalize(trajs: np.ndarray, states: np.ndarray, dims) -> np.ndarray:
    return (trajs - _offsets(states, dims)) / dims.position_scale


def denormalize(x: np.ndarray, states: np.ndarray, dims) -> np.ndarray:
    return x * dims.position_scale + _offsets(states, dims)


def _pin_first(x: np.ndarray, states: np.ndarray, dims) -> None:
    x[:, 0, : dims.state_dim] = (states - _offsets(states, dims)[:, 0, : dims.state_dim]) / dims.position_scale


def predict_noise(params, x: np.ndarray, t, C: np.ndarray, cache: bool = False):
    """``eps_theta(x_t, t, c)`` for a batch of normalized trajectories ``(B, H, D)``.

    ``params`` may also be any callable with the same signature (useful for
    oracle denoisers).
    """
    B = x.shape[0]
    if callable(params):
        return params(x, t, C)
    d = params.dims
    t = np.broadcast_to(np.asarray(t), (B,))
    X = np.concatenate([x.reshape(B, -1), time_embedding(t, d.time_dim)], axis=1)
    out = network_forward(params, X, C, cache=cache)
    if cache:
        out, cached = out
        return out.reshape(x.shape), cached
    return out.reshape(x.shape)


def ddpm_loss(params, tau0, c: Context, t: int, eps, sched: NoiseSchedule) -> float:
    """``|eps - eps_theta(forward_noise(tau0, t, eps), t, c)|^2`` in the normalized frame.

    ``tau0`` is a world-frame trajectory; ``eps`` is noise in the normalized frame.
    """
    dims = params.dims if not callable(params) else None
    values = np.asarray(tau0.values if isinstance(tau0, Trajectory) else tau0, dtype=np.float64)
    if dims is None:
        x0 = values[None]
        C = None
    else:
        C, states = encode_contexts([c], dims)
        x0 = normalize(values[None], states, dims)
    xt = forward_noise(x0[0], t, eps, sched)[None]
    pred = predict_noise(params, xt, t, C)
    return float(np.sum((np.asarray(eps) - pred[0]) ** 2))


def reverse_sample(
    params,
    c: Context,
    sched: NoiseSchedule,
    rng=None,
    guidance: Optional[Callable] = None,
    *,
    n_samples: int = 1,
    guidance_scale: float = 1.0,
    final_noise: bool = False,
    x_T: Optional[np.ndarray] = None,
    timer=None,
) -> np.ndarray:
    """Ancestral DDPM sampling, ``(n_samples, H, D)`` in the world frame.

    Variance is ``beta_t``; no noise is added on the last step unless
    ``final_noise``. ``guidance(trajs, t)`` returns the world-frame reward
    gradient, which is added to the posterior mean scaled by
    ``guidance_scale * beta_t``. The first state is re-pinned to the
    context's current state after every step. ``timer`` (a
    :class:`~imleplan.timing.Stopwatch`) splits generator and guidance time.
    """
    rng = check_rng(rng)
    dims = params.dims
    C, states = encode_contexts([c], dims)
    C = np.repeat(C, n_samples, axis=0)
    states = np.repeat(states, n_samples, axis=0)
    shape = (n_samples, dims.horizon, dims.out_dim)
    x = rng.standard_normal(shape) if x_T is None else np.array(x_T, dtype=np.float64).reshape(shape)
    _pin_first(x, states, dims)
    betas, alphas, abars = sched.betas, sched.alphas, sched.alpha_bars
    for t in range(sched.T, 0, -1):
        i = t - 1
        with _section(timer, "generator"):
            eps = predict_noise(params, x, t, C)
            mean = (x - betas[i] / math.sqrt(1.0 - abars[i]) * eps) / math.sqrt(alphas[i])
        if guidance is not None:
            with _section(timer, "guidance"):
                grad = guidance(denormalize(mean, states, dims), t)
                mean = mean + guidance_scale * betas[i] * dims.position_scale * np.asarray(grad)
        with _section(timer, "generator"):
            if t > 1 or final_noise:
                x = mean + math.sqrt(betas[i]) * rng.standard_normal(shape)
            else:
                x = mean
            _pin_first(x, states, dims)
    return denormalize(x, states, dims)


def _section(timer, name):
    return timer(name) if timer is not None else nullcontext()


def train_ddpm(
    ds: Dataset,
    sched: Optional[NoiseSchedule] = None,
    steps: int = 1000,
    eta: float = 1e-3,
    rng=0,
    *,
    params: Optional[DenoiserParams] = None,
    dims: Optional[DenoiserDims] = None,
    batch_size: int = 32,
    optimizer: str = "sgd",
    reporter: Optional[Callable] = None,
) -> DenoiserParams:
    """Gradient descent on the mean minibatch DDPM loss.

    Each step draws a minibatch, a uniform step index and fresh noise per
    example. ``reporter(step, loss)`` is called after every update.
    """
    check_dataset(ds)
    rng = check_rng(rng)
    if params is None:
        dims = dims or denoiser_dims_for_dataset(ds)
        params = init_denoiser(dims, int(rng.integers(2**31)))
    else:
        params = params.copy()
    d = params.dims
    sched = sched or d.schedule()
    C_all, states_all = encode_contexts([s.context for s in ds.samples], d)
    x0_all = normalize(ds.trajectory_array(), states_all, d)
    abars = sched.alpha_bars
    adam = _Adam(eta) if optimizer == "adam" else None
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(ds), size=batch_size)
        t = rng.integers(1, sched.T + 1, size=idx.size)
        eps = rng.standard_normal(x0_all[idx].shape)
        ab = abars[t - 1][:, None, None]
        xt = np.sqrt(ab) * x0_all[idx] + np.sqrt(1.0 - ab) * eps
        pred, cached = predict_noise(params, xt, t, C_all[idx], cache=True)
        diff = pred - eps
        loss = float(np.sum(diff * diff)) / idx.size
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"step {step}: DDPM loss is {loss}; reduce the step size (now {eta})")
        grads = network_backward(params, cached, (2.0 / idx.size) * diff.reshape(idx.size, -1))
        if adam is not None:
            adam.step(params.arrays, grads)
        else:
            for k, g in grads.items():
                params.arrays[k] -= eta * g
        if reporter is not None:
            reporter(step, loss)
    return params


def probe_loss(params: DenoiserParams, ds: Dataset, sched: NoiseSchedule, n: int = 64, seed: int = 0) -> float:
    """Mean DDPM loss on a fixed set of (sample, step, noise) draws."""
    rng = np.random.default_rng(seed)
    d = params.dims
    idx = rng.integers(0, len(ds), size=n)
    t = rng.integers(1, sched.T + 1, size=n)
    C, states = encode_contexts([ds.samples[i].context for i in idx], d)
    x0 = normalize(np.stack([ds.samples[i].trajectory.values for i in idx]), states, d)
    eps = rng.standard_normal(x0.shape)
    ab = sched.alpha_bars[t - 1][:, None, None]
    pred = predict_noise(params, np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps, t, C)
    return float(np.sum((pred - eps) ** 2)) / n


def save_denoiser(params: DenoiserParams, path) -> None:
    _write_checkpoint(params, path, DDPM_MAGIC)


def load_denoiser(path) -> DenoiserParams:
    return _read_checkpoint(path, DDPM_MAGIC, DenoiserDims, DenoiserParams)


class DiffusionGenerator(BaseEstimator):
    """DDPM trajectory sampler with the same fit/sample surface as the IMLE generator."""

    def __init__(self, hidden=(64, 64), film_hidden=32, position_scale=4.0, steps=50, time_dim=16,
                 train_steps=2000, step_size=1e-3, batch_size=32, optimizer="adam", random_state=0):
        self.hidden = hidden
        self.film_hidden = film_hidden
        self.position_scale = position_scale
        self.steps = steps
        self.time_dim = time_dim
        self.train_steps = train_steps
        self.step_size = step_size
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.random_state = random_state

    def fit(self, X: Dataset, y=None):
        ds = check_dataset(X)
        dims = denoiser_dims_for_dataset(ds, self.hidden, self.film_hidden, self.position_scale,
                                         self.steps, self.time_dim)
        self.params_ = train_ddpm(ds, dims.schedule(), self.train_steps, self.step_size, self.random_state,
                                  dims=dims, batch_size=self.batch_size, optimizer=self.optimizer)
        self.dims_ = dims
        return self

    @classmethod
    def from_params(cls, params: DenoiserParams) -> "DiffusionGenerator":
        d = params.dims
        est = cls(hidden=d.hidden, film_hidden=d.film_hidden, position_scale=d.position_scale,
                  steps=d.steps, time_dim=d.time_dim)
        est.params_, est.dims_ = params, d
        return est

    def sample(self, contexts, n_samples: int = 1, random_state=None, guidance=None, guidance_scale=1.0):
        check_is_fitted(self, "params_")
        rng = check_rng(random_state)
        single = isinstance(contexts, Context)
        sched = self.dims_.schedule()
        out = np.stack([
            reverse_sample(self.params_, c, sched, rng, guidance, n_samples=n_samples, guidance_scale=guidance_scale)
            for c in check_contexts(contexts)
        ])
        return out[0] if single else out
