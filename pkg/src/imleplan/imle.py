"""Reward-weighted conditional IMLE training.

Each epoch draws a batch of samples, a fresh latent pool per sample, and
picks the pool code whose generation is nearest to the sample. The
generator is then fitted to those matches for a few gradient steps with the
per-sample reward weights. Nearest-neighbour matching is what gives IMLE its
mode coverage: every data point pulls *some* latent code towards itself.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigurationError, NumericError, TrainingDivergedError
from .generator import (
    GeneratorDims,
    GeneratorParams,
    encode_contexts,
    forward_and_backward,
    forward_batch,
    init_params,
    round_to_float32,
)
from .trajectory import Context, Dataset, Trajectory
from .validation import check_contexts, check_count, check_dataset, check_finite_vector, check_positive, check_rng

logger = logging.getLogger(__name__)

WEIGHTING_MODES = ("none", "linear", "exponential")
MAD_FLOOR = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    sample_factor: int = 10
    epochs: int = 500
    inner_steps: int = 10
    step_size: float = 1e-5
    batch_size: int = 64
    minibatch_size: int = 32
    beta_w: float = 1.0
    weighting: str = "none"
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        check_count(self.sample_factor, "sample_factor")
        check_count(self.epochs, "epochs")
        check_count(self.inner_steps, "inner_steps")
        check_count(self.batch_size, "batch_size")
        check_count(self.minibatch_size, "minibatch_size")
        check_positive(self.step_size, "step_size")
        check_positive(self.beta_w, "beta_w")
        mode = "exponential" if self.weighting == "exp" else self.weighting
        if mode not in WEIGHTING_MODES:
            raise ConfigurationError(f"weighting must be one of {WEIGHTING_MODES}, got {self.weighting!r}")
        object.__setattr__(self, "weighting", mode)
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


@dataclass(frozen=True, eq=False)
class LatentPool:
    codes: np.ndarray

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.float64)
        if codes.ndim != 2 or codes.shape[0] < 1:
            raise ValueError("a latent pool needs at least one code")
        if not np.all(np.isfinite(codes)):
            raise NumericError("latent pool contains non-finite entries")
        object.__setattr__(self, "codes", codes)

    def __len__(self):
        return self.codes.shape[0]


def sample_latent_pool(m: int, latent_dim: int, rng=None) -> LatentPool:
    """``m`` i.i.d. standard-normal codes."""
    check_count(m, "m")
    return LatentPool(check_rng(rng).standard_normal((m, latent_dim)))


def nearest_latent(params: GeneratorParams, pool: LatentPool, c: Context, tau: Trajectory):
    """Pool code whose generation is closest to ``tau`` and its squared distance.

    Ties go to the lowest pool index.
    """
    if len(pool) == 0:
        raise ValueError("empty latent pool")
    C, states = encode_contexts([c], params.dims)
    k = len(pool)
    gen = forward_batch(params, pool.codes, np.repeat(C, k, axis=0), np.repeat(states, k, axis=0))
    d2 = np.sum((gen - tau.values[None]) ** 2, axis=(1, 2))
    j = int(np.argmin(d2))
    return pool.codes[j].copy(), float(d2[j])


def exponential_weights(returns, beta_w: float) -> np.ndarray:
    """``exp((r - median) / (beta_w * MAD))`` with MAD floored at 1e-8.

    Constant returns give unit weights. Raises :class:`NumericError` when a
    weight overflows.
    """
    r = check_finite_vector(returns, "returns")
    check_positive(beta_w, "beta_w")
    med = np.median(r)
    if np.all(r == r[0]):
        return np.ones_like(r)
    mad = max(float(np.median(np.abs(r - med))), MAD_FLOOR)
    with np.errstate(over="ignore"):
        w = np.exp((r - med) / (beta_w * mad))
    if not np.all(np.isfinite(w)):
        raise NumericError(
            f"exponential weights overflow (return spread {np.ptp(r):.3g} vs MAD {mad:.3g}); increase beta_w"
        )
    return w


def linear_weights(returns) -> np.ndarray:
    r = check_finite_vector(returns, "returns")
    lo, hi = r.min(), r.max()
    if hi == lo:
        return np.ones_like(r)
    return (r - lo) / (hi - lo)


def compute_weights(returns, mode: str, beta_w: float = 1.0) -> np.ndarray:
    mode = "exponential" if mode == "exp" else mode
    if mode == "none":
        return np.ones(len(check_finite_vector(returns, "returns")))
    if mode == "linear":
        return linear_weights(returns)
    if mode == "exponential":
        return exponential_weights(returns, beta_w)
    raise ConfigurationError(f"unknown weighting mode {mode!r}")


def assign_weights(ds: Dataset, mode: str, beta_w: float = 1.0) -> Dataset:
    return ds.with_weights(compute_weights(ds.returns, mode, beta_w))


def weighted_imle_loss(params: GeneratorParams, batch: Sequence, dataset_size: int) -> float:
    """``(N / |batch|) * sum_i w_i * ||f(z*_i, c_i) - tau_i||^2``.

    ``batch`` holds ``(WeightedSample, z_star)`` pairs.
    """
    if not batch:
        return 0.0
    Z = np.stack([np.asarray(z, dtype=np.float64) for _, z in batch])
    C, states = encode_contexts([s.context for s, _ in batch], params.dims)
    gen = forward_batch(params, Z, C, states)
    target = np.stack([s.trajectory.values for s, _ in batch])
    w = np.array([s.weight for s, _ in batch])
    return float(dataset_size / len(batch) * np.sum(w * np.sum((gen - target) ** 2, axis=(1, 2))))


def dims_for_dataset(ds: Dataset, latent_dim=16, hidden=(64, 64), film_hidden=32, position_scale=4.0) -> GeneratorDims:
    first = ds.samples[0]
    n_obs = max(s.context.obstacle_history.shape[0] for s in ds.samples)
    history = max(s.context.obstacle_history.shape[1] for s in ds.samples)
    return GeneratorDims(
        latent_dim=latent_dim,
        hidden=tuple(hidden),
        film_hidden=film_hidden,
        horizon=ds.horizon,
        out_dim=first.trajectory.values.shape[1],
        state_dim=first.trajectory.state_dim,
        goal_dim=first.context.goal.size,
        n_obstacles=n_obs if history else 0,
        history=history if n_obs else 0,
        position_scale=position_scale,
        dt=ds.dt,
    )


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, arrays, grads):
        self.t += 1
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            arrays[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def format_epoch_line(epoch: int, loss: float, wall_ms: float) -> str:
    return f"epoch={epoch} mean_selected_loss={loss:.9g} wall_ms={wall_ms:.3f}"


def select_nearest(params, Z_pools, C, states, targets):
    """Vectorized nearest-code search: pools ``(B, m, latent)`` -> ``(z*, d2*)``."""
    B, m, _ = Z_pools.shape
    gen = forward_batch(
        params,
        Z_pools.reshape(B * m, -1),
        np.repeat(C, m, axis=0),
        np.repeat(states, m, axis=0),
    ).reshape(B, m, *targets.shape[1:])
    d2 = np.sum((gen - targets[:, None]) ** 2, axis=(2, 3))
    j = np.argmin(d2, axis=1)
    rows = np.arange(B)
    return Z_pools[rows, j], d2[rows, j]


def train(
    ds: Dataset,
    cfg: TrainConfig,
    reporter: Optional[Callable] = None,
    *,
    dims: Optional[GeneratorDims] = None,
    params: Optional[GeneratorParams] = None,
) -> GeneratorParams:
    """Reward-weighted cIMLE training loop.

    ``reporter(epoch, mean_selected_loss, wall_ms)`` is called once per epoch.
    Selection happens once per epoch, before the ``inner_steps`` updates.
    Raises :class:`TrainingDivergedError` on a non-finite loss.
    """
    check_dataset(ds)
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(dims or dims_for_dataset(ds), cfg.seed)
    else:
        params = params.copy()
    d = params.dims
    N = len(ds)
    weights = compute_weights(ds.returns, cfg.weighting, cfg.beta_w)
    C_all, states_all = encode_contexts([s.context for s in ds.samples], d)
    targets_all = ds.trajectory_array()
    if targets_all.shape[1:] != (d.horizon, d.out_dim):
        raise ConfigurationError(f"dataset trajectories {targets_all.shape[1:]} do not match model {(d.horizon, d.out_dim)}")
    adam = _Adam(cfg.step_size) if cfg.optimizer == "adam" else None

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        S = rng.choice(N, size=min(cfg.batch_size, N), replace=False)
        pools = rng.standard_normal((S.size, cfg.sample_factor, d.latent_dim))
        z_star, d2 = select_nearest(params, pools, C_all[S], states_all[S], targets_all[S])
        mean_loss = float(np.mean(d2))
        if not math.isfinite(mean_loss):
            raise TrainingDivergedError(f"epoch {epoch}: selected loss is {mean_loss}")

        for _ in range(cfg.inner_steps):
            sub = rng.choice(S.size, size=min(cfg.minibatch_size, S.size), replace=False)
            idx = S[sub]
            w = weights[idx]
            scale = N / sub.size

            def loss_grad(gen, idx=idx, w=w, scale=scale):
                diff = gen - targets_all[idx]
                loss = scale * float(np.sum(w * np.sum(diff * diff, axis=(1, 2))))
                return loss, 2.0 * scale * w[:, None, None] * diff

            loss, _, grads = forward_and_backward(params, z_star[sub], C_all[idx], states_all[idx], loss_grad)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"epoch {epoch}: minibatch loss is {loss}; reduce step_size (now {cfg.step_size})"
                )
            if adam is not None:
                adam.step(params.arrays, grads)
            else:
                for k, g in grads.items():
                    params.arrays[k] -= cfg.step_size * g

        wall_ms = 1000.0 * (time.perf_counter() - t0)
        if reporter is not None:
            reporter(epoch, mean_loss, wall_ms)
    for k, a in params.arrays.items():
        if not np.all(np.isfinite(a)):
            raise TrainingDivergedError(f"parameter {k} became non-finite")
    return params


def coverage_distances(params: GeneratorParams, ds: Dataset, m: int, rng=None) -> np.ndarray:
    """For each sample, the smallest L2 distance among ``m`` fresh generations."""
    rng = check_rng(rng)
    d = params.dims
    C, states = encode_contexts([s.context for s in ds.samples], d)
    pools = rng.standard_normal((len(ds), m, d.latent_dim))
    _, d2 = select_nearest(params, pools, C, states, ds.trajectory_array())
    return np.sqrt(d2)


class IMLEGenerator(BaseEstimator):
    """Conditional IMLE trajectory generator with a scikit-learn interface.

    ``fit`` takes a :class:`~imleplan.trajectory.Dataset`; ``sample`` draws
    trajectories for contexts in a single forward pass.
    """

    def __init__(
        self,
        latent_dim=16,
        hidden=(64, 64),
        film_hidden=32,
        position_scale=4.0,
        sample_factor=10,
        epochs=500,
        inner_steps=10,
        step_size=1e-5,
        batch_size=64,
        minibatch_size=32,
        weighting="none",
        beta_w=1.0,
        optimizer="sgd",
        random_state=0,
        verbose=False,
    ):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.film_hidden = film_hidden
        self.position_scale = position_scale
        self.sample_factor = sample_factor
        self.epochs = epochs
        self.inner_steps = inner_steps
        self.step_size = step_size
        self.batch_size = batch_size
        self.minibatch_size = minibatch_size
        self.weighting = weighting
        self.beta_w = beta_w
        self.optimizer = optimizer
        self.random_state = random_state
        self.verbose = verbose

    def _config(self) -> TrainConfig:
        return TrainConfig(
            sample_factor=self.sample_factor,
            epochs=self.epochs,
            inner_steps=self.inner_steps,
            step_size=self.step_size,
            batch_size=self.batch_size,
            minibatch_size=self.minibatch_size,
            beta_w=self.beta_w,
            weighting=self.weighting,
            optimizer=self.optimizer,
            seed=self.random_state,
        )

    def fit(self, X: Dataset, y=None):
        ds = check_dataset(X)
        cfg = self._config()
        dims = dims_for_dataset(ds, self.latent_dim, self.hidden, self.film_hidden, self.position_scale)
        history = []

        def report(epoch, loss, wall_ms):
            history.append(loss)
            if self.verbose:
                logger.info(format_epoch_line(epoch, loss, wall_ms))

        self.params_ = round_to_float32(train(ds, cfg, report, dims=dims))
        self.dims_ = dims
        self.loss_history_ = np.array(history)
        return self

    @classmethod
    def from_params(cls, params: GeneratorParams, **kwargs) -> "IMLEGenerator":
        d = params.dims
        est = cls(latent_dim=d.latent_dim, hidden=d.hidden, film_hidden=d.film_hidden,
                  position_scale=d.position_scale, **kwargs)
        est.params_ = params
        est.dims_ = d
        return est

    def sample(self, contexts, n_samples: int = 1, random_state=None) -> np.ndarray:
        """``(n_samples, H, D)`` for one context, ``(len(contexts), n_samples, H, D)`` for a list."""
        check_is_fitted(self, "params_")
        rng = check_rng(random_state)
        single = isinstance(contexts, Context)
        contexts = check_contexts(contexts)
        C, states = encode_contexts(contexts, self.dims_)
        Z = rng.standard_normal((len(contexts) * n_samples, self.dims_.latent_dim))
        out = forward_batch(self.params_, Z, np.repeat(C, n_samples, axis=0), np.repeat(states, n_samples, axis=0))
        out = out.reshape(len(contexts), n_samples, *out.shape[1:])
        return out[0] if single else out

    def predict(self, contexts) -> np.ndarray:
        """Generation at the prior mean ``z = 0`` for each context, ``(B, H, D)``."""
        check_is_fitted(self, "params_")
        contexts = check_contexts(contexts)
        C, states = encode_contexts(contexts, self.dims_)
        return forward_batch(self.params_, np.zeros((len(contexts), self.dims_.latent_dim)), C, states)

    def score(self, X: Dataset, y=None, m: int = 20) -> float:
        """Negative mean nearest-generation distance over ``X`` (higher is better)."""
        check_is_fitted(self, "params_")
        return -float(np.mean(coverage_distances(self.params_, check_dataset(X), m, self.random_state)))
