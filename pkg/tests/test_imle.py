import math
import re

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from sklearn.base import clone

from conftest import random_context
from imleplan.exceptions import ConfigurationError, NumericError, TrainingDivergedError
from imleplan.generator import GeneratorDims, encode_contexts, forward, forward_and_backward, init_params
from imleplan.imle import (
    IMLEGenerator,
    LatentPool,
    TrainConfig,
    compute_weights,
    exponential_weights,
    format_epoch_line,
    linear_weights,
    nearest_latent,
    sample_latent_pool,
    train,
    weighted_imle_loss,
)
from imleplan.simdata import generate_bimodal_dataset
from imleplan.trajectory import Dataset, Trajectory, WeightedSample, trajectory_distance

returns_st = st.lists(st.floats(-1e3, 1e3, allow_nan=False).map(lambda x: round(x, 3)), min_size=1, max_size=20)


# latent pools

def test_pool_basics():
    assert len(sample_latent_pool(1, 16, 0)) == 1
    assert np.array_equal(sample_latent_pool(5, 4, 3).codes, sample_latent_pool(5, 4, 3).codes)


def test_pool_statistics():
    codes = sample_latent_pool(10_000, 16, 11).codes
    assert np.all(np.abs(codes.mean(axis=0)) < 4 / math.sqrt(10_000))
    assert np.all(np.abs(codes.var(axis=0) - 1) < 0.1)


def test_pool_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        sample_latent_pool(0, 4)
    with pytest.raises(NumericError):
        LatentPool(np.array([[np.nan]]))


# nearest latent

@pytest.fixture
def small_model():
    d = GeneratorDims(latent_dim=4, hidden=(8,), film_hidden=4, horizon=5)
    return init_params(d, 2)


def test_nearest_exact_hit(small_model):
    rng = np.random.default_rng(0)
    pool = sample_latent_pool(8, 4, rng)
    c = random_context(rng)
    tau = forward(small_model, pool.codes[5], c)
    z, loss = nearest_latent(small_model, pool, c, tau)
    # batched and single-row matmuls may round differently
    assert np.array_equal(z, pool.codes[5]) and loss < 1e-24


def test_nearest_single_code(small_model):
    rng = np.random.default_rng(1)
    pool = sample_latent_pool(1, 4, rng)
    tau = Trajectory(rng.normal(size=(5, 2)) * 50)
    z, _ = nearest_latent(small_model, pool, random_context(rng), tau)
    assert np.array_equal(z, pool.codes[0])


def test_nearest_tie_lowest_index(small_model):
    rng = np.random.default_rng(2)
    code = rng.normal(size=4)
    other = rng.normal(size=4)
    pool = LatentPool(np.stack([other, code, code]))
    c = random_context(rng)
    tau = forward(small_model, code, c)
    z, _ = nearest_latent(small_model, pool, c, tau)
    assert np.array_equal(z, code)
    pool2 = LatentPool(np.stack([code, code]))
    assert nearest_latent(small_model, pool2, c, Trajectory(rng.normal(size=(5, 2))))[1] >= 0


@given(st.integers(1, 64), st.integers(0, 10_000))
def test_nearest_matches_exhaustive_scan(m, seed):
    p = init_params(GeneratorDims(latent_dim=3, hidden=(6,), film_hidden=3, horizon=4), seed % 7)
    rng = np.random.default_rng(seed)
    pool = sample_latent_pool(m, 3, rng)
    c = random_context(rng)
    tau = Trajectory(rng.normal(size=(4, 2)) + c.current_state)
    best_j, best = 0, math.inf
    for j in range(m):
        d2 = trajectory_distance(forward(p, pool.codes[j], c), tau) ** 2
        if d2 < best:
            best_j, best = j, d2
    z, loss = nearest_latent(p, pool, c, tau)
    assert np.array_equal(z, pool.codes[best_j])
    assert loss == pytest.approx(best, rel=1e-12)


@given(st.integers(2, 30), st.integers(0, 10_000))
def test_selected_loss_monotone_in_pool(m, seed):
    p = init_params(GeneratorDims(latent_dim=3, hidden=(6,), film_hidden=3, horizon=4), 1)
    rng = np.random.default_rng(seed)
    pool = sample_latent_pool(m, 3, rng)
    c = random_context(rng)
    tau = Trajectory(rng.normal(size=(4, 2)))
    sub = LatentPool(pool.codes[rng.choice(m, size=rng.integers(1, m), replace=False)])
    assert nearest_latent(p, pool, c, tau)[1] <= nearest_latent(p, sub, c, tau)[1] * (1 + 1e-12)


# weights

def test_exponential_weights_examples():
    assert np.array_equal(exponential_weights([5, 5, 5], 1.0), [1, 1, 1])
    np.testing.assert_allclose(exponential_weights([1, 2, 3], 1.0), [math.exp(-1), 1, math.exp(1)], rtol=0, atol=1e-12)
    np.testing.assert_allclose(exponential_weights(np.array([1, 2, 3]) + 10, 1.0), exponential_weights([1, 2, 3], 1.0))


def test_exponential_weights_mad_floor():
    # median 0 and MAD 0 but not all equal: the floor keeps the division finite
    w = exponential_weights([0.0, 0.0, 0.0, 1e-9], 1.0)
    assert np.all(np.isfinite(w)) and w[-1] == pytest.approx(math.exp(1e-9 / 1e-8))


def test_linear_weights_examples():
    assert np.array_equal(linear_weights([0, 5, 10]), [0, 0.5, 1])
    assert np.array_equal(linear_weights([7, 7]), [1, 1])


def test_weights_reject_nonfinite():
    with pytest.raises(NumericError):
        exponential_weights([1.0, np.inf], 1.0)
    with pytest.raises(NumericError):
        linear_weights([np.nan])
    with pytest.raises(ConfigurationError):
        exponential_weights([1.0], 0.0)


@given(returns_st, st.floats(-100, 100).map(lambda x: round(x, 2)), st.floats(0.1, 5))
def test_weight_invariances(r, shift, beta):
    r = np.array(r)
    try:
        base = exponential_weights(r, beta)
    except NumericError:
        assume(False)
    np.testing.assert_allclose(exponential_weights(r + shift, beta), base, rtol=1e-6)
    lw = linear_weights(r)
    assert lw.min() >= 0 and lw.max() <= 1
    if r.max() > r.min():
        assert lw[np.argmin(r)] == 0 and lw[np.argmax(r)] == 1
    np.testing.assert_allclose(linear_weights(3.0 * r + shift), lw, atol=1e-9)


def test_compute_weights_modes():
    r = [0.0, 1.0, 2.0]
    assert np.array_equal(compute_weights(r, "none"), [1, 1, 1])
    assert np.array_equal(compute_weights(r, "exp", 1.0), exponential_weights(r, 1.0))
    with pytest.raises(ConfigurationError):
        compute_weights(r, "softmax")


# loss

def _batch(params, rng, n=2, weights=None):
    batch = []
    for i in range(n):
        c = random_context(rng)
        t = Trajectory(rng.normal(size=(params.dims.horizon, 2)))
        w = 1.0 if weights is None else weights[i]
        batch.append((WeightedSample(t, c, 0.0, w), rng.normal(size=params.dims.latent_dim)))
    return batch


def test_loss_zero_weights_and_perfect(small_model):
    rng = np.random.default_rng(0)
    assert weighted_imle_loss(small_model, _batch(small_model, rng, weights=[0, 0]), 10) == 0.0
    c = random_context(rng)
    z = rng.normal(size=4)
    perfect = [(WeightedSample(forward(small_model, z, c), c, 0.0, 1.0), z)]
    assert weighted_imle_loss(small_model, perfect, 5) == 0.0


def test_loss_two_sample_oracle(small_model):
    rng = np.random.default_rng(1)
    batch = _batch(small_model, rng, weights=[0.5, 2.0])
    expect = 0.0
    for s, z in batch:
        expect += s.weight * trajectory_distance(forward(small_model, z, s.context), s.trajectory) ** 2
    expect *= 10 / 2
    assert weighted_imle_loss(small_model, batch, 10) == pytest.approx(expect, rel=1e-12)


def test_weight_scale_and_step_size_compensate(small_model):
    rng = np.random.default_rng(2)
    batch = _batch(small_model, rng, n=3, weights=[0.2, 1.0, 3.0])
    d = small_model.dims
    Z = np.stack([z for _, z in batch])
    C, states = encode_contexts([s.context for s, _ in batch], d)
    target = np.stack([s.trajectory.values for s, _ in batch])

    def grads(alpha):
        w = alpha * np.array([s.weight for s, _ in batch])
        return forward_and_backward(small_model, Z, C, states,
                                    lambda g: (0.0, 2 * w[:, None, None] * (g - target)))[2]

    eta, alpha = 1e-3, 4.0
    g1, g2 = grads(1.0), grads(alpha)
    for k in g1:
        np.testing.assert_allclose(eta * g1[k], (eta / alpha) * g2[k], rtol=1e-12, atol=1e-18)


# training loop

def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(inner_steps=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(weighting="bogus")
    assert TrainConfig(weighting="exp").weighting == "exponential"


def test_single_step_changes_params():
    ds = generate_bimodal_dataset(4, horizon=6, seed=0)
    d = GeneratorDims(latent_dim=4, hidden=(8,), film_hidden=4, horizon=6)
    p0 = init_params(d, 0)
    p1 = train(ds, TrainConfig(epochs=1, inner_steps=1, step_size=1e-4, seed=0), params=p0)
    assert not p1.equals(p0)


def test_train_deterministic_and_reports():
    ds = generate_bimodal_dataset(8, horizon=6, seed=0)
    d = GeneratorDims(latent_dim=4, hidden=(8,), film_hidden=4, horizon=6)
    lines = []
    cfg = TrainConfig(epochs=3, inner_steps=2, step_size=1e-4, seed=4)
    a = train(ds, cfg, lambda k, loss, ms: lines.append(format_epoch_line(k, loss, ms)), dims=d)
    b = train(ds, cfg, dims=d)
    assert a.equals(b)
    assert len(lines) == 3
    assert re.fullmatch(r"epoch=1 mean_selected_loss=\S+ wall_ms=\d+\.\d{3}", lines[0])


def test_exp_weighting_with_equal_returns_matches_none():
    ds = generate_bimodal_dataset(8, horizon=6, seed=0)
    d = GeneratorDims(latent_dim=4, hidden=(8,), film_hidden=4, horizon=6)
    a = train(ds, TrainConfig(epochs=2, inner_steps=2, step_size=1e-4, weighting="exp", beta_w=0.5), dims=d)
    b = train(ds, TrainConfig(epochs=2, inner_steps=2, step_size=1e-4, weighting="none"), dims=d)
    assert a.equals(b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    ds = generate_bimodal_dataset(8, horizon=6, seed=0)
    with pytest.raises(TrainingDivergedError):
        train(ds, TrainConfig(epochs=20, inner_steps=5, step_size=1e6))


def test_memorization():
    ds = generate_bimodal_dataset(2, seed=0)
    one = Dataset(ds.samples[:1], ds.horizon, ds.dt)
    losses = []
    train(one, TrainConfig(sample_factor=64, epochs=200, inner_steps=10, step_size=1e-2, optimizer="adam", seed=0),
          lambda k, loss, ms: losses.append(loss))
    assert losses[-1] < 1e-3


# estimator surface

def test_estimator_params_and_clone():
    est = IMLEGenerator(latent_dim=8, epochs=3)
    assert est.get_params()["latent_dim"] == 8
    est.set_params(epochs=5)
    twin = clone(est)
    assert twin.get_params() == est.get_params()


def test_estimator_fit_sample_predict():
    ds = generate_bimodal_dataset(10, horizon=6, seed=0)
    est = IMLEGenerator(latent_dim=4, hidden=(8,), film_hidden=4, epochs=3, inner_steps=2, step_size=1e-4)
    est.fit(ds)
    c = ds.samples[0].context
    out = est.sample(c, 7, random_state=1)
    assert out.shape == (7, 6, 2)
    assert np.array_equal(out, est.sample(c, 7, random_state=1))
    assert np.all(out[:, 0] == c.current_state)
    assert est.sample([c, c], 3, 0).shape == (2, 3, 6, 2)
    assert est.predict([c]).shape == (1, 6, 2)
    assert est.score(ds) <= 0
    assert len(est.loss_history_) == 3


def test_estimator_unfitted():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        IMLEGenerator().sample(random_context(np.random.default_rng(0)))


def test_exponential_weights_overflow_is_reported():
    with pytest.raises(NumericError, match="beta_w"):
        exponential_weights([0.0, 0.0, 0.0, 1e-6, 1e3], 0.1)
