import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_context
from gradcheck import finite_difference_check
from imleplan.exceptions import CheckpointError, CheckpointVersionError, DimensionError
from imleplan.generator import (
    GeneratorDims,
    backward,
    context_features,
    encode_contexts,
    film,
    forward,
    init_params,
    load_checkpoint,
    network_backward,
    network_forward,
    save_checkpoint,
)
from imleplan.trajectory import Context


def test_film_examples():
    x = np.array([1.0, 2.0])
    assert np.array_equal(film(x, np.ones(2), np.zeros(2)), x)
    assert np.array_equal(film(x, [2.0, 0.5], [0.0, 1.0]), [2.0, 2.0])
    rng = np.random.default_rng(0)
    x, g, b = rng.normal(size=(3, 7))
    expect = [g[i] * x[i] + b[i] for i in range(7)]
    np.testing.assert_array_equal(film(x, g, b), expect)
    with pytest.raises(DimensionError):
        film(x, g[:3], b)


def test_init_deterministic_and_film_identity():
    d = GeneratorDims()
    a, b = init_params(d, 4), init_params(d, 4)
    assert a.equals(b)
    assert not a.equals(init_params(d, 5))
    for k in range(len(d.hidden)):
        assert np.all(a.arrays[f"gamma{k}_W2"] == 0) and np.all(a.arrays[f"gamma{k}_b2"] == 1)
        assert np.all(a.arrays[f"beta{k}_W2"] == 0) and np.all(a.arrays[f"beta{k}_b2"] == 0)


def test_init_fan_in_variance():
    d = GeneratorDims(latent_dim=16, hidden=(256, 64), goal_dim=2, n_obstacles=1)
    w = init_params(d, 0).arrays["W1"]  # fan-in 256
    assert abs(w.var() - 1 / 256) < 0.2 / 256


def test_first_state_is_current_state():
    d = GeneratorDims(horizon=6)
    p = init_params(d, 1)
    rng = np.random.default_rng(1)
    for _ in range(5):
        c = random_context(rng)
        t = forward(p, rng.normal(size=d.latent_dim), c)
        assert np.array_equal(t.states[0], c.current_state)


def test_init_film_paths_carry_no_context_gradient(tiny_dims):
    """At init the FiLM outputs do not depend on the context: their gradient
    through the FiLM heads' first layer is exactly zero. The context still
    reaches the trunk through input concatenation."""
    p = init_params(tiny_dims, 2)
    rng = np.random.default_rng(2)
    Z = rng.normal(size=(3, tiny_dims.latent_dim))
    C = rng.normal(size=(3, tiny_dims.context_dim))
    out, cached = network_forward(p, Z, C, cache=True)
    g = network_backward(p, cached, rng.normal(size=out.shape))
    for k in range(len(tiny_dims.hidden)):
        for head in ("gamma", "beta"):
            assert np.all(g[f"{head}{k}_W1"] == 0) and np.all(g[f"{head}{k}_b1"] == 0)


def test_translation_equivariance():
    """Shifting the whole context shifts the generation by the same offset."""
    d = GeneratorDims(horizon=5)
    p = init_params(d, 3)
    rng = np.random.default_rng(3)
    c = random_context(rng)
    shift = np.array([2.5, -1.0])
    moved = Context(c.current_state + shift, c.goal + shift, c.obstacle_history + shift)
    z = rng.normal(size=d.latent_dim)
    np.testing.assert_allclose(forward(p, z, moved).states, forward(p, z, c).states + shift, atol=1e-12)


def test_forward_pure():
    d = GeneratorDims()
    p = init_params(d, 0)
    rng = np.random.default_rng(0)
    z, c = rng.normal(size=d.latent_dim), random_context(rng)
    assert np.array_equal(forward(p, z, c).values, forward(p, z, c).values)


def test_forward_hand_computation():
    d = GeneratorDims(latent_dim=1, hidden=(2,), film_hidden=1, horizon=2, out_dim=2, state_dim=2,
                      goal_dim=2, n_obstacles=0, history=0)
    p = init_params(d, 0)
    for k in p.arrays:
        p.arrays[k] = np.full(p.arrays[k].shape, 0.1)
    c = Context(np.zeros(2), np.zeros(2), np.zeros((0, 0, 2)))
    # every input is 0, so each pre-activation is just its bias
    u = math.tanh(0.1)
    s = math.tanh(0.1)
    gamma = s * 0.1 + 0.1
    beta = s * 0.1 + 0.1
    h = gamma * u + beta
    o = 2 * h * 0.1 + 0.1
    t = forward(p, np.zeros(1), c)
    np.testing.assert_allclose(t.states, [[0.0, 0.0], [o, o]], rtol=1e-15)


def test_backward_zero_upstream(tiny_params):
    rng = np.random.default_rng(0)
    g = backward(tiny_params, rng.normal(size=3), random_context(rng), np.zeros((4, 2)))
    assert all(np.all(v == 0) for v in g.values())


def test_backward_head_bias_is_column_sum(tiny_params):
    rng = np.random.default_rng(1)
    up = rng.normal(size=(4, 2))
    g = backward(tiny_params, rng.normal(size=3), random_context(rng), up)
    masked = up.copy()
    masked[0] = 0.0  # pinned first state
    np.testing.assert_allclose(g["b_head"], masked.ravel(), rtol=1e-14)
    Z = rng.normal(size=(3, 3))
    ups = rng.normal(size=(3, 4, 2))
    ctxs = [random_context(rng) for _ in range(3)]
    gb = backward(tiny_params, Z, ctxs, ups)
    ups[:, 0] = 0.0
    np.testing.assert_allclose(gb["b_head"], ups.reshape(3, -1).sum(axis=0), rtol=1e-13)


def test_backward_shape_mismatch(tiny_params):
    rng = np.random.default_rng(2)
    with pytest.raises(DimensionError):
        backward(tiny_params, rng.normal(size=(2, 3)), random_context(rng), np.zeros((3, 4, 2)))


def test_finite_difference_every_parameter(tiny_params):
    rng = np.random.default_rng(5)
    assert tiny_params.size() <= 2000
    worst = max(
        finite_difference_check(tiny_params, rng.normal(size=3), random_context(rng), rng.normal(size=(4, 2)))
        for _ in range(3)
    )
    assert worst < 1e-4


@given(st.integers(0, 10_000))
def test_gradient_property(seed):
    rng = np.random.default_rng(seed)
    d = GeneratorDims(latent_dim=2, hidden=(3,), film_hidden=2, horizon=3)
    p = init_params(d, seed)
    for k, a in p.arrays.items():
        p.arrays[k] = a + 0.3 * rng.standard_normal(a.shape)
    assert finite_difference_check(p, rng.normal(size=2), random_context(rng), rng.normal(size=(3, 2))) < 1e-4


def test_checkpoint_roundtrip_and_length(tmp_path, tiny_dims):
    p = init_params(tiny_dims, 9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path)
    back = load_checkpoint(path)
    assert back.equals(p)
    raw = path.read_bytes()
    header = raw[: raw.index(b"\n") + 1]
    assert header.startswith(b"IMLE-CKPT v1 ")
    assert len(raw) == len(header) + 4 * p.size()
    # count parameters from dims independently
    d = tiny_dims
    n, prev = 0, d.latent_dim + d.context_dim
    for w in d.hidden:
        n += prev * w + w + 2 * (d.context_dim * d.film_hidden + d.film_hidden + d.film_hidden * w + w)
        prev = w
    n += prev * d.horizon * d.out_dim + d.horizon * d.out_dim
    assert p.size() == n


def test_checkpoint_errors(tmp_path, tiny_dims):
    p = init_params(tiny_dims, 1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(raw.replace(b"IMLE-CKPT v1", b"IMLE-CKPT v7", 1))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(bad)
    bad.write_bytes(b"garbage\x00\x01" + raw)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_context_features_nearest_and_padding():
    d = GeneratorDims(n_obstacles=2, history=2, position_scale=2.0)
    hist = np.array([[[10.0, 0.0], [9.0, 0.0]], [[1.0, 1.0], [2.0, 2.0]], [[0.0, 5.0], [0.0, 4.0]]])
    c = Context(np.array([1.0, 1.0]), np.array([3.0, 1.0]), hist)
    f = context_features(c, d)
    np.testing.assert_allclose(f[:2], [1.0, 0.0])
    block = f[2:].reshape(2, 2, 2) * 2.0
    np.testing.assert_allclose(block[0], [[0.0, 0.0], [1.0, 1.0]])  # nearest by latest position
    np.testing.assert_allclose(block[1], [[-1.0, 4.0], [-1.0, 3.0]])
    far = context_features(Context(np.zeros(2), np.zeros(2), np.zeros((0, 0, 2))), d)
    assert np.all(far[2:].reshape(-1, 2)[:, 1] == 25.0)


def test_encode_contexts_dim_checks():
    d = GeneratorDims()
    with pytest.raises(DimensionError):
        encode_contexts([Context(np.zeros(3), np.zeros(2), np.zeros((0, 0, 2)))], d)
