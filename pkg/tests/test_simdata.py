import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from imleplan.exceptions import ConfigurationError, RawParseError
from imleplan.simdata import (
    LEFT,
    RIGHT,
    AugmentationSpec,
    Scene,
    augment,
    bimodal_nominal,
    constant_velocity_forecast,
    generate_bimodal_dataset,
    generate_navigation_dataset,
    load_raw_trajectories,
    load_scenes,
    make_crossing_scenes,
    moving_average,
    obstacle_track,
    save_scenes,
    step_scene,
    trajectory_mode,
    window_starts,
)
from imleplan.trajectory import (
    Context,
    Dataset,
    Trajectory,
    WeightedSample,
    format_dataset,
    parse_dataset,
    trajectory_distance,
)


# bimodal data

def test_bimodal_split():
    ds = generate_bimodal_dataset(100, seed=0)
    modes = [trajectory_mode(s.trajectory) for s in ds.samples]
    assert modes.count(LEFT) == 50 and modes.count(RIGHT) == 50


def test_bimodal_deterministic():
    assert format_dataset(generate_bimodal_dataset(20, seed=5)) == format_dataset(generate_bimodal_dataset(20, seed=5))
    assert format_dataset(generate_bimodal_dataset(20, seed=5)) != format_dataset(generate_bimodal_dataset(20, seed=6))


def test_bimodal_midpoint_amplitude():
    sigma, H = 0.05, 20
    ds = generate_bimodal_dataset(100, horizon=H, seed=1, noise=sigma)
    mid = H // 2
    nominal = abs(bimodal_nominal(H)[mid, 1])
    mean_abs = np.mean([abs(s.trajectory.states[mid, 1]) for s in ds.samples])
    assert abs(mean_abs - nominal) < 3 * sigma / math.sqrt(50)


def test_bimodal_context_and_start():
    ds = generate_bimodal_dataset(4, goal_distance=6.0)
    for s in ds.samples:
        assert np.array_equal(s.trajectory.states[0], [0.0, 0.0])
        assert np.array_equal(s.context.goal, [6.0, 0.0])
        assert np.array_equal(s.context.obstacle_history, [[[3.0, 0.0]]])


def test_bimodal_preconditions():
    with pytest.raises(ValueError):
        generate_bimodal_dataset(1)
    with pytest.raises(ValueError):
        generate_bimodal_dataset(4, horizon=1)


def test_navigation_dataset_shapes():
    ds = generate_navigation_dataset(30, seed=2)
    assert len(ds) == 30
    for s in ds.samples:
        assert np.array_equal(s.trajectory.states[0], [0.0, 0.0])
        assert s.context.goal[1] == 0.0 and s.context.goal[0] > 0
        # never overshoots the goal along x by more than the noise
        assert s.trajectory.states[:, 0].max() <= s.context.goal[0] + 0.2


# augmentation

def test_augment_identity():
    ds = generate_bimodal_dataset(6, seed=3)
    out = augment(ds, AugmentationSpec([(0.0, 0.0)], [0.0], 1))
    for a, b in zip(ds.samples, out.samples):
        assert np.array_equal(a.trajectory.values, b.trajectory.values)
        assert a.context == b.context


def test_augment_rotation_pi():
    t = Trajectory(np.stack([np.arange(5.0), np.zeros(5)], axis=1))
    c = Context(np.zeros(2), np.array([4.0, 0.0]), np.zeros((0, 0, 2)))
    ds = Dataset([WeightedSample(t, c)], 5, 0.4)
    out = augment(ds, AugmentationSpec([(0.0, 0.0)], [math.pi], 1))
    np.testing.assert_allclose(out.samples[0].trajectory.states, np.stack([-np.arange(5.0), np.zeros(5)], 1), atol=1e-12)
    np.testing.assert_allclose(out.samples[0].context.goal, [-4.0, 0.0], atol=1e-12)


def _window3_oracle(seq):
    padded = [seq[0]] + list(seq) + [seq[-1]]
    return [(padded[i] + padded[i + 1] + padded[i + 2]) / 3 for i in range(len(seq))]


@pytest.mark.parametrize("seq, interior", [
    ([0.0, 1, 0, 1, 0], [1 / 3, 2 / 3, 1 / 3]),
    ([1.0, 0, 1, 0, 1], [2 / 3, 1 / 3, 2 / 3]),
])
def test_moving_average_oracle(seq, interior):
    out = moving_average(np.array(seq)[:, None], 3)[:, 0]
    np.testing.assert_allclose(out, _window3_oracle(seq), rtol=0, atol=1e-15)
    np.testing.assert_allclose(out[1:4], interior, rtol=0, atol=1e-15)


def test_augment_counts_translation_and_smoothing_pin():
    ds = generate_bimodal_dataset(4, seed=0)
    spec = AugmentationSpec([(0, 0), (1, 0), (0, 1), (1, 1)], [0.0, 0.5], 3)
    out = augment(ds, spec)
    assert len(out) == 8 * len(ds)
    # translation (1, 0), rotation 0 is copy index 2 of the first sample
    s = out.samples[2]
    np.testing.assert_allclose(s.trajectory.states[0], ds.samples[0].trajectory.states[0] + [1, 0])
    np.testing.assert_allclose(s.context.current_state, s.trajectory.states[0])


def test_augment_window_too_large():
    with pytest.raises(ConfigurationError):
        augment(generate_bimodal_dataset(2, horizon=5), AugmentationSpec([(0, 0)], [0.0], 7))


def test_augment_recomputes_returns():
    ds = generate_bimodal_dataset(2, horizon=5)
    out = augment(ds, AugmentationSpec([(0, 0)], [0.0], 1), reward=lambda s, a: 1.0)
    assert all(s.return_value == 5.0 for s in out.samples)


def test_augmentation_spec_validation_and_parse():
    with pytest.raises(ConfigurationError):
        AugmentationSpec([(0, 0)], [0.0], 2)
    with pytest.raises(ConfigurationError):
        AugmentationSpec([(0, 0)], [4.0], 1)
    spec = AugmentationSpec.parse("t=0:0;1.5:-2 r=0,0.25 w=3")
    assert spec.smoothing_window == 3
    assert len(spec.translations) == 2 and len(spec.rotations) == 2


@given(st.floats(-math.pi + 1e-6, math.pi, allow_nan=False), st.integers(0, 1000))
def test_common_rotation_preserves_distance(theta, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    c = Context(np.zeros(2), np.zeros(2), np.zeros((0, 0, 2)))
    a[0] = b[0] = 0.0
    ds = Dataset([WeightedSample(Trajectory(a), c), WeightedSample(Trajectory(b), c)], 5, 0.4)
    out = augment(ds, AugmentationSpec([(0, 0)], [theta], 1))
    before = trajectory_distance(ds.samples[0].trajectory, ds.samples[1].trajectory)
    after = trajectory_distance(out.samples[0].trajectory, out.samples[1].trajectory)
    assert after == pytest.approx(before, rel=1e-9, abs=1e-12)


# raw files

def _write(tmp_path, rows, name="raw.txt"):
    path = tmp_path / name
    path.write_text("".join(f"{f} {a} {x} {y}\n" for f, a, x, y in rows))
    return path


def test_raw_single_agent_exact(tmp_path):
    H, dt = 5, 0.4
    pts = np.random.default_rng(0).normal(size=(H, 2))
    path = _write(tmp_path, [(k, 1, x, y) for k, (x, y) in enumerate(pts)])
    ds = load_raw_trajectories(path, H, dt, seconds_per_frame=dt)
    assert len(ds) == 1
    np.testing.assert_allclose(ds.samples[0].trajectory.states, pts, rtol=0, atol=1e-12)


def test_raw_empty_file(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("")
    ds = load_raw_trajectories(path, 5, 0.4)
    assert len(ds) == 0 and ds.metadata["skipped_agents"] == "0"


def test_raw_window_count(tmp_path):
    H = 5
    path = _write(tmp_path, [(k, 1, float(k), 0.0) for k in range(2 * H - 1)])
    ds = load_raw_trajectories(path, H, 0.4)
    # stride H//2 = 2 over 9 steps: starts 0, 2, 4
    assert window_starts(2 * H - 1, H) == [0, 2, 4]
    assert len(ds) == 3


def test_raw_skips_short_agents_and_contexts(tmp_path):
    rows = [(k, 1, float(k), 0.0) for k in range(6)] + [(k, 2, 0.0, float(k)) for k in range(3)]
    ds = load_raw_trajectories(_write(tmp_path, rows), 5, 0.4)
    assert ds.metadata["skipped_agents"] == "1"
    hist = ds.samples[0].context.obstacle_history
    np.testing.assert_allclose(hist, [[[0.0, 0.0]]])


def test_raw_resamples_linearly(tmp_path):
    # frames every 1 unit at 0.8 s per frame, resampled to 0.4 s
    path = _write(tmp_path, [(k, 1, 2.0 * k, 0.0) for k in range(4)])
    ds = load_raw_trajectories(path, 7, 0.4, seconds_per_frame=0.8)
    np.testing.assert_allclose(ds.samples[0].trajectory.states[:, 0], np.arange(7.0))


def test_raw_parse_error_line_number(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 1 0.0 0.0\n1 1 zero 0.0\n")
    with pytest.raises(RawParseError, match=r"bad.txt:2"):
        load_raw_trajectories(path, 2, 0.4)


def test_raw_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_raw_trajectories(tmp_path / "missing.txt", 2, 0.4)


def test_raw_reserialize_idempotent(tmp_path):
    rng = np.random.default_rng(1)
    rows = [(k, a, float(x), float(y)) for a in (1, 2) for k, (x, y) in enumerate(rng.normal(size=(12, 2)))]
    ds = load_raw_trajectories(_write(tmp_path, rows), 6, 0.4)
    once = format_dataset(ds)
    assert format_dataset(parse_dataset(once)) == once


# obstacles

def test_forecast_static_and_arithmetic():
    s = Scene(np.zeros(2), np.ones(2), [[1.0, 2.0]], [[0.0, 0.0]])
    assert np.all(constant_velocity_forecast(s, 4) == [1.0, 2.0])
    moving = Scene(np.zeros(2), np.ones(2), [[0.0, 0.0]], [[1.0, 0.0]], dt=0.4)
    assert constant_velocity_forecast(moving, 5)[0, 4, 0] == pytest.approx(2.0)


def test_forecast_euler_oracle():
    rng = np.random.default_rng(3)
    s = Scene(np.zeros(2), np.ones(2), rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), dt=0.3)
    fc = constant_velocity_forecast(s, 6)
    pos = s.obstacle_positions.copy()
    for t in range(6):
        pos = pos + s.dt * s.obstacle_velocities
        np.testing.assert_allclose(fc[:, t], pos, atol=1e-12)


def test_step_scene_consistency():
    rng = np.random.default_rng(4)
    s = Scene(np.zeros(2), np.ones(2), rng.normal(size=(2, 2)), rng.normal(size=(2, 2)))
    still = Scene(np.zeros(2), np.ones(2), [[1.0, 1.0]], [[0.0, 0.0]])
    assert np.array_equal(step_scene(still).obstacle_positions, still.obstacle_positions)
    np.testing.assert_allclose(step_scene(s).obstacle_positions, constant_velocity_forecast(s, 1)[:, 0])
    k, cur = 5, s
    for _ in range(k):
        cur = step_scene(cur)
    np.testing.assert_allclose(cur.obstacle_positions, constant_velocity_forecast(s, k)[:, k - 1], atol=1e-12)


def test_obstacle_track_starts_now():
    s = Scene(np.zeros(2), np.ones(2), [[1.0, 0.0]], [[0.0, 1.0]])
    tr = obstacle_track(s, 3)
    np.testing.assert_allclose(tr[0], [[1.0, 0.0], [1.0, 0.4], [1.0, 0.8]])


def test_scene_json_roundtrip(tmp_path):
    scenes = make_crossing_scenes(3, seed=1)
    save_scenes(scenes, tmp_path / "s.json")
    back = load_scenes(tmp_path / "s.json")
    for a, b in zip(scenes, back):
        assert np.array_equal(a.obstacle_positions, b.obstacle_positions)
        assert np.array_equal(a.obstacle_velocities, b.obstacle_velocities)
        assert a.duration == b.duration and a.dt == b.dt


def test_crossing_scenes_cross_the_line():
    for s in make_crossing_scenes(10, seed=0):
        fc = constant_velocity_forecast(s, s.duration)
        ys = fc[0, :, 1]
        assert ys.min() < 0 < ys.max()
