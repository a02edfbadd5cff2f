import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from imleplan.generator import GeneratorDims, init_params
from imleplan.trajectory import Context

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_dims():
    return GeneratorDims(latent_dim=3, hidden=(5, 4), film_hidden=3, horizon=4, out_dim=2,
                         state_dim=2, goal_dim=2, n_obstacles=1, history=1)


@pytest.fixture
def tiny_params(tiny_dims):
    """Tiny net with FiLM heads moved off the identity so every path carries gradient."""
    p = init_params(tiny_dims, seed=3)
    rng = np.random.default_rng(7)
    for k, a in p.arrays.items():
        p.arrays[k] = a + 0.3 * rng.standard_normal(a.shape)
    return p


def random_context(rng, n_obstacles=1, history=1):
    return Context(rng.normal(size=2), rng.normal(size=2) * 3, rng.normal(size=(n_obstacles, history, 2)) * 2)


@pytest.fixture(scope="session")
def bimodal_model():
    """IMLE generator fitted to the two-mode detour set (about 2 s with Adam)."""
    from imleplan.imle import TrainConfig, dims_for_dataset, train
    from imleplan.simdata import generate_bimodal_dataset

    ds = generate_bimodal_dataset(200, horizon=20, seed=0)
    d = dims_for_dataset(ds, hidden=(64, 64))
    cfg = TrainConfig(sample_factor=10, epochs=150, inner_steps=10, step_size=1e-3, optimizer="adam", seed=0)
    return ds, train(ds, cfg, dims=d)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
