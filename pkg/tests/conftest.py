import numpy as np
import pytest

from patrecon.forward import ForwardModel, SpectralPlan, TimeGrid, propagate
from patrecon.grid import ImageGrid, extract_samples, make_circular_array


def dense_H_by_impulses(plan, sensors, times):
    """Assemble H one column at a time by propagating unit impulses.

    Uses only :func:`propagate` (full complex FFT) and direct sampling, so it
    is independent of both operator engines.
    """
    g = plan.grid
    rows = len(sensors) * times.m_samples
    H = np.zeros((rows, g.size))
    for j in range(g.size):
        e = np.zeros(g.size)
        e[j] = 1.0
        e = e.reshape(g.shape)
        cols = [extract_samples(propagate(plan, e, t), sensors) for t in times.times]
        H[:, j] = np.stack(cols, axis=1).ravel()
    return H


@pytest.fixture(scope="session")
def small_setup():
    g = ImageGrid(16, 16, 0.1, 0.1)
    plan = SpectralPlan(g, 1.5)
    sensors = make_circular_array(g, (0.0, 0.0), 0.6, 4)
    times = TimeGrid(4, 0.02)
    H = dense_H_by_impulses(plan, sensors, times)
    return plan, sensors, times, H


@pytest.fixture(scope="session")
def small_model(small_setup):
    plan, sensors, times, H = small_setup
    return ForwardModel(plan, sensors, times, "shell"), H


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
