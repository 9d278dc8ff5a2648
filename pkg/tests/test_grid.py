import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patrecon.errors import DimensionError, GeometryError, NumericError, ResolutionError
from patrecon.grid import (Image, ImageGrid, Measurements, SensorArray, embed_samples,
                           extract_samples, make_circular_array)


def test_grid_invariants():
    g = ImageGrid(512, 512, 0.1, 0.1)
    assert g.extent == pytest.approx((51.2, 51.2))
    assert g.size == 512 * 512
    for bad in [(1, 4, 0.1, 0.1), (4, 4, 0.0, 0.1), (4, 4, 0.1, -1.0)]:
        with pytest.raises(DimensionError):
            ImageGrid(*bad)


def test_image_rejects_wrong_length_and_nonfinite():
    g = ImageGrid(4, 3)
    with pytest.raises(DimensionError):
        Image(g, np.zeros(11))
    with pytest.raises(NumericError):
        Image(g, np.full((4, 3), np.nan))


def test_vector_reshape_round_trip(rng):
    g = ImageGrid(5, 7)
    img = Image(g, rng.standard_normal((5, 7)))
    back = Image.from_vector(g, img.vector())
    assert np.array_equal(back.data, img.data)
    # row-major: x is the slow index
    assert img.vector()[7] == img.data[1, 0]


def test_full_scale_geometry_128_sensors():
    g = ImageGrid(512, 512, 0.1, 0.1)
    s = make_circular_array(g, (0.0, 0.0), 12.0, 128)
    assert len(s) == 128
    flat = s.positions[:, 0] * g.ny + s.positions[:, 1]
    assert np.unique(flat).size == 128
    r = np.hypot(s.positions[:, 0] - 256, s.positions[:, 1] - 256)
    assert np.all(np.abs(r - 120) <= 0.75)
    assert s.mask.sum() == 128


def test_single_sensor_at_angle_zero():
    g = ImageGrid(64, 64)
    s = make_circular_array(g, (0.0, 0.0), 2.0, 1)
    assert s.positions.tolist() == [[32 + 20, 32]]
    assert s.mask.sum() == 1 and s.mask[52, 32] == 1


def test_four_axis_sensors_snap_by_hand():
    g = ImageGrid(64, 64, 0.1, 0.1)
    s = make_circular_array(g, (0.0, 0.0), 4 * 0.1, 4)
    offsets = (s.positions - 32).tolist()
    assert offsets == [[4, 0], [0, 4], [-4, 0], [0, -4]]


def test_ties_snap_toward_smaller_index():
    g = ImageGrid(16, 16, 1.0, 1.0)
    s = make_circular_array(g, (0.5, -0.5), 0.0, 1)
    assert s.positions.tolist() == [[8, 7]]


def test_circle_outside_grid_is_geometry_error():
    g = ImageGrid(64, 64, 0.1, 0.1)
    with pytest.raises(GeometryError):
        make_circular_array(g, (0.0, 0.0), 4.0, 8)


def test_colliding_sensors_is_resolution_error():
    g = ImageGrid(64, 64, 0.1, 0.1)
    with pytest.raises(ResolutionError):
        make_circular_array(g, (0.0, 0.0), 0.3, 64)


def test_sensor_array_rejects_duplicates():
    g = ImageGrid(8, 8)
    with pytest.raises(ResolutionError):
        SensorArray(g, [[1, 1], [1, 1]])
    with pytest.raises(GeometryError):
        SensorArray(g, [[8, 1]])


def test_extract_and_embed_trivial_cases(rng):
    g = ImageGrid(16, 16)
    s = SensorArray(g, [[1, 2], [5, 5], [9, 3]])
    assert np.all(extract_samples(np.full(g.shape, 3.5), s) == 3.5)
    assert np.all(extract_samples(g.zeros(), s) == 0)
    field = rng.standard_normal(g.shape)
    assert extract_samples(field, s).tolist() == [field[1, 2], field[5, 5], field[9, 3]]
    assert np.all(embed_samples(np.zeros(3), s) == 0)
    one_hot = embed_samples(np.array([0.0, 2.0, 0.0]), s)
    assert np.count_nonzero(one_hot) == 1 and one_hot[5, 5] == 2.0


def test_dimension_errors():
    g = ImageGrid(16, 16)
    s = SensorArray(g, [[1, 2]])
    with pytest.raises(DimensionError):
        extract_samples(np.zeros((8, 8)), s)
    with pytest.raises(DimensionError):
        embed_samples(np.zeros(2), s)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_gather_scatter_adjoint_pair(n_sensors, seed):
    rng = np.random.default_rng(seed)
    g = ImageGrid(12, 9)
    flat = rng.choice(g.size, size=n_sensors, replace=False)
    s = SensorArray(g, np.stack(np.unravel_index(flat, g.shape), axis=1))
    u = rng.standard_normal(g.shape)
    v = rng.standard_normal(n_sensors)
    lhs = np.dot(extract_samples(u, s), v)
    rhs = np.sum(u * embed_samples(v, s))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))
    assert np.array_equal(extract_samples(embed_samples(v, s), s), v)
    assert np.array_equal(embed_samples(extract_samples(u, s), s), u * s.mask)


def test_measurements_validation():
    m = Measurements(np.zeros((3, 4)), 0.01)
    assert (m.l_sensors, m.m_samples) == (3, 4)
    with pytest.raises(DimensionError):
        Measurements(np.zeros(3), 0.01)
    with pytest.raises(DimensionError):
        Measurements(np.zeros((3, 4)), 0.0)
    with pytest.raises(NumericError):
        Measurements(np.full((2, 2), np.inf), 0.01)
