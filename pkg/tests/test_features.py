import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from supertoken.features import (
    FeatureMap, LinearMap, ProviderConfig, box_average, identity_map, init_linear_map,
    project_features, semantic_features,
)
from supertoken.hsi_io import HsiCube


def test_init_deterministic_and_bounded():
    a, b = init_linear_map(4, 4, seed=3), init_linear_map(4, 4, seed=3)
    assert a.weights.tobytes() == b.weights.tobytes()
    assert np.abs(a.weights).max() <= np.sqrt(6 / 8)
    assert not a.bias.any()
    assert a.weights.shape == (4, 4)
    assert init_linear_map(4, 4, seed=4).weights.tobytes() != a.weights.tobytes()


def test_init_uses_full_range():
    w = init_linear_map(32, 32, seed=0).weights
    a = np.sqrt(6 / 64)
    assert w.max() > 0.9 * a and w.min() < -0.9 * a


def test_identity_projection():
    x = np.random.default_rng(1).normal(size=(3, 2, 5))
    out = project_features(x, identity_map(5))
    np.testing.assert_array_equal(out.rows, x.reshape(6, 5))


def test_zero_weights_give_bias():
    m = LinearMap(np.zeros((2, 3)), np.array([1.5, -2.0]))
    out = project_features(np.ones((2, 2, 3)), m)
    np.testing.assert_array_equal(out.rows, np.tile([1.5, -2.0], (4, 1)))


def test_projection_matches_naive_matmul():
    rng = np.random.default_rng(2)
    m = LinearMap(rng.normal(size=(2, 3)), rng.normal(size=2))
    x = rng.normal(size=(1, 2, 3))
    out = project_features(x, m)
    for i in range(2):
        expect = [sum(m.weights[o, k] * x[0, i, k] for k in range(3)) + m.bias[o] for o in range(2)]
        np.testing.assert_allclose(out.rows[i], expect, rtol=0, atol=1e-12)


def test_projection_dim_mismatch():
    with pytest.raises(ValueError):
        project_features(np.ones((1, 1, 3)), identity_map(4))


@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 1000))
@settings(max_examples=40)
def test_projection_affine_property(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    m = LinearMap(rng.normal(size=(3, 4)), rng.normal(size=3))
    x, y = rng.normal(size=(2, 2, 4)), rng.normal(size=(2, 2, 4))
    lhs = project_features(alpha * x + beta * y, m).rows
    rhs = alpha * project_features(x, m).rows + beta * project_features(y, m).rows - (alpha + beta - 1) * m.bias
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


def test_box_average_corner_uses_four_neighbours():
    data = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
    avg = box_average(data)
    assert avg[0, 0, 0] == (0 + 1 + 4 + 5) / 4
    assert avg[0, 1, 0] == (0 + 1 + 2 + 4 + 5 + 6) / 6
    assert avg[1, 1, 0] == np.mean([0, 1, 2, 4, 5, 6, 8, 9, 10])


def test_box_average_matches_direct_oracle():
    data = np.random.default_rng(5).normal(size=(5, 6, 2))
    avg = box_average(data)
    for r in range(5):
        for c in range(6):
            win = data[max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2].reshape(-1, 2)
            np.testing.assert_allclose(avg[r, c], win.mean(axis=0), rtol=0, atol=1e-12)


def test_linear_provider_identity_returns_spectra():
    x = np.random.default_rng(6).normal(size=(4, 3, 5)).astype(np.float32)
    fm = semantic_features(HsiCube(x), ProviderConfig("linear", 5), linear_map=identity_map(5))
    np.testing.assert_array_equal(fm.rows, x.reshape(12, 5).astype(np.float64))


def test_local_avg_on_constant_cube_equals_linear():
    cube = HsiCube(np.full((6, 5, 4), 0.25, np.float32))
    a = semantic_features(cube, ProviderConfig("linear", 8, seed=2))
    b = semantic_features(cube, ProviderConfig("local-avg", 8, seed=2))
    np.testing.assert_allclose(a.rows, b.rows, rtol=0, atol=1e-15)


@pytest.mark.parametrize("name", ["linear", "local-avg"])
def test_providers_preserve_resolution_and_are_deterministic(name):
    cube = HsiCube(np.random.default_rng(7).normal(size=(7, 9, 6)).astype(np.float32))
    a = semantic_features(cube, ProviderConfig(name, 11, seed=1))
    b = semantic_features(cube, ProviderConfig(name, 11, seed=1))
    assert (a.height, a.width, a.dim) == (7, 9, 11)
    assert a.rows.tobytes() == b.rows.tobytes()


def test_unknown_provider():
    with pytest.raises(ValueError, match="unknown feature provider"):
        semantic_features(HsiCube(np.ones((2, 2, 2), np.float32)), ProviderConfig("unet"))


def test_feature_map_rejects_bad_shape_and_nan():
    with pytest.raises(ValueError):
        FeatureMap(2, 2, np.zeros((3, 1)))
    with pytest.raises(ValueError):
        FeatureMap(1, 1, np.array([[np.nan]]))
