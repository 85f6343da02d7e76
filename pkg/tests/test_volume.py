import numpy as np
import pytest

from morphoscope.errors import GridMismatchError, NumericalError, ValidationError
from morphoscope.volume import (Grid3, LabelVolume, ScalarVolume, VectorField3, check_grids,
                                compose, normalize_intensity, sample_trilinear, smooth,
                                warp, warp_labels)


def test_grid_validation():
    with pytest.raises(ValidationError):
        Grid3((1, 4, 4))
    with pytest.raises(ValidationError):
        Grid3((4, 4, 4), (1.0, 0.0, 1.0))
    assert Grid3((4, 5, 6)).size == 120


def test_values_are_x_fastest():
    g = Grid3((2, 3, 4))
    vol = ScalarVolume.from_values(g, np.arange(24))
    assert vol.data[1, 0, 0] == 1
    assert vol.data[0, 1, 0] == 2
    assert vol.data[0, 0, 1] == 6
    np.testing.assert_array_equal(vol.values, np.arange(24))


def test_scalar_rejects_nonfinite_and_bad_shape():
    g = Grid3((2, 2, 2))
    with pytest.raises(NumericalError):
        ScalarVolume(g, np.full((2, 2, 2), np.nan))
    with pytest.raises(ValidationError):
        ScalarVolume(g, np.zeros((2, 2, 3)))
    with pytest.raises(ValidationError):
        LabelVolume(g, -np.ones((2, 2, 2)))


def test_check_grids_mismatch():
    a = ScalarVolume(Grid3((2, 2, 2)), np.zeros((2, 2, 2)))
    b = ScalarVolume(Grid3((2, 2, 2), (2.0, 1.0, 1.0)), np.zeros((2, 2, 2)))
    with pytest.raises(GridMismatchError):
        check_grids(a, b)


def test_trilinear_reproduces_affine_functions():
    g = Grid3((5, 6, 7))
    x, y, z = g.coords()
    vol = ScalarVolume(g, 1.0 + 2.0 * x - 0.5 * y + 0.25 * z)
    for p in [(1.3, 2.7, 4.1), (0.0, 0.0, 0.0), (3.99, 4.5, 5.25)]:
        assert sample_trilinear(vol, p) == pytest.approx(1 + 2 * p[0] - 0.5 * p[1] + 0.25 * p[2],
                                                         abs=1e-12)


def test_trilinear_clamps_outside():
    g = Grid3((4, 4, 4))
    x, _, _ = g.coords()
    vol = ScalarVolume(g, x)
    assert sample_trilinear(vol, (-3.0, 1.0, 1.0)) == 0.0
    assert sample_trilinear(vol, (9.0, 1.0, 1.0)) == 3.0


def test_identity_warp_is_exact(rng):
    g = Grid3((6, 7, 8))
    vol = ScalarVolume(g, rng.random(g.dims))
    out = warp(vol, VectorField3.identity(g))
    np.testing.assert_array_equal(out.data, vol.data)


def test_integer_translation_warp(rng):
    g = Grid3((8, 8, 8))
    vol = ScalarVolume(g, rng.random(g.dims))
    u = np.zeros((3,) + g.dims)
    u[0] = 1.0
    out = warp(vol, VectorField3(g, u, "displacement"))
    np.testing.assert_allclose(out.data[:-1], vol.data[1:], atol=1e-12)


def test_warp_labels_nearest():
    g = Grid3((6, 6, 6))
    lab = LabelVolume(g, np.zeros(g.dims, dtype=int))
    lab.data[2:4, 2:4, 2:4] = 7
    u = np.full((3,) + g.dims, 0.4)
    out = warp_labels(lab, VectorField3(g, u, "displacement"))
    np.testing.assert_array_equal(out.data, lab.data)


def test_compose_translations():
    g = Grid3((10, 10, 10))
    ua = np.zeros((3,) + g.dims)
    ub = np.zeros((3,) + g.dims)
    ua[0] = 1.0
    ub[1] = -0.5
    phi = compose(VectorField3(g, ua, "displacement").as_deformation(),
                  VectorField3(g, ub, "displacement").as_deformation())
    u = phi.displacement()
    np.testing.assert_allclose(u[0], 1.0, atol=1e-12)
    np.testing.assert_allclose(u[1], -0.5, atol=1e-12)


def test_normalize_and_smooth(rng):
    g = Grid3((6, 6, 6))
    vol = ScalarVolume(g, 3.0 + 2.0 * rng.random(g.dims))
    out = normalize_intensity(vol)
    assert out.data.min() == 0.0 and out.data.max() == 1.0
    with pytest.raises(NumericalError):
        normalize_intensity(ScalarVolume(g, np.ones(g.dims)))
    const = np.full(g.dims, 2.5)
    np.testing.assert_allclose(smooth(const, 1.5), const, atol=1e-12)
