import numpy as np
import pytest

from morphoscope.errors import ValidationError
from morphoscope.scores import (QUANTILE_GRID, AgingField, RegionSpec, default_regions,
                                one_year_field, quantile_threshold, regional_score,
                                score_subject, voxel_scores)
from morphoscope.stats import select_quantile
from morphoscope.svf import Svf
from morphoscope.volume import Grid3, LabelVolume, ScalarVolume

GRID = Grid3((12, 10, 8))


def _labels():
    lab = np.full(GRID.dims, 2)
    lab[2:5, 2:5, 2:5] = 4
    lab[7:10, 2:5, 2:5] = 43
    lab[2:5, 6:9, 3:6] = 17
    lab[7:10, 6:9, 3:6] = 53
    lab[0] = 0
    return LabelVolume(GRID, lab)


def _aging(rng):
    return AgingField(Svf.from_array(GRID, rng.normal(size=(3,) + GRID.dims)), 30.0)


def test_voxel_projection_identity(rng):
    aging = _aging(rng)
    v = rng.normal(size=(3,) + GRID.dims)
    vs = voxel_scores(Svf.from_array(GRID, v), aging)
    v0 = aging.v0.data
    r = v - vs.as_map.data[None] * v0
    dot = (r * v0).sum(axis=0)
    scale = np.sqrt((r * r).sum(axis=0)) * np.sqrt((v0 * v0).sum(axis=0))
    assert np.all(np.abs(dot) <= 1e-6 * scale + 1e-15)
    np.testing.assert_allclose(vs.ads_map.data, np.sqrt((r * r).sum(axis=0)), rtol=1e-12)


@pytest.mark.parametrize("a", [-2.5, 0.0, 0.7, 13.0])
def test_pure_aging_field_scores(rng, a):
    aging = _aging(rng)
    labels = _labels()
    rows = score_subject(Svf.from_array(GRID, a * aging.v0.data), aging, labels,
                         default_regions(), QUANTILE_GRID, "s")
    assert len(rows) == 3 * len(QUANTILE_GRID) * 2
    for row in rows:
        if row.score_kind == "AS":
            assert row.value == pytest.approx(a, abs=1e-9)
        else:
            assert abs(row.value) <= 1e-9 * max(1.0, abs(a))


def test_zero_v0_voxels_are_not_retained(rng):
    v0 = rng.normal(size=(3,) + GRID.dims)
    v0[:, 3, 3, 3] = 0.0
    vs = voxel_scores(Svf.from_array(GRID, v0), AgingField(Svf.from_array(GRID, v0), 1.0))
    assert not vs.retained[3, 3, 3]
    assert vs.retained.sum() == GRID.size - 1


def test_quantile_examples():
    norms = np.arange(1.0, 11.0).reshape(10, 1, 1)
    region = np.ones_like(norms, dtype=bool)
    kept = quantile_threshold(norms, region, 0.5)
    np.testing.assert_array_equal(norms[kept], [6, 7, 8, 9, 10])
    kept = quantile_threshold(norms, region, 0.9)
    np.testing.assert_array_equal(norms[kept], [10])
    kept = quantile_threshold(norms, region, 0.0)
    assert kept.all()


def test_quantile_is_per_region():
    norms = np.arange(1.0, 11.0).reshape(10, 1, 1)
    low = np.zeros_like(norms, dtype=bool)
    low[:4] = True
    kept = quantile_threshold(norms, low, 0.5)
    np.testing.assert_array_equal(norms[kept], [3, 4])


def test_quantile_errors():
    norms = np.ones((3, 3, 3))
    with pytest.raises(ValidationError):
        quantile_threshold(norms, np.zeros_like(norms, dtype=bool), 0.5)
    with pytest.raises(ValidationError):
        quantile_threshold(norms, np.ones_like(norms, dtype=bool), 0.95)


def test_no_retained_voxels_is_an_error(rng):
    aging = AgingField(Svf.zeros(GRID), 1.0)
    vs = voxel_scores(Svf.from_array(GRID, rng.normal(size=(3,) + GRID.dims)), aging)
    with pytest.raises(ValidationError):
        regional_score(vs, RegionSpec("ventricles", {4, 43}), _labels(), 0.0)


def test_region_spec_forms():
    labels = _labels()
    assert RegionSpec("v", {4, 43}).resolve(labels).sum() == 54
    assert RegionSpec("all").resolve(labels).sum() == (labels.data > 0).sum()
    edge = np.zeros(GRID.dims, dtype=bool)
    edge[5, 5, 5] = True
    assert RegionSpec("e", mask=edge).resolve(labels).sum() == 1
    with pytest.raises(ValidationError):
        RegionSpec("none", set())


def test_aging_field_needs_positive_gap():
    img = ScalarVolume(GRID, np.zeros(GRID.dims))
    with pytest.raises(ValidationError):
        one_year_field(img, img, 60, 60)
    with pytest.raises(ValidationError):
        AgingField(Svf.zeros(GRID), 0.0)


def test_quantile_selection_removes_planted_noise_voxels():
    """30% of the region has tiny |v0| and age-independent noise; q* must be 0.3."""
    rng = np.random.default_rng(11)
    g = Grid3((10, 10, 10))
    direction = rng.normal(size=(3,) + g.dims)
    direction /= np.sqrt((direction ** 2).sum(axis=0))
    weak = np.zeros(g.dims, dtype=bool)
    weak.flat[rng.permutation(g.size)[: int(0.3 * g.size)]] = True
    mag = np.where(weak, rng.uniform(0.01, 0.02, g.dims), rng.uniform(1.0, 2.0, g.dims))
    aging = AgingField(Svf.from_array(g, direction * mag), 1.0)
    labels = LabelVolume(g, np.ones(g.dims, dtype=int))
    region = RegionSpec("all")
    ages = np.linspace(61, 89, 12)
    per_q = {q: ([], []) for q in QUANTILE_GRID}
    for age in ages:
        v = (age - 60.0) * aging.v0.data
        v[:, weak] = rng.normal(scale=0.5, size=(3, int(weak.sum())))
        vs = voxel_scores(Svf.from_array(g, v), aging)
        for q in QUANTILE_GRID:
            as_row, _ = regional_score(vs, region, labels, q)
            per_q[q][0].append(age)
            per_q[q][1].append(as_row.value)
    q_best, fit = select_quantile(per_q)
    assert q_best == 0.3
    assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
