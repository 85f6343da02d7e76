import math

import numpy as np
import pytest

from morphoscope.errors import DegenerateInputError, ValidationError
from morphoscope.phantom import base_anatomy
from morphoscope.register import RegistrationConfig
from morphoscope.template import (BUILD_LOG_COLUMNS, BuildLogEntry, build_template, efc,
                                  kernel_weights, ventricle_edge_map, write_build_log)
from morphoscope.volume import Grid3, LabelVolume, ScalarVolume, foreground_centroid, smooth

FAST = RegistrationConfig(pyramid_levels=2, iters_per_level=30)


def test_kernel_weights():
    w = kernel_weights([60, 62.5, 65], 60, 2.5)
    np.testing.assert_allclose(w, [1.0, math.exp(-0.5), math.exp(-2.0)])
    with pytest.raises(ValidationError):
        kernel_weights([60], 60, 0.0)


def test_efc_examples():
    g = Grid3((2, 2, 2))
    one = np.zeros(g.dims)
    one[0, 0, 0] = 1.0
    assert efc(ScalarVolume(g, one)) == pytest.approx(0.0, abs=1e-12)
    assert efc(ScalarVolume(g, np.full(g.dims, 0.3))) == pytest.approx(1.0, abs=1e-12)
    g4 = Grid3((2, 2, 2))
    data = np.zeros(g4.dims)
    data[0, 0, 0] = data[1, 0, 0] = 1.0
    mask = np.zeros(g4.dims, dtype=bool)
    mask[:, :, 0] = True
    expected = (math.sqrt(2) * math.log(math.sqrt(2))) / (2 * math.log(2))
    assert efc(ScalarVolume(g4, data), mask) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(0.35355339, abs=1e-8)


def test_efc_errors():
    g = Grid3((2, 2, 2))
    with pytest.raises(DegenerateInputError):
        efc(ScalarVolume(g, np.zeros(g.dims)))
    with pytest.raises(ValidationError):
        efc(ScalarVolume(g, -np.ones(g.dims)))
    assert efc(ScalarVolume(g, np.ones(g.dims)), _single(g)) == 0.0


def _single(g):
    m = np.zeros(g.dims, dtype=bool)
    m[1, 1, 1] = True
    return m


def test_efc_increases_with_blur(base64):
    img = base64[0]
    vals = [efc(ScalarVolume(img.grid, smooth(img.data, s))) for s in (0.0, 1.0, 2.0)]
    assert vals[0] < vals[1] < vals[2]


def test_singleton_template_is_the_image(spec32):
    img, _ = base_anatomy(spec32)
    tpl = build_template([("a", img, 60.0)], 60.0, cfg=FAST, outer_iters=1)
    assert np.abs(tpl.data - img.data).max() < 1e-3


def test_template_of_translated_pair_is_centred(spec32):
    img, _ = base_anatomy(spec32)
    shifted = [ScalarVolume(img.grid, np.roll(img.data, s, axis=0)) for s in (-1, 1)]
    log = []
    tpl = build_template([("a", shifted[0], 60), ("b", shifted[1], 60)], 60, cfg=FAST,
                         outer_iters=2, build_log=log)
    c = foreground_centroid(tpl) - foreground_centroid(img)
    assert np.abs(c).max() < 0.1
    assert [e.iteration for e in log] == [1, 2]
    # the centred template is sharper than the plain average of the pair
    plain = ScalarVolume(img.grid, 0.5 * (shifted[0].data + shifted[1].data))
    assert efc(tpl) < efc(plain)


def test_template_is_order_invariant(spec32):
    img, _ = base_anatomy(spec32)
    vols = [("s%d" % i, ScalarVolume(img.grid, np.roll(img.data, i - 1, axis=1)), 60 + i)
            for i in range(3)]
    a = build_template(vols, 61, cfg=FAST, outer_iters=1)
    b = build_template(vols[::-1], 61, cfg=FAST, outer_iters=1)
    np.testing.assert_array_equal(a.data, b.data)


def test_template_needs_subjects_near_the_target_age(spec32):
    img, _ = base_anatomy(spec32)
    with pytest.raises(ValidationError):
        build_template([("a", img, 60.0)], 90.0, cfg=FAST)
    with pytest.raises(ValidationError):
        build_template([], 60.0)


def test_ventricle_edge_map():
    g = Grid3((6, 6, 6))
    young = np.zeros(g.dims, dtype=int)
    old = np.zeros(g.dims, dtype=int)
    young[2:4, 2:4, 2:4] = 4
    old[1:5, 2:4, 2:4] = 4
    old[0, 0, 0] = 17
    edge = ventricle_edge_map(LabelVolume(g, young), LabelVolume(g, old))
    assert edge.data.sum() == 8
    assert not edge.data[2:4, 2:4, 2:4].any()


def test_build_log_csv(tmp_path):
    write_build_log([BuildLogEntry(1, 0.123456789, 0.5)], tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text() == ",".join(BUILD_LOG_COLUMNS) + "\n1,0.123457,0.5\n"
