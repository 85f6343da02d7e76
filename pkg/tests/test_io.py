import struct

import numpy as np
import pytest

from morphoscope.errors import (BadMagicError, DimensionalityError, HeaderError, NiftiError,
                                TruncatedDataError, UnsupportedDatatypeError, ValidationError)
from morphoscope.io import (CohortRow, CohortTable, RegionScoreRow, build_header, fmt,
                            read_cohort_csv, read_field, read_nifti, read_scores_csv,
                            write_cohort_csv, write_field, write_nifti, write_scores_csv)
from morphoscope.volume import Grid3, LabelVolume, ScalarVolume, VectorField3

GRID = Grid3((5, 4, 3), (1.0, 1.5, 2.0), (3.0, -1.0, 0.5))


@pytest.fixture
def scalar(rng):
    return ScalarVolume(GRID, rng.random(GRID.dims).astype(np.float32))


def _write_raw(path, header, payload):
    path.write_bytes(bytes(header) + payload)
    return path


def test_scalar_roundtrip(tmp_path, scalar):
    p = tmp_path / "a.nii"
    write_nifti(scalar, p)
    back = read_nifti(p)
    assert isinstance(back, ScalarVolume)
    assert back.grid == GRID
    np.testing.assert_array_equal(back.data, scalar.data)


def test_label_roundtrip(tmp_path, rng):
    lab = LabelVolume(GRID, rng.integers(0, 60, GRID.dims))
    p = tmp_path / "l.nii"
    write_nifti(lab, p)
    back = read_nifti(p)
    assert isinstance(back, LabelVolume)
    np.testing.assert_array_equal(back.data, lab.data)


def test_field_roundtrip(tmp_path, rng):
    f = VectorField3(GRID, rng.normal(size=(3,) + GRID.dims).astype(np.float32))
    write_field(f, tmp_path / "v")
    back = read_field(tmp_path / "v")
    np.testing.assert_array_equal(back.data, f.data)
    assert back.kind == "velocity"


def test_write_is_byte_stable(tmp_path, scalar):
    write_nifti(scalar, tmp_path / "a.nii")
    write_nifti(scalar, tmp_path / "b.nii")
    assert (tmp_path / "a.nii").read_bytes() == (tmp_path / "b.nii").read_bytes()


def test_big_endian_and_scaling(tmp_path):
    g = Grid3((2, 2, 2))
    raw = bytearray(352)
    struct.pack_into(">i", raw, 0, 348)
    struct.pack_into(">8h", raw, 40, 3, 2, 2, 2, 1, 1, 1, 1)
    struct.pack_into(">3h", raw, 68, 0, 4, 16)
    struct.pack_into(">8f", raw, 76, 1, 1, 1, 1, 0, 0, 0, 0)
    struct.pack_into(">3f", raw, 108, 352.0, 0.5, 10.0)
    raw[344:348] = b"n+1\x00"
    payload = np.arange(8, dtype=">i2").tobytes()
    p = _write_raw(tmp_path / "be.nii", raw, payload)
    vol = read_nifti(p)
    np.testing.assert_array_equal(vol.values, 0.5 * np.arange(8) + 10.0)
    assert vol.grid.dims == g.dims


def test_pair_format(tmp_path, scalar):
    raw = bytearray(build_header(GRID, 16))[:348]
    raw[344:348] = b"ni1\x00"
    (tmp_path / "p.hdr").write_bytes(bytes(raw))
    struct.pack_into("<f", raw, 108, 0.0)
    (tmp_path / "p.hdr").write_bytes(bytes(raw))
    (tmp_path / "p.img").write_bytes(scalar.data.astype("<f4").tobytes(order="F"))
    back = read_nifti(tmp_path / "p.hdr")
    np.testing.assert_array_equal(back.data, scalar.data)


def _corrupt(tmp_path, scalar, edit):
    p = tmp_path / "bad.nii"
    write_nifti(scalar, p)
    raw = bytearray(p.read_bytes())
    edit(raw)
    p.write_bytes(bytes(raw))
    return p


@pytest.mark.parametrize("edit, exc", [
    (lambda r: r.__setitem__(slice(344, 348), b"xxxx"), BadMagicError),
    (lambda r: struct.pack_into("<h", r, 70, 32), UnsupportedDatatypeError),
    (lambda r: struct.pack_into("<h", r, 40, 4), DimensionalityError),
    (lambda r: struct.pack_into("<i", r, 0, 999), HeaderError),
    (lambda r: struct.pack_into("<h", r, 42, 0), HeaderError),
    (lambda r: r.__delitem__(slice(400, None)), TruncatedDataError),
    (lambda r: r.__delitem__(slice(200, None)), TruncatedDataError),
    (lambda r: struct.pack_into("<f", r, 108, 100.0), HeaderError),
])
def test_malformed_header_taxonomy(tmp_path, scalar, edit, exc):
    p = _corrupt(tmp_path, scalar, edit)
    with pytest.raises(exc) as info:
        read_nifti(p)
    assert isinstance(info.value, NiftiError)
    assert info.value.exit_code == 2


def test_scaled_data_cannot_be_labels(tmp_path, scalar):
    p = _corrupt(tmp_path, scalar, lambda r: struct.pack_into("<f", r, 112, 2.0))
    with pytest.raises(ValidationError):
        read_nifti(p, kind="label")


def test_fmt_six_significant_digits():
    assert fmt(0.0) == "0"
    assert fmt(-0.0) == "0"
    assert fmt(1.23456789) == "1.23457"
    assert fmt(123456789.0) == "1.23457e+08"
    assert fmt(2) == "2"


def test_cohort_csv_roundtrip_and_stability(tmp_path):
    rows = CohortTable([
        CohortRow("s1", "s1_a", 61.25, "CN", 0.0, "s1_a_img.nii"),
        CohortRow("s2", "s2_a", 77.0, "AD", 0.5, "s2_a_img.nii"),
    ])
    write_cohort_csv(rows, tmp_path / "a.csv")
    write_cohort_csv(read_cohort_csv(tmp_path / "a.csv"), tmp_path / "b.csv")
    text = (tmp_path / "a.csv").read_text()
    assert text == (tmp_path / "b.csv").read_text()
    assert text.splitlines()[0] == "subject_id,scan_id,age,group,cdr,path"
    assert rows[1].stage == "CDR0.5" and rows[0].stage == "CN"


@pytest.mark.parametrize("bad", [
    "s1,s1_a,61,XX,0,p",
    "s1,s1_a,61,CN,1,p",
    "s1,s1_a,abc,CN,0,p",
    "s1,s1_a,61,AD,0.7,p",
])
def test_cohort_csv_validation(tmp_path, bad):
    p = tmp_path / "c.csv"
    p.write_text("subject_id,scan_id,age,group,cdr,path\n" + bad + "\n")
    with pytest.raises(ValidationError):
        read_cohort_csv(p)


def test_cohort_csv_missing_column(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("subject_id,scan_id,age\n")
    with pytest.raises(ValidationError):
        read_cohort_csv(p)


def test_scores_csv_roundtrip(tmp_path):
    rows = [RegionScoreRow("s1", "ventricles", "AS", 12.3456789, 40, 0.3),
            RegionScoreRow("s1", "ventricles", "ADS", 0.01, 40, 0.3)]
    write_scores_csv(rows, tmp_path / "s.csv")
    text = (tmp_path / "s.csv").read_text()
    assert text == ("scan_id,region_name,score_kind,value,n_voxels,quantile\n"
                    "s1,ventricles,AS,12.3457,40,0.3\n"
                    "s1,ventricles,ADS,0.01,40,0.3\n")
    back = read_scores_csv(tmp_path / "s.csv")
    assert back[0].value == pytest.approx(12.3457)
    with pytest.raises(ValidationError):
        RegionScoreRow("s1", "v", "XX", 1.0, 1, 0.0)
