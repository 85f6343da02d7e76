"""NIfTI-1 volumes and the CSV tables used between pipeline stages.

Only the uncompressed, single-frame, 3D subset of NIfTI-1 is handled. The
reader honours ``vox_offset`` and the ``scl_slope``/``scl_inter`` scaling and
takes voxel spacing from ``pixdim``; orientation matrices are parsed but not
applied (inputs are expected to be affinely pre-aligned).

All CSV files are UTF-8, comma separated, ``\\n`` terminated, and every float
is written with six significant digits so reruns are byte-stable.
"""

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DimensionalityError,
    HeaderError,
    TruncatedDataError,
    UnsupportedDatatypeError,
    ValidationError,
)
from .volume import Grid3, LabelVolume, ScalarVolume, VectorField3

HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352
INTENT_LABEL = 1002

# NIfTI datatype code -> numpy dtype (without byte order)
DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
INTEGER_CODES = (2, 4, 8)

FIELD_SUFFIXES = ("_x", "_y", "_z")


def fmt(value):
    """Six-significant-digit float formatting shared by every CSV writer."""
    value = float(value)
    if value == 0.0:
        return "0"
    return f"{value:.6g}"


@dataclass(frozen=True)
class NiftiHeader:
    dims: tuple
    pixdim: tuple
    datatype: int
    bitpix: int
    vox_offset: float
    scl_slope: float
    scl_inter: float
    intent_code: int
    qform_code: int
    sform_code: int
    qoffset: tuple
    srow: tuple
    magic: bytes
    endian: str


def _f32(x):
    """Shortest decimal that rounds to the stored float32, so 1.2 reads back as 1.2."""
    return float(str(np.float32(x)))


def parse_header(raw):
    """Parse the first 348 bytes of a NIfTI-1 file into a :class:`NiftiHeader`."""
    if len(raw) < HEADER_SIZE:
        raise TruncatedDataError(f"header has {len(raw)} bytes, expected {HEADER_SIZE}")
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", raw[0:4])[0] == HEADER_SIZE:
            break
    else:
        raise HeaderError("sizeof_hdr is not 348 in either byte order")

    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagicError(f"bad magic {magic!r}")

    def unpack(fmt_, offset):
        return struct.unpack_from(endian + fmt_, raw, offset)

    dim = unpack("8h", 40)
    intent_code, datatype, bitpix = unpack("3h", 68)
    pixdim = unpack("8f", 76)
    vox_offset, scl_slope, scl_inter = unpack("3f", 108)
    qform_code, sform_code = unpack("2h", 252)
    qoffset = unpack("3f", 268)
    srow = unpack("12f", 280)

    if dim[0] != 3:
        raise DimensionalityError(f"expected a 3D volume (dim[0]=3), got dim[0]={dim[0]}")
    dims = tuple(int(d) for d in dim[1:4])
    if min(dims) < 1:
        raise HeaderError(f"non-positive dimension in {dims}")
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"datatype code {datatype} not supported")
    return NiftiHeader(
        dims=dims, pixdim=tuple(_f32(p) for p in pixdim[1:4]), datatype=datatype,
        bitpix=bitpix, vox_offset=float(vox_offset), scl_slope=float(scl_slope),
        scl_inter=float(scl_inter), intent_code=intent_code, qform_code=qform_code,
        sform_code=sform_code, qoffset=tuple(_f32(q) for q in qoffset), srow=tuple(srow),
        magic=magic, endian=endian,
    )


def _data_source(path, header):
    if header.magic == b"ni1\x00":
        img = Path(path).with_suffix(".img")
        return img.read_bytes(), int(header.vox_offset)
    return Path(path).read_bytes(), int(header.vox_offset)


def read_nifti(path, kind="auto"):
    """Read a volume.

    Parameters
    ----------
    path : str or Path
    kind : {"auto", "scalar", "label"}
        ``auto`` returns a :class:`LabelVolume` for unscaled integer data whose
        intent code is NIFTI_INTENT_LABEL, a :class:`ScalarVolume` otherwise.
    """
    path = Path(path)
    with path.open("rb") as fh:
        raw = fh.read(HEADER_SIZE)
    header = parse_header(raw)

    buf, offset = _data_source(path, header)
    if header.magic == b"n+1\x00" and offset < HEADER_SIZE:
        raise HeaderError(f"vox_offset {offset} points inside the header")
    dtype = DATATYPES[header.datatype].newbyteorder(header.endian)
    count = header.dims[0] * header.dims[1] * header.dims[2]
    nbytes = count * dtype.itemsize
    if len(buf) < offset + nbytes:
        raise TruncatedDataError(
            f"{path}: expected {nbytes} data bytes at offset {offset}, "
            f"file has {max(0, len(buf) - offset)}")
    flat = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)

    spacing = tuple(abs(p) if p != 0 else 1.0 for p in header.pixdim)
    grid = Grid3(header.dims, spacing, header.qoffset if header.qform_code > 0 else (0.0, 0.0, 0.0))
    scaled = header.scl_slope != 0 and not (header.scl_slope == 1 and header.scl_inter == 0)

    if kind == "auto":
        kind = ("label" if header.datatype in INTEGER_CODES and not scaled
                and header.intent_code == INTENT_LABEL else "scalar")
    if kind == "label":
        if scaled:
            raise ValidationError(f"{path}: scaled data cannot be read as labels")
        return LabelVolume(grid, flat.astype(np.int64).reshape(header.dims, order="F"))
    if kind != "scalar":
        raise ValueError(f"unknown kind {kind!r}")
    values = flat.astype(np.float64)
    if header.scl_slope != 0:
        values = header.scl_slope * values + header.scl_inter
    return ScalarVolume(grid, values.reshape(header.dims, order="F"))


def build_header(grid, datatype, intent_code=0, descrip=b"morphoscope"):
    raw = bytearray(DEFAULT_VOX_OFFSET)
    struct.pack_into("<i", raw, 0, HEADER_SIZE)
    struct.pack_into("<c", raw, 38, b"r")
    struct.pack_into("<8h", raw, 40, 3, *grid.dims, 1, 1, 1, 1)
    bitpix = DATATYPES[datatype].itemsize * 8
    struct.pack_into("<3h", raw, 68, intent_code, datatype, bitpix)
    struct.pack_into("<8f", raw, 76, 1.0, *grid.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", raw, 108, float(DEFAULT_VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", raw, 123, 2)  # xyzt_units: mm
    struct.pack_into("<80s", raw, 148, descrip[:79])
    struct.pack_into("<2h", raw, 252, 1, 0)
    struct.pack_into("<3f", raw, 268, *grid.origin)
    struct.pack_into("<4s", raw, 344, b"n+1\x00")
    return bytes(raw)


def write_nifti(vol, path):
    """Write a scalar volume as float32 or a label volume as int32."""
    if isinstance(vol, LabelVolume):
        header = build_header(vol.grid, 8, INTENT_LABEL)
        payload = vol.data.astype("<i4").tobytes(order="F")
    else:
        header = build_header(vol.grid, 16)
        payload = vol.data.astype("<f4").tobytes(order="F")
    with Path(path).open("wb") as fh:
        fh.write(header)
        fh.write(payload)


def field_paths(stem):
    stem = str(stem)
    return [Path(stem + s + ".nii") for s in FIELD_SUFFIXES]


def write_field(field, stem):
    """Persist a vector field as ``{stem}_x.nii``, ``_y`` and ``_z``."""
    for c, path in enumerate(field_paths(stem)):
        write_nifti(ScalarVolume(field.grid, field.data[c]), path)


def read_field(stem, kind="velocity"):
    vols = [read_nifti(p, kind="scalar") for p in field_paths(stem)]
    grid = vols[0].grid
    for v in vols[1:]:
        if v.grid != grid:
            raise ValidationError(f"component grids differ for {stem}")
    return VectorField3(grid, np.stack([v.data for v in vols]), kind)


# --------------------------------------------------------------------- CSV

COHORT_COLUMNS = ("subject_id", "scan_id", "age", "group", "cdr", "path")
SCORE_COLUMNS = ("scan_id", "region_name", "score_kind", "value", "n_voxels", "quantile")
GROUPS = ("CN", "AD")
CDR_VALUES = (0.0, 0.5, 1.0, 2.0)


@dataclass(frozen=True)
class CohortRow:
    subject_id: str
    scan_id: str
    age: float
    group: str
    cdr: float
    path: str

    @property
    def stage(self):
        """Analysis group label: ``CN`` or ``CDR<cdr>`` for AD scans."""
        return "CN" if self.group == "CN" else f"CDR{self.cdr:g}"


class CohortTable(list):
    """Validated list of :class:`CohortRow`."""

    def __init__(self, rows=()):
        super().__init__(rows)
        self.validate()

    def validate(self):
        seen = set()
        for row in self:
            key = (row.subject_id, row.scan_id)
            if key in seen:
                raise ValidationError(f"duplicate (subject_id, scan_id) {key}")
            seen.add(key)
            if not row.age > 0:
                raise ValidationError(f"{row.scan_id}: age must be positive")
            if row.group not in GROUPS:
                raise ValidationError(f"{row.scan_id}: group must be CN or AD, got {row.group!r}")
            if row.cdr not in CDR_VALUES:
                raise ValidationError(f"{row.scan_id}: cdr must be one of {CDR_VALUES}")
            if row.group == "CN" and row.cdr != 0:
                raise ValidationError(f"{row.scan_id}: CN scans must have cdr = 0")

    def by_scan(self):
        return {row.scan_id: row for row in self}


def _check_header(header, expected, path):
    missing = [c for c in expected if c not in (header or [])]
    if missing:
        raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")


def _parse_float(text, what, where):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ValidationError(f"{where}: cannot parse {what} {text!r}") from None
    if not np.isfinite(value):
        raise ValidationError(f"{where}: {what} must be finite")
    return value


def read_cohort_csv(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, COHORT_COLUMNS, path)
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            rows.append(CohortRow(
                subject_id=rec["subject_id"], scan_id=rec["scan_id"],
                age=_parse_float(rec["age"], "age", where),
                group=rec["group"].strip(),
                cdr=_parse_float(rec["cdr"], "cdr", where),
                path=rec["path"],
            ))
    return CohortTable(rows)


def write_rows(path, columns, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def write_cohort_csv(table, path):
    write_rows(path, COHORT_COLUMNS, (
        (r.subject_id, r.scan_id, fmt(r.age), r.group, fmt(r.cdr), r.path) for r in table))


@dataclass(frozen=True)
class RegionScoreRow:
    scan_id: str
    region_name: str
    score_kind: str
    value: float
    n_voxels: int
    quantile: float

    def __post_init__(self):
        if self.score_kind not in ("AS", "ADS"):
            raise ValidationError(f"score_kind must be AS or ADS, got {self.score_kind!r}")
        if self.n_voxels <= 0:
            raise ValidationError("n_voxels must be positive")
        if not 0.0 <= self.quantile <= 0.9 + 1e-12:
            raise ValidationError(f"quantile {self.quantile} outside [0, 0.9]")


def write_scores_csv(rows, path):
    write_rows(path, SCORE_COLUMNS, (
        (r.scan_id, r.region_name, r.score_kind, fmt(r.value), str(int(r.n_voxels)),
         fmt(r.quantile)) for r in rows))


def read_scores_csv(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, SCORE_COLUMNS, path)
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            try:
                n_vox = int(rec["n_voxels"])
            except ValueError:
                raise ValidationError(f"{where}: bad n_voxels {rec['n_voxels']!r}") from None
            rows.append(RegionScoreRow(
                scan_id=rec["scan_id"], region_name=rec["region_name"],
                score_kind=rec["score_kind"],
                value=_parse_float(rec["value"], "value", where), n_voxels=n_vox,
                quantile=_parse_float(rec["quantile"], "quantile", where),
            ))
    return rows
