"""Aging score (AS) and aging-disentangled score (ADS).

With ``v0`` the one-year normal-aging velocity on the reference template grid
and ``v`` a subject's velocity on the same grid, at every voxel

    AS(p)  = <v(p), v0(p)> / |v0(p)|^2
    ADS(p) = |v(p) - AS(p) v0(p)|

so ``v = AS v0 + r`` with ``r`` orthogonal to ``v0``. Voxels where ``v0``
vanishes have no score. Regional scores are unweighted means over the region
voxels whose ``|v0|`` exceeds the region's ``q``-quantile.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .io import RegionScoreRow
from .register import RegistrationConfig, register
from .svf import Svf
from .volume import LabelVolume, ScalarVolume, check_grids

QUANTILE_GRID = tuple(round(0.1 * i, 1) for i in range(10))
VENTRICLES = frozenset({4, 14, 15, 43})
HIPPOCAMPI_AMYGDALA = frozenset({17, 53, 18, 54})


@dataclass(frozen=True, eq=False)
class AgingField:
    v0: Svf
    gap_years: float
    source: tuple = ()

    def __post_init__(self):
        if not self.gap_years > 0:
            raise ValidationError("gap_years must be positive")


@dataclass(frozen=True, eq=False)
class RegionSpec:
    """A named analysis region: a label set, or an explicit mask.

    ``labels=None`` without a mask means every non-zero label.
    """

    name: str
    labels: frozenset = None
    mask: object = None

    def __post_init__(self):
        if self.labels is not None:
            object.__setattr__(self, "labels", frozenset(int(x) for x in self.labels))
            if not self.labels:
                raise ValidationError(f"region {self.name!r}: empty label set")

    def resolve(self, labels):
        """Boolean mask of this region on the grid of ``labels``."""
        if self.mask is not None:
            if isinstance(self.mask, LabelVolume):
                check_grids(self.mask, labels)
                return self.mask.data > 0
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != labels.grid.dims:
                raise ValidationError(f"region {self.name!r}: mask shape mismatch")
            return m
        if self.labels is None:
            return labels.data > 0
        return labels.mask(self.labels)


def default_regions(ventricle_edges=None):
    """Ventricles, hippocampi+amygdalae, whole brain, and the edge map if given."""
    regions = [
        RegionSpec("ventricles", VENTRICLES),
        RegionSpec("hippocampi_amygdala", HIPPOCAMPI_AMYGDALA),
        RegionSpec("whole_brain"),
    ]
    if ventricle_edges is not None:
        regions.append(RegionSpec("ventricle_edges", mask=ventricle_edges))
    return regions


@dataclass(eq=False)
class VoxelScores:
    as_map: ScalarVolume
    ads_map: ScalarVolume
    retained: np.ndarray
    v0_norm: np.ndarray = field(default=None, repr=False)


def one_year_field(T_young, T_old, young_age, old_age, cfg=None, mask=None):
    """``register(fixed=T_young, moving=T_old).svf / (old_age - young_age)``."""
    gap = float(old_age) - float(young_age)
    if not gap > 0:
        raise ValidationError("old_age must exceed young_age")
    check_grids(T_young, T_old)
    res = register(T_young, T_old, cfg or RegistrationConfig(), mask=mask)
    v0 = Svf.from_array(T_young.grid, res.svf.data / gap,
                        f"one-year aging field from ages {young_age:g}->{old_age:g}")
    return AgingField(v0, gap, (float(young_age), float(old_age)))


def voxel_scores(v_subject, aging):
    """Per-voxel AS and ADS of ``v_subject`` against ``aging.v0``."""
    check_grids(v_subject.field, aging.v0.field)
    v = v_subject.data
    v0 = aging.v0.data
    nn = (v0 * v0).sum(axis=0)
    ok = nn > 0
    as_map = np.where(ok, (v * v0).sum(axis=0) / np.where(ok, nn, 1.0), 0.0)
    resid = v - as_map[None] * v0
    ads_map = np.where(ok, np.sqrt((resid * resid).sum(axis=0)), 0.0)
    grid = v_subject.grid
    return VoxelScores(ScalarVolume(grid, as_map), ScalarVolume(grid, ads_map), ok,
                       np.sqrt(nn))


def quantile_threshold(norm_map, region_mask, q):
    """Region voxels whose ``|v0|`` lies strictly above the region's q-quantile.

    The quantile uses linear interpolation of the sorted norms of the region
    voxels with non-zero ``|v0|``; ``q = 0`` keeps all of them.
    """
    if not 0.0 <= q <= 0.9 + 1e-12:
        raise ValidationError(f"quantile {q} outside [0, 0.9]")
    norm = norm_map.data if isinstance(norm_map, ScalarVolume) else np.asarray(norm_map)
    region = np.asarray(region_mask, dtype=bool)
    if region.shape != norm.shape:
        raise ValidationError("region mask shape does not match the norm map")
    if not region.any():
        raise ValidationError("empty region")
    candidates = region & (norm > 0)
    if q == 0 or not candidates.any():
        return candidates
    t = float(np.quantile(norm[candidates], q))
    return candidates & (norm > t)


def regional_score(vs, region, labels, q, scan_id=""):
    """Mean voxel AS and ADS over the retained voxels of ``region``.

    Returns
    -------
    (RegionScoreRow, RegionScoreRow)
        The AS row and the ADS row.
    """
    check_grids(vs.as_map, labels)
    region_mask = region.resolve(labels)
    if not region_mask.any():
        raise ValidationError(f"region {region.name!r} is empty")
    kept = quantile_threshold(vs.v0_norm, region_mask, q) & vs.retained
    n = int(kept.sum())
    if n == 0:
        raise ValidationError(f"region {region.name!r}: no voxel retained at q={q:g}")
    as_val = float(vs.as_map.data[kept].mean())
    ads_val = float(vs.ads_map.data[kept].mean())
    return (RegionScoreRow(scan_id, region.name, "AS", as_val, n, float(q)),
            RegionScoreRow(scan_id, region.name, "ADS", ads_val, n, float(q)))


def score_subject(v_subject, aging, labels, regions=None, quantiles=QUANTILE_GRID,
                  scan_id=""):
    """All (region, quantile) AS and ADS rows of one subject, in a fixed order."""
    vs = voxel_scores(v_subject, aging)
    rows = []
    for region in regions or default_regions():
        for q in quantiles:
            rows.extend(regional_score(vs, region, labels, q, scan_id))
    return rows
