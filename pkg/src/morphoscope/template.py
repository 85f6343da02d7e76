"""Age-conditioned templates by iterative unbiased averaging, and EFC.

A template for ``target_age`` is a Gaussian age-kernel weighted average of
cohort images, refined over a few outer iterations:

1. register the current template ``T`` (fixed) with every subject (moving),
   which yields ``v_i`` with ``warp(subject_i, exp(v_i)) ~ T``;
2. average the warped subjects with the kernel weights;
3. re-centre: ``T = warp(T_avg, exp(-u_bar))`` with ``u_bar`` the weighted
   mean of the ``v_i``, so that the subject fields average to zero.

Subjects are processed in sorted-id order and every reduction runs in that
order, so the result does not depend on the order the cohort was given in.
"""

import hashlib
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from ._parallel import pmap
from .errors import DegenerateInputError, ValidationError
from .io import fmt, write_rows
from .register import RegistrationConfig, register
from .svf import Svf, exp
from .volume import LabelVolume, ScalarVolume, check_grids, warp

MIN_WEIGHT = 1e-3
DEFAULT_BANDWIDTH = 2.5
VENTRICLE_LABELS = (4, 14, 15, 43)
BUILD_LOG_COLUMNS = ("iteration", "mean_u", "efc")


@dataclass(frozen=True)
class BuildLogEntry:
    iteration: int
    mean_u: float
    efc: float


@dataclass
class TemplateModel:
    ages: list
    templates: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    build_log: dict = field(default_factory=dict)

    def __post_init__(self):
        vols = list(self.templates.values()) + list(self.masks.values())
        if vols:
            check_grids(*vols)


def kernel_weights(ages, target_age, bandwidth=DEFAULT_BANDWIDTH):
    """Gaussian age-kernel weights ``exp(-(age - target)^2 / (2 bw^2))``."""
    if bandwidth <= 0:
        raise ValidationError("bandwidth must be positive")
    ages = np.asarray(ages, dtype=np.float64)
    return np.exp(-((ages - float(target_age)) ** 2) / (2.0 * float(bandwidth) ** 2))


def _normalise_cohort(cohort):
    """``[(key, volume, age)]`` sorted by key; keys default to a content hash."""
    items = []
    for entry in cohort:
        if len(entry) == 3:
            key, vol, age = entry
            key = str(key)
        elif len(entry) == 2:
            vol, age = entry
            key = hashlib.sha1(np.ascontiguousarray(vol.data).tobytes()).hexdigest()
        else:
            raise ValidationError("cohort entries must be (volume, age) or (id, volume, age)")
        items.append((key, vol, float(age)))
    items.sort(key=lambda t: (t[0], t[2]))
    return items


def _weighted_mean(arrays, weights):
    acc = np.zeros_like(arrays[0], dtype=np.float64)
    for a, w in zip(arrays, weights):
        acc += w * a
    return acc / float(np.sum(weights))


def _register_one(pair, cfg, template):
    _, vol = pair
    return register(template, vol, cfg).svf.data


def build_template(cohort, target_age, bandwidth=DEFAULT_BANDWIDTH, cfg=None,
                   outer_iters=3, jobs=1, build_log=None):
    """Kernel-weighted unbiased template at ``target_age``.

    Parameters
    ----------
    cohort : sequence
        ``(volume, age)`` or ``(id, volume, age)`` tuples on one grid.
    target_age, bandwidth : float
        Kernel centre and width in years. Subjects with weight below 1e-3 are
        dropped.
    cfg : RegistrationConfig, optional
    outer_iters : int
        Register/average/re-centre rounds.
    jobs : int
        Worker processes for the per-subject registrations.
    build_log : list, optional
        Receives one :class:`BuildLogEntry` per outer iteration: the mean
        voxel norm of ``u_bar`` before re-centring and the EFC of the result.

    Returns
    -------
    ScalarVolume
    """
    cfg = cfg or RegistrationConfig()
    if outer_iters < 0:
        raise ValidationError("outer_iters must be non-negative")
    items = _normalise_cohort(cohort)
    if not items:
        raise ValidationError("empty cohort")
    weights = kernel_weights([a for _, _, a in items], target_age, bandwidth)
    keep = weights > MIN_WEIGHT
    items = [it for it, k in zip(items, keep) if k]
    weights = weights[keep]
    if not items:
        raise ValidationError(f"no subject has kernel weight above {MIN_WEIGHT} "
                              f"at age {target_age:g}")
    vols = [v for _, v, _ in items]
    grid = check_grids(*vols)

    template = ScalarVolume(grid, _weighted_mean([v.data for v in vols], weights))
    for it in range(outer_iters):
        fields = pmap(partial(_register_one, cfg=cfg, template=template),
                      [(k, v) for k, v, _ in items], jobs)
        warped = [warp(v, exp(Svf.from_array(grid, f))).data for v, f in zip(vols, fields)]
        t_avg = ScalarVolume(grid, _weighted_mean(warped, weights))
        u_bar = _weighted_mean(fields, weights)
        mean_u = float(np.sqrt((u_bar ** 2).sum(axis=0)).mean())
        template = warp(t_avg, exp(Svf.from_array(grid, -u_bar)))
        if build_log is not None:
            build_log.append(BuildLogEntry(it + 1, mean_u, efc(template)))
    return template


def build_templates(cohort, ages=(60, 90), bandwidth=DEFAULT_BANDWIDTH, cfg=None,
                    outer_iters=3, masks=None, jobs=1):
    """One template per age, collected in a :class:`TemplateModel`."""
    model = TemplateModel(ages=list(ages), masks=dict(masks or {}))
    for age in ages:
        log = []
        model.templates[age] = build_template(cohort, age, bandwidth, cfg, outer_iters,
                                              jobs, log)
        model.build_log[age] = log
    check_grids(*model.templates.values(), *model.masks.values())
    return model


def write_build_log(entries, path):
    write_rows(path, BUILD_LOG_COLUMNS,
               ((str(e.iteration), fmt(e.mean_u), fmt(e.efc)) for e in entries))


def _mask_array(vol, mask):
    if mask is None:
        return np.ones(vol.grid.dims, dtype=bool)
    if isinstance(mask, LabelVolume):
        check_grids(vol, mask)
        return mask.data > 0
    m = np.asarray(mask, dtype=bool)
    if m.shape != vol.grid.dims:
        raise ValidationError("mask shape does not match the volume")
    return m


def efc(vol, mask=None):
    """Normalised entropy focus criterion; 0 for one bright voxel, 1 for uniform.

    ``E = -sum (B_i/B_max) ln(B_i/B_max)`` over the masked voxels with
    ``B_max = sqrt(sum B_i^2)``, divided by ``sqrt(N) ln sqrt(N)``.
    """
    b = vol.data[_mask_array(vol, mask)].astype(np.float64)
    if b.size == 0:
        raise ValidationError("empty mask")
    if np.any(b < 0):
        raise ValidationError("efc needs non-negative intensities")
    b_max = float(np.sqrt((b * b).sum()))
    if b_max == 0.0:
        raise DegenerateInputError("efc of an all-zero image")
    n = b.size
    if n == 1:
        return 0.0
    r = b[b > 0] / b_max
    e = float(-(r * np.log(r)).sum())
    e_max = float(np.sqrt(n) * np.log(np.sqrt(n)))
    return e / e_max


def ventricle_edge_map(seg_young, seg_old, ventricle_labels=VENTRICLE_LABELS):
    """Voxels that are ventricle in ``seg_old`` but not in ``seg_young``."""
    check_grids(seg_young, seg_old)
    labels = list(ventricle_labels)
    edge = seg_old.mask(labels) & ~seg_young.mask(labels)
    return LabelVolume(seg_young.grid, edge.astype(np.int32))
