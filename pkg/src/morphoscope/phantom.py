"""Synthetic brain-like phantoms with known deformations.

The base anatomy is a set of soft-edged nested ellipsoids: a brain with a
grey-matter rim and a white-matter core, two lateral ventricles (labels 4 and
43) and two hippocampi (labels 17 and 53); everything else inside the brain is
label 2. A subject of a given age and disease severity is the base pulled back
through ``exp(v)`` with

    v = (age - 60) * v_aging + severity * w

where ``v_aging`` (per year) widens the ventricles and shrinks the hippocampi
and the brain, and ``w`` is a hippocampal displacement made orthogonal to
``v_aging`` at every voxel. In generated cohorts AD subjects also age faster:
they are built at ``age + aging_acceleration * severity``.

Random numbers come from numpy's Philox4x64 counter-based generator keyed by
``SeedSequence([seed, stream])``; subject ``i`` of a cohort uses stream
``i + 1`` and the anatomy texture uses stream 0.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .io import CohortRow, CohortTable, write_cohort_csv, write_nifti
from .svf import Svf, exp
from .volume import Grid3, LabelVolume, ScalarVolume, smooth, warp, warp_labels

REFERENCE_AGE = 60.0
AD_STAGES = ((0.0, 0.25), (0.5, 0.5), (1.0, 1.0), (2.0, 1.5))  # (cdr, severity)

WHOLE_BRAIN, VENTRICLE_L, VENTRICLE_R, HIPPO_L, HIPPO_R = 2, 4, 43, 17, 53

DISEASE_REACH = 1.0

INTENSITY = {"gm": 0.55, "wm": 0.85, "csf": 0.12, "hippo": 0.40}


def rng_for(seed, stream):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass(frozen=True)
class PhantomSpec:
    grid: Grid3 = field(default_factory=lambda: Grid3((64, 64, 64)))
    seed: int = 0
    noise_sigma: float = 0.005
    # fractional radial change per year
    ventricle_rate: float = 0.008
    hippocampus_rate: float = 0.0025
    brain_rate: float = 0.001
    disease_amplitude: float = 1.2
    texture_amplitude: float = 0.1
    edge_width: float = 1.5
    # extra years of apparent aging per unit disease severity in cohorts
    aging_acceleration: float = 3.0


def _ellipsoid_distance(coords, center, radii):
    """Approximate signed distance (voxels) to an axis-aligned ellipsoid surface."""
    q = np.sqrt(sum(((coords[a] - center[a]) / radii[a]) ** 2 for a in range(3)))
    return (q - 1.0) * (np.prod(radii) ** (1.0 / 3.0))


def _soft(dist, width):
    return 0.5 * (1.0 - np.tanh(dist / width))


def _layout(spec):
    n = np.array(spec.grid.dims, dtype=np.float64)
    c = (n - 1.0) / 2.0
    s = n / 64.0
    return {
        "brain": (c, np.array([25.0, 22.0, 19.0]) * s),
        "wm": (c, np.array([17.0, 15.0, 12.0]) * s),
        VENTRICLE_L: (c + np.array([-4.5, 2.0, 2.5]) * s, np.array([3.0, 7.5, 4.0]) * s),
        VENTRICLE_R: (c + np.array([4.5, 2.0, 2.5]) * s, np.array([3.0, 7.5, 4.0]) * s),
        HIPPO_L: (c + np.array([-16.0, -6.0, -9.0]) * s, np.array([3.0, 6.0, 3.0]) * s),
        HIPPO_R: (c + np.array([16.0, -6.0, -9.0]) * s, np.array([3.0, 6.0, 3.0]) * s),
    }


@lru_cache(maxsize=8)
def base_anatomy(spec=PhantomSpec()):
    """Noise-free reference-age image and its label map."""
    coords = spec.grid.coords()
    lay = _layout(spec)
    w = spec.edge_width
    d = {k: _ellipsoid_distance(coords, *v) for k, v in lay.items()}

    brain = _soft(d["brain"], w)
    wm = _soft(d["wm"], w)
    tissue = INTENSITY["gm"] + (INTENSITY["wm"] - INTENSITY["gm"]) * wm
    texture = smooth(rng_for(spec.seed, 0).standard_normal(spec.grid.dims), 2.0)
    texture *= spec.texture_amplitude / max(texture.std(), 1e-12)
    img = brain * (tissue + texture)
    for lab, value in ((VENTRICLE_L, "csf"), (VENTRICLE_R, "csf"),
                       (HIPPO_L, "hippo"), (HIPPO_R, "hippo")):
        s = _soft(d[lab], w)
        img = img * (1.0 - s) + INTENSITY[value] * s
    img = np.clip(img, 0.0, 1.0)

    labels = np.zeros(spec.grid.dims, dtype=np.int32)
    labels[d["brain"] < 0] = WHOLE_BRAIN
    for lab in (HIPPO_L, HIPPO_R, VENTRICLE_L, VENTRICLE_R):
        labels[d[lab] < 0] = lab
    return ScalarVolume(spec.grid, img), LabelVolume(spec.grid, labels)


def _radial(coords, center, radii, reach):
    """``(p - center)`` damped by a Gaussian of width ``reach * radii``."""
    r = np.stack([coords[a] - center[a] for a in range(3)])
    q2 = sum((r[a] / (reach * radii[a])) ** 2 for a in range(3))
    return r * np.exp(-0.5 * q2)


@lru_cache(maxsize=8)
def aging_field(spec=PhantomSpec()):
    """Per-year generative velocity: ventricles widen, hippocampi and brain shrink.

    Under the pull-back convention ``image = base o exp(v)`` a structure grows
    where ``v`` points towards its centre.
    """
    coords = spec.grid.coords()
    lay = _layout(spec)
    v = spec.brain_rate * _radial(coords, *lay["brain"], reach=1.6)
    for lab in (VENTRICLE_L, VENTRICLE_R):
        v -= spec.ventricle_rate * _radial(coords, *lay[lab], reach=1.4)
    for lab in (HIPPO_L, HIPPO_R):
        v += spec.hippocampus_rate * _radial(coords, *lay[lab], reach=1.4)
    return Svf.from_array(spec.grid, v, "phantom aging field (per year)")


def gram_schmidt(w, v, tiny=1e-12):
    """Remove from ``w`` its voxel-wise component along ``v``."""
    vv = (v * v).sum(axis=0)
    coef = np.where(vv > tiny, (w * v).sum(axis=0) / np.where(vv > tiny, vv, 1.0), 0.0)
    return w - coef * v


@lru_cache(maxsize=8)
def disease_field(spec=PhantomSpec()):
    """Hippocampal drift orthogonal to :func:`aging_field` at every voxel."""
    coords = spec.grid.coords()
    lay = _layout(spec)
    w = np.zeros((3,) + spec.grid.dims)
    for lab, sign in ((HIPPO_L, 1.0), (HIPPO_R, -1.0)):
        center, radii = lay[lab]
        q2 = sum(((coords[a] - center[a]) / (DISEASE_REACH * radii[a])) ** 2 for a in range(3))
        env = np.exp(-0.5 * q2)
        w[0] += sign * 0.6 * env
        w[2] += env
    w *= spec.disease_amplitude / np.sqrt((w ** 2).sum(axis=0)).max()
    w = gram_schmidt(w, aging_field(spec).data)
    return Svf.from_array(spec.grid, w, "phantom disease field")


def subject_field(spec, age, severity):
    v = (float(age) - REFERENCE_AGE) * aging_field(spec).data
    if severity:
        v = v + float(severity) * disease_field(spec).data
    return Svf.from_array(spec.grid, v, f"age={age:g} severity={severity:g}")


def generate_subject(spec=PhantomSpec(), age=REFERENCE_AGE, disease_severity=0.0,
                     stream=1, noise_sigma=None):
    """Image, labels and ground-truth generative field of one synthetic subject.

    Returns
    -------
    image : ScalarVolume
        ``base o exp(v_gt)`` plus Gaussian noise, clipped to ``[0, 1]``.
    labels : LabelVolume
        Base labels pulled back with nearest-neighbour lookup.
    v_gt : Svf
    """
    if not 55.0 <= age <= 95.0:
        raise ValueError(f"age {age} outside [55, 95]")
    if disease_severity < 0:
        raise ValueError("disease severity must be non-negative")
    sigma = spec.noise_sigma if noise_sigma is None else noise_sigma
    base, base_labels = base_anatomy(spec)
    v_gt = subject_field(spec, age, disease_severity)
    phi = exp(v_gt)
    img = warp(base, phi).data
    if sigma > 0:
        img = np.clip(img + sigma * rng_for(spec.seed, stream).standard_normal(img.shape),
                      0.0, 1.0)
    return ScalarVolume(spec.grid, img), warp_labels(base_labels, phi), v_gt


@dataclass
class Cohort:
    images: list
    labels: list
    table: CohortTable
    fields: list
    severities: list
    planted_as: list


def effective_age(spec, age, severity):
    """Age whose normal-aging deformation a cohort subject carries."""
    return float(age) + spec.aging_acceleration * float(severity)


def cohort_plan(spec, n_cn, n_ad_per_stage, age_range=(60.0, 90.0)):
    """Rows (without files) and per-subject severities, deterministic under ``seed``."""
    rng = rng_for(spec.seed, 10_000)
    rows, severities = [], []
    idx = 0
    groups = [("CN", 0.0, 0.0, n_cn)] + [("AD", cdr, sev, n_ad_per_stage)
                                          for cdr, sev in AD_STAGES]
    for group, cdr, sev, count in groups:
        for _ in range(count):
            age = float(np.round(rng.uniform(*age_range), 1))
            sid = f"sub-{idx:03d}"
            scan = f"{sid}_ses-1"
            rows.append(CohortRow(sid, scan, age, group, cdr, f"{scan}_img.nii"))
            severities.append(sev)
            idx += 1
    return CohortTable(rows), severities


def generate_cohort(spec=PhantomSpec(), n_cn=20, n_ad_per_stage=20):
    """CN subjects (severity 0) and AD subjects at CDR 0/0.5/1/2.

    Ages are drawn uniformly in [60, 90] for every group. AD severities are
    0.25, 0.5, 1.0 and 1.5 for CDR 0, 0.5, 1 and 2. An AD subject of age ``a``
    and severity ``s`` is generated at the effective age
    ``a + spec.aging_acceleration * s`` (accelerated normal aging) plus the
    disease drift ``s * w``; ``planted_as`` holds ``effective age - 60``.
    """
    if n_cn + n_ad_per_stage < 1:
        raise ValueError("cohort must contain at least one subject")
    table, severities = cohort_plan(spec, n_cn, n_ad_per_stage)
    images, labels, fields, planted = [], [], [], []
    for i, (row, sev) in enumerate(zip(table, severities)):
        eff = effective_age(spec, row.age, sev)
        img, lab, v = generate_subject(spec, eff, sev, stream=i + 1)
        images.append(img)
        labels.append(lab)
        fields.append(v)
        planted.append(eff - REFERENCE_AGE)
    return Cohort(images, labels, table, fields, severities, planted)


def write_cohort(cohort, root):
    """Emit ``{root}/{scan_id}_img.nii``, ``_lab.nii`` and ``cohort.csv``."""
    from pathlib import Path
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for row, img, lab in zip(cohort.table, cohort.images, cohort.labels):
        write_nifti(img, root / f"{row.scan_id}_img.nii")
        write_nifti(lab, root / f"{row.scan_id}_lab.nii")
    write_cohort_csv(cohort.table, root / "cohort.csv")


def random_smooth_field(grid, seed, max_norm=2.0, wavelength=(64.0, 128.0),
                        modes=6, taper=True):
    """Random velocity field built from a few long-wavelength plane waves.

    With ``taper`` the field is multiplied by a product of half-sines so that
    it vanishes on the grid faces. The result is rescaled so that its largest
    voxel norm equals ``max_norm``.
    """
    rng = rng_for(seed, 20_000)
    coords = np.stack(grid.coords())
    v = np.zeros((3,) + grid.dims)
    for c in range(3):
        for _ in range(modes):
            d = rng.standard_normal(3)
            d /= np.linalg.norm(d)
            k = 2.0 * np.pi / rng.uniform(*wavelength)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            v[c] += rng.standard_normal() * np.sin(k * np.tensordot(d, coords, 1) + phase)
    if taper:
        env = np.ones(grid.dims)
        for a, n in enumerate(grid.dims):
            env *= np.sin(np.pi * coords[a] / (n - 1))
        v *= env
    return v * (max_norm / np.sqrt((v ** 2).sum(axis=0)).max())
