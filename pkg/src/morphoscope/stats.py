"""Cohort statistics: AS-vs-age fits, quantile selection, group comparisons.

Group comparisons use Student's pooled-variance t-test by default (Welch with
``welch=True``), Bonferroni correction over the pairwise tests of one region
and score kind, and Cohen's d with a pooled standard deviation:

    d = (mean(a) - mean(b)) / s_pooled

so d is negative when the second group has the larger mean.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import stats as _st

from .errors import DegenerateInputError, ValidationError
from .io import fmt, write_rows

MIN_TEST_N = 5
BAND_EDGES = ((0.9, "very_large"), (0.65, "large"), (0.35, "medium"))
STAR_LEVELS = ((0.0001, "****"), (0.001, "***"), (0.01, "**"), (0.05, "*"))
COMPARISON_COLUMNS = ("region", "score_kind", "pair", "t", "p_raw", "p_bonf", "stars", "d",
                      "band")
FIT_COLUMNS = ("region", "q", "slope", "intercept", "r2", "p")
GROUP_COLUMNS = ("region", "score_kind", "group", "n", "mean", "sd", "tested")


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    r_squared: float
    p_value: float
    n: int


@dataclass(frozen=True)
class GroupComparison:
    pair: tuple
    t_stat: float
    p_raw: float
    p_bonferroni: float
    cohens_d: float
    band: str

    @property
    def stars(self):
        return stars(self.p_bonferroni)


def _as_sample(x, what, min_n):
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size < min_n:
        raise ValidationError(f"{what} needs at least {min_n} values, got {a.size}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{what} contains non-finite values")
    return a


def fit_linear(x, y):
    """Ordinary least squares ``y = slope x + intercept``.

    The slope p-value is two-sided with ``n - 2`` degrees of freedom. A
    constant ``y`` gives ``R^2 = 0`` and ``p = 1``.
    """
    x = _as_sample(x, "x", 3)
    y = _as_sample(y, "y", 3)
    if x.size != y.size:
        raise ValidationError("x and y differ in length")
    n = x.size
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx <= 0.0 or np.ptp(x) == 0.0:
        raise DegenerateInputError("x values are all equal")
    dy = y - y.mean()
    slope = float(dx @ dy) / sxx
    intercept = float(y.mean() - slope * x.mean())
    ss_tot = float(dy @ dy)
    if ss_tot == 0.0:
        return FitResult(slope, intercept, 0.0, 1.0, n)
    resid = dy - slope * dx
    ss_res = float(resid @ resid)
    r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    dof = n - 2
    if dof == 0 or ss_res == 0.0:
        p = 0.0 if slope != 0.0 else 1.0
        return FitResult(slope, intercept, r2, p, n)
    se = np.sqrt(ss_res / dof / sxx)
    p = float(2.0 * _st.t.sf(abs(slope / se), dof))
    return FitResult(slope, intercept, r2, p, n)


def select_quantile(per_q_scores):
    """``(q*, fit)`` maximising R^2 of the AS-vs-age fit; ties go to the smaller q."""
    if not per_q_scores:
        raise ValidationError("no quantiles to select from")
    best = None
    for q in sorted(per_q_scores):
        if not 0.0 <= q <= 0.9 + 1e-12:
            raise ValidationError(f"quantile {q} outside [0, 0.9]")
        ages, values = per_q_scores[q]
        fit = fit_linear(ages, values)
        if best is None or fit.r_squared > best[1].r_squared:
            best = (q, fit)
    return best


def t_test_ind(a, b, welch=False):
    """Two-sided independent two-sample t-test.

    Returns
    -------
    (t, p) : (float, float)
        Zero variance in both samples gives ``t = 0, p = 1`` for equal means
        and ``t = +-inf, p = 0`` otherwise.
    """
    a = _as_sample(a, "first sample", 2)
    b = _as_sample(b, "second sample", 2)
    na, nb = a.size, b.size
    diff = float(a.mean() - b.mean())
    va, vb = float(a.var(ddof=1)), float(b.var(ddof=1))
    if welch:
        se2 = va / na + vb / nb
        dof = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1)) if se2 > 0 else 1.0
    else:
        dof = na + nb - 2
        sp2 = ((na - 1) * va + (nb - 1) * vb) / dof
        se2 = sp2 * (1.0 / na + 1.0 / nb)
    if se2 <= 0.0:
        if diff == 0.0:
            return 0.0, 1.0
        return float(np.copysign(np.inf, diff)), 0.0
    t = diff / np.sqrt(se2)
    # two-sided tail via the regularised incomplete beta function
    p = float(_st.t.sf(abs(t), dof) * 2.0)
    return float(t), min(1.0, p)


def bonferroni(p, m):
    """``min(1, p m)``."""
    if m < 1:
        raise ValidationError("m must be at least 1")
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"p-value {p} outside [0, 1]")
    return min(1.0, float(p) * int(m))


def cohens_d(a, b):
    """Cohen's d with the pooled standard deviation."""
    a = _as_sample(a, "first sample", 2)
    b = _as_sample(b, "second sample", 2)
    na, nb = a.size, b.size
    sp2 = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    if sp2 <= 0.0:
        raise DegenerateInputError("zero pooled variance")
    return float((a.mean() - b.mean()) / np.sqrt(sp2))


def effect_band(d):
    """``none`` / ``medium`` / ``large`` / ``very_large`` from |d|, left-closed bands."""
    ad = abs(float(d))
    for edge, name in BAND_EDGES:
        if ad >= edge:
            return name
    return "none"


def stars(p):
    """Significance marker: ``****`` p <= 1e-4 down to ``ns`` for p > 0.05."""
    for level, mark in STAR_LEVELS:
        if p <= level:
            return mark
    return "ns"


def ancova_adjust(scores, ages, groups, reference_group):
    """Remove the common age slope and centre the reference group at 0.

    Fits ``score = mu_g + beta age`` by least squares and returns
    ``score - beta (age - mean(age))`` minus the reference group's mean of
    that quantity.
    """
    y = np.asarray(scores, dtype=np.float64).ravel()
    x = np.asarray(ages, dtype=np.float64).ravel()
    g = np.asarray([str(v) for v in groups])
    if not y.size == x.size == g.size:
        raise ValidationError("scores, ages and groups differ in length")
    levels = sorted(set(g.tolist()))
    if str(reference_group) not in levels:
        raise ValidationError(f"reference group {reference_group!r} is empty")
    design = np.column_stack([(g == lv).astype(np.float64) for lv in levels] + [x])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise DegenerateInputError("rank-deficient ANCOVA design (no age variation within groups)")
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    beta = float(coef[-1])
    adjusted = y - beta * (x - x.mean())
    return adjusted - adjusted[g == str(reference_group)].mean()


def compare_groups(samples, order=None, welch=False, min_n=MIN_TEST_N):
    """Pairwise tests between every two groups with at least ``min_n`` members.

    Parameters
    ----------
    samples : dict
        Group name to values.
    order : sequence, optional
        Group order; pairs are ``(order[i], order[j])`` with ``i < j``.

    Returns
    -------
    list of GroupComparison
        Bonferroni ``m`` is the number of pairs tested.
    """
    order = list(order) if order is not None else sorted(samples)
    tested = [g for g in order if g in samples and len(samples[g]) >= min_n]
    pairs = list(combinations(tested, 2))
    out = []
    for ga, gb in pairs:
        a, b = samples[ga], samples[gb]
        t, p = t_test_ind(a, b, welch=welch)
        try:
            d = cohens_d(a, b)
        except DegenerateInputError:
            d = float("nan")
        band = "none" if np.isnan(d) else effect_band(d)
        out.append(GroupComparison((ga, gb), t, p, bonferroni(p, len(pairs)), d, band))
    return out


def describe_groups(samples, order=None, min_n=MIN_TEST_N):
    """``[(group, n, mean, sd, tested)]``; sd is NaN for single-member groups."""
    order = list(order) if order is not None else sorted(samples)
    rows = []
    for grp in order:
        if grp not in samples:
            continue
        v = np.asarray(samples[grp], dtype=np.float64)
        sd = float(v.std(ddof=1)) if v.size > 1 else float("nan")
        mean = float(v.mean()) if v.size else float("nan")
        rows.append((grp, int(v.size), mean, sd, v.size >= min_n))
    return rows


def pair_label(pair):
    return f"{pair[0]} vs {pair[1]}"


def write_comparisons_csv(entries, path):
    """``entries``: iterable of ``(region, score_kind, GroupComparison)``."""
    write_rows(path, COMPARISON_COLUMNS, (
        (region, kind, pair_label(c.pair), fmt(c.t_stat), fmt(c.p_raw), fmt(c.p_bonferroni),
         c.stars, fmt(c.cohens_d), c.band)
        for region, kind, c in entries))


def write_fits_csv(entries, path):
    """``entries``: iterable of ``(region, q, FitResult)``."""
    write_rows(path, FIT_COLUMNS, (
        (region, fmt(q), fmt(f.slope), fmt(f.intercept), fmt(f.r_squared), fmt(f.p_value))
        for region, q, f in entries))


def write_groups_csv(entries, path):
    """``entries``: iterable of ``(region, score_kind, describe_groups row)``."""
    write_rows(path, GROUP_COLUMNS, (
        (region, kind, grp, str(n), fmt(mean), fmt(sd), "yes" if tested else "no")
        for region, kind, (grp, n, mean, sd, tested) in entries))
