"""Pairwise diffeomorphic registration with a stationary velocity field.

The energy minimised over the velocity ``v`` (defined on the fixed grid) is

    E(v) = 1 - lncc(fixed, moving o exp(v)) + regularizer(exp(v) - Id)

using coarse-to-fine gradient descent. Each iteration computes the LNCC
gradient with respect to the warped image, multiplies it by the moving-image
gradient sampled through the current transform, adds the regulariser
gradient, smooths the sum with a Gaussian and takes a normalised step. A step
is accepted only if the energy decreases and the Jacobian determinant of
``exp(v)`` stays positive; otherwise the step length is halved.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ValidationError
from .svf import Svf, exp_displacement
from .volume import (
    check_grids,
    downsample,
    gradient_array,
    grid_coords,
    smooth_field,
    upsample_field,
)

log = logging.getLogger(__name__)

VARIANCE_EPS = 1e-12
STEP_NORM_QUANTILE = 0.99


@dataclass(frozen=True)
class RegistrationConfig:
    lncc_window: int = 9
    lambda2: float = 1.0
    lambda3: float = 0.01
    pyramid_levels: int = 3
    iters_per_level: int = 100
    step_size: float = 0.1
    smooth_update_sigma: float = 1.0
    convergence_tol: float = 1e-4

    def __post_init__(self):
        if self.lncc_window < 1 or self.lncc_window % 2 == 0:
            raise ValidationError("lncc_window must be a positive odd integer")
        if self.lambda2 < 0 or self.lambda3 < 0:
            raise ValidationError("regularisation weights must be non-negative")
        if self.pyramid_levels < 1 or self.iters_per_level < 1:
            raise ValidationError("pyramid_levels and iters_per_level must be >= 1")
        if self.step_size <= 0 or self.smooth_update_sigma <= 0:
            raise ValidationError("step_size and smooth_update_sigma must be positive")
        if self.convergence_tol < 0:
            raise ValidationError("convergence_tol must be non-negative")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown registration option(s): {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)


@dataclass(eq=False)
class RegistrationResult:
    svf: Svf
    final_energy: float
    energy_trace: list = field(default_factory=list)
    trace_levels: list = field(default_factory=list)
    min_jacobian: float = 1.0


# ------------------------------------------------------------------ LNCC

class _LnccState:
    """Window statistics of a fixed/warped pair, kept for the gradient."""

    __slots__ = ("value", "A", "B", "C", "norm", "I", "J", "radius")


class _FixedStats:
    """Window sums that depend only on the fixed image."""

    def __init__(self, I, radius, mask=None):
        box = _kernels.box_sum
        self.radius = radius
        self.I = I - I.mean()
        self.n = box(np.ones_like(I), radius)
        self.sI = box(self.I, radius)
        self.sII = box(self.I * self.I, radius)
        self.mask = np.ones(I.shape, dtype=bool) if mask is None else mask


def _lncc_state(fx, J):
    # both images are centred globally: correlation is unchanged, cancellation is reduced
    J = J - J.mean()
    box = _kernels.box_sum
    r = fx.radius
    sJ, sJJ, sIJ = box(J, r), box(J * J, r), box(fx.I * J, r)
    cc_sum, norm, A, B, C = _kernels.lncc_terms(fx.n, fx.sI, sJ, fx.sII, sJJ, sIJ,
                                                VARIANCE_EPS, fx.mask)
    st = _LnccState()
    st.value = cc_sum / norm if norm else 0.0
    st.norm = norm
    st.I, st.J, st.radius = fx.I, J, r
    st.A, st.B, st.C = A, B, C
    return st


def lncc(a, b, window):
    """Mean squared local correlation of two images over a cubic window.

    Voxels where both local variances fall below ``1e-12`` are left out of
    the mean; voxels where only one does count as zero correlation.
    """
    check_grids(a, b)
    if window < 1 or window % 2 == 0:
        raise ValidationError("window must be a positive odd integer")
    return _lncc_state(_FixedStats(a.data, window // 2), b.data).value


def _lncc_gradient(st):
    """d(1 - lncc)/dJ at every voxel."""
    if st.norm == 0:
        return np.zeros_like(st.J)
    box = _kernels.box_sum
    r = st.radius
    g = box(st.A, r) * st.I - box(st.B, r) * st.J - box(st.C, r)
    return -g / st.norm


# --------------------------------------------------------- regulariser

def _regularizer_value(u, lambda2, lambda3):
    n = u[0].size
    grad_sq, u_sq, _ = _kernels.deformation_stats(u)
    return (lambda2 * grad_sq + lambda3 * u_sq) / n


def regularizer(u, cfg):
    """``lambda2 * mean |grad u|^2 + lambda3 * mean |u|^2`` of a displacement."""
    data = u.displacement() if hasattr(u, "displacement") else np.asarray(u)
    return _regularizer_value(data, cfg.lambda2, cfg.lambda3)


def _regularizer_gradient(u, lambda2, lambda3):
    n = u[0].size
    out = np.empty_like(u)
    for c in range(3):
        out[c] = (2.0 / n) * (lambda3 * u[c] - lambda2 * _kernels.laplacian(u[c]))
    return out


# ------------------------------------------------------------ optimiser

class _Level:
    """Fixed/moving pair at one pyramid resolution."""

    def __init__(self, fixed, moving, mask, cfg):
        self.fixed = fixed
        self.moving = moving
        self.mask = mask
        self.cfg = cfg
        self.radius = cfg.lncc_window // 2
        self.coords = grid_coords(fixed.shape)
        self.moving_grad = gradient_array(moving)
        self.fixed_stats = _FixedStats(fixed, self.radius, mask)

    def evaluate(self, v):
        u = exp_displacement(v)
        phi = self.coords + u
        J = _kernels.sample_scalar(self.moving, *phi)
        st = _lncc_state(self.fixed_stats, J)
        grad_sq, u_sq, min_jac = _kernels.deformation_stats(u)
        reg = (self.cfg.lambda2 * grad_sq + self.cfg.lambda3 * u_sq) / u[0].size
        return {"energy": 1.0 - st.value + reg, "u": u, "phi": phi, "lncc": st,
                "min_jac": min_jac}

    def direction(self, state):
        dEdJ = _lncc_gradient(state["lncc"])
        gM = _kernels.sample_vector(self.moving_grad, *state["phi"])
        g = dEdJ[None] * gM
        g += _regularizer_gradient(state["u"], self.cfg.lambda2, self.cfg.lambda3)
        g = smooth_field(g, self.cfg.smooth_update_sigma)
        norm = np.sqrt((g * g).sum(axis=0))
        moving = norm[norm > 0]
        if moving.size == 0:
            return None
        # a robust peak: the single largest voxel would throttle every other one
        peak = float(np.quantile(moving, STEP_NORM_QUANTILE))
        if peak == 0.0 or not np.isfinite(peak):
            return None
        return -g / peak


def _min_jacobian(state):
    return state["min_jac"]


def _optimise_level(level, v, cfg, level_index, trace, trace_levels):
    state = level.evaluate(v)
    if _min_jacobian(state) <= 0:
        # the upsampled initial field folded; restart this level from zero
        v = np.zeros_like(v)
        state = level.evaluate(v)
    trace.append(state["energy"])
    trace_levels.append(level_index)
    step = cfg.step_size
    min_step = cfg.step_size / 64.0
    stalls = 0
    clean = 0
    for _ in range(cfg.iters_per_level):
        d = level.direction(state)
        if d is None:
            break
        accepted = False
        first_try = True
        while step >= min_step:
            cand_v = v + step * d
            cand = level.evaluate(cand_v)
            if cand["energy"] < state["energy"] and _min_jacobian(cand) > 0:
                accepted = True
                break
            step *= 0.5
            first_try = False
        if not accepted:
            break
        gain = (state["energy"] - cand["energy"]) / max(abs(state["energy"]), 1e-12)
        v, state = cand_v, cand
        trace.append(state["energy"])
        trace_levels.append(level_index)
        # grow only after two clean steps in a row; doubling straight after a
        # halving oscillates across narrow valleys
        clean = clean + 1 if first_try else 0
        if clean >= 2:
            step = min(2.0 * step, cfg.step_size)
        stalls = stalls + 1 if gain < cfg.convergence_tol else 0
        if stalls >= 3:
            break
    return v, state


def _pyramid(arr, levels):
    out = [arr]
    for _ in range(levels - 1):
        if min(out[-1].shape) < 8:
            break
        out.append(downsample(out[-1]))
    return out[::-1]


def register(fixed, moving, cfg=None, mask=None, init=None):
    """Register ``moving`` onto ``fixed``.

    Parameters
    ----------
    fixed, moving : ScalarVolume
        Images on the same grid, intensities in ``[0, 1]``.
    cfg : RegistrationConfig, optional
    mask : array_like of bool, optional
        Foreground on the fixed grid; restricts the similarity term.
    init : Svf, optional
        Starting velocity on the fixed grid.

    Returns
    -------
    RegistrationResult
        ``svf`` satisfies ``warp(moving, exp(svf)) ~ fixed``. Running out of
        iterations is not an error: the best iterate is returned.
    """
    cfg = cfg or RegistrationConfig()
    grid = check_grids(fixed, moving)
    fix_pyr = _pyramid(fixed.data, cfg.pyramid_levels)
    mov_pyr = _pyramid(moving.data, cfg.pyramid_levels)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        mask_pyr = [mask]
        for _ in range(len(fix_pyr) - 1):
            mask_pyr.append(mask_pyr[-1][::2, ::2, ::2])
        mask_pyr = mask_pyr[::-1]
    else:
        mask_pyr = [None] * len(fix_pyr)

    trace, trace_levels = [], []
    v = None
    state = None
    for li, (f, m, mk) in enumerate(zip(fix_pyr, mov_pyr, mask_pyr)):
        if v is None:
            v = np.zeros((3,) + f.shape)
            if init is not None:
                v = init.data.copy()
                for _ in range(len(fix_pyr) - 1 - li):
                    v = 0.5 * np.stack([downsample(c) for c in v])
        else:
            v = upsample_field(v, f.shape)
        level = _Level(f, m, mk, cfg)
        v, state = _optimise_level(level, v, cfg, li, trace, trace_levels)
        log.debug("level %d (%s): energy %.6f after %d steps", li, f.shape,
                  state["energy"], trace_levels.count(li))
    return RegistrationResult(
        svf=Svf.from_array(grid, v, "register"),
        final_energy=float(state["energy"]),
        energy_trace=trace,
        trace_levels=trace_levels,
        min_jacobian=_min_jacobian(state),
    )


def endpoint_error(u_a, u_b, mask=None):
    """Mean Euclidean distance between two displacement arrays (optionally masked)."""
    e = np.sqrt(((u_a - u_b) ** 2).sum(axis=0))
    return float(e[mask].mean() if mask is not None else e.mean())
