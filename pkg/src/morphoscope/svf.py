"""Stationary velocity fields and their exponential map.

The flow of a stationary field ``v`` over unit time is computed by scaling and
squaring: ``K`` is the smallest integer for which ``v / 2**K`` moves no voxel
by half a voxel or more, the flow over ``h = 2**-K`` is formed, and it is
composed with itself ``K`` times.

The short flow is one midpoint step, ``u0(p) = h * v(p + h/2 * v(p))``,
not the first-order ``h * v(p)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from . import _kernels
from .volume import (
    ScalarVolume,
    VectorField3,
    check_grids,
    gradient_array,
    grid_coords,
)

MAX_SQUARINGS = 10
HALF_VOXEL = 0.5


@dataclass(eq=False)
class Svf:
    field: VectorField3
    provenance: str = ""

    def __post_init__(self):
        if self.field.kind != "velocity":
            self.field = VectorField3(self.field.grid, self.field.data, "velocity")

    @classmethod
    def from_array(cls, grid, data, provenance=""):
        return cls(VectorField3(grid, data, "velocity"), provenance)

    @classmethod
    def zeros(cls, grid):
        return cls(VectorField3.zeros(grid))

    @property
    def grid(self):
        return self.field.grid

    @property
    def data(self):
        return self.field.data

    def max_norm(self):
        return float(np.sqrt((self.data ** 2).sum(axis=0)).max())


def n_squarings(max_norm):
    """Smallest ``K`` with ``max_norm / 2**K < 0.5``, capped at ``MAX_SQUARINGS``."""
    k = 0
    while max_norm / 2.0 ** k >= HALF_VOXEL and k < MAX_SQUARINGS:
        k += 1
    return k


def exp_displacement(v):
    """Displacement ``u`` of ``exp(v)`` for a bare ``(3, nx, ny, nz)`` array."""
    if not np.all(np.isfinite(v)):
        raise NumericalError("velocity field contains non-finite components")
    k = n_squarings(float(np.sqrt((v ** 2).sum(axis=0)).max()))
    h = 1.0 / 2.0 ** k
    if not v.any():
        return np.zeros_like(v)
    mid = grid_coords(v.shape[1:]) + (0.5 * h) * v
    u = h * _kernels.sample_vector(v, *mid)
    for _ in range(k):
        u = _kernels.compose_disp(u, u)
    return u


def exp(v):
    """Deformation ``phi = exp(v)`` obtained by scaling and squaring."""
    u = exp_displacement(v.data)
    return VectorField3(v.grid, u, "displacement").as_deformation()


def inverse_deformation(v):
    """``exp(-v)``, the inverse of ``exp(v)``."""
    return exp(scale(v, -1.0))


def jacobian_det_array(u):
    """Determinant of ``I + grad u`` at every voxel of a displacement array."""
    g = [gradient_array(u[c]) for c in range(3)]
    a, b, c = g[0][0] + 1.0, g[0][1], g[0][2]
    d, e, f = g[1][0], g[1][1] + 1.0, g[1][2]
    p, q, r = g[2][0], g[2][1], g[2][2] + 1.0
    return a * (e * r - f * q) - b * (d * r - f * p) + c * (d * q - e * p)


def jacobian_determinant(phi):
    return ScalarVolume(phi.grid, jacobian_det_array(phi.displacement()))


def scale(v, s):
    return Svf(VectorField3(v.grid, v.data * float(s), "velocity"), v.provenance)


def add(v, w):
    check_grids(v.field, w.field)
    return Svf(VectorField3(v.grid, v.data + w.data, "velocity"))


def norm_map(v):
    return ScalarVolume(v.grid, np.sqrt((v.data ** 2).sum(axis=0)))
