"""Grids, scalar images, label maps and 3-vector fields.

Arrays are stored as ``(nx, ny, nz)`` numpy arrays indexed ``[x, y, z]``;
the flat ``values`` view uses the x-fastest linearization (Fortran order),
which is also the NIfTI on-disk order. Vector fields are ``(3, nx, ny, nz)``
and always carry voxel units, never millimetres.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import GridMismatchError, NumericalError, ValidationError

FIELD_KINDS = ("velocity", "displacement", "deformation", "gradient")


@dataclass(frozen=True)
class Grid3:
    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValidationError("Grid3 needs three dims, spacings and origins")
        if min(dims) < 2:
            raise ValidationError(f"every axis needs at least 2 voxels, got {dims}")
        if min(spacing) <= 0:
            raise ValidationError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self):
        return self.dims

    @property
    def size(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    def coords(self):
        """Voxel coordinate arrays ``(x, y, z)``, each of shape ``dims``."""
        return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in self.dims),
                           indexing="ij")

    def downsampled(self):
        dims = tuple(max(2, (n + 1) // 2) for n in self.dims)
        spacing = tuple(2.0 * s for s in self.spacing)
        return Grid3(dims, spacing, self.origin)


def check_grids(*objs):
    grid = objs[0].grid
    for other in objs[1:]:
        if other.grid != grid:
            raise GridMismatchError(f"grid mismatch: {grid} vs {other.grid}")
    return grid


@dataclass(eq=False)
class ScalarVolume:
    grid: Grid3
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.shape != self.grid.dims:
            raise ValidationError(
                f"data shape {self.data.shape} does not match grid {self.grid.dims}")
        if not np.all(np.isfinite(self.data)):
            raise NumericalError("scalar volume contains non-finite values")

    @classmethod
    def from_values(cls, grid, values):
        """Build from a flat x-fastest sequence."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.size != grid.size:
            raise ValidationError(f"expected {grid.size} values, got {arr.size}")
        return cls(grid, arr.reshape(grid.dims, order="F"))

    @property
    def values(self):
        return self.data.ravel(order="F")

    def copy(self):
        return ScalarVolume(self.grid, self.data.copy())


@dataclass(eq=False)
class LabelVolume:
    grid: Grid3
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.shape != self.grid.dims:
            raise ValidationError(
                f"label shape {arr.shape} does not match grid {self.grid.dims}")
        if arr.size and arr.min() < 0:
            raise ValidationError("labels must be non-negative")
        self.data = np.ascontiguousarray(arr, dtype=np.int32)

    @property
    def values(self):
        return self.data.ravel(order="F")

    def mask(self, labels):
        """Boolean mask of voxels whose label is in ``labels``."""
        return np.isin(self.data, np.fromiter(labels, dtype=np.int64))

    def label_set(self):
        return set(int(v) for v in np.unique(self.data)) - {0}


@dataclass(eq=False)
class VectorField3:
    grid: Grid3
    data: np.ndarray
    kind: str = "velocity"

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.shape != (3,) + self.grid.dims:
            raise ValidationError(
                f"field shape {self.data.shape} does not match grid {self.grid.dims}")
        if self.kind not in FIELD_KINDS:
            raise ValidationError(f"unknown field kind {self.kind!r}")
        if not np.all(np.isfinite(self.data)):
            raise NumericalError("vector field contains non-finite components")

    @classmethod
    def zeros(cls, grid, kind="velocity"):
        return cls(grid, np.zeros((3,) + grid.dims), kind)

    @classmethod
    def identity(cls, grid):
        return cls(grid, np.stack(grid.coords()), "deformation")

    def displacement(self):
        """The displacement ``u`` with ``phi = Id + u`` as a bare array."""
        if self.kind == "deformation":
            return self.data - np.stack(self.grid.coords())
        return self.data

    def as_deformation(self):
        if self.kind == "deformation":
            return self
        if self.kind != "displacement":
            raise ValidationError(f"cannot read a {self.kind} field as a deformation")
        return VectorField3(self.grid, self.data + np.stack(self.grid.coords()),
                            "deformation")

    def as_displacement(self):
        if self.kind == "displacement":
            return self
        return VectorField3(self.grid, self.displacement(), "displacement")


def sample_trilinear(vol, point):
    """Trilinearly interpolate ``vol`` at one voxel-coordinate point.

    Coordinates outside the grid are clamped onto the boundary face.
    """
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (3,) or not np.all(np.isfinite(point)):
        raise ValidationError("point must be three finite coordinates")
    c = [np.array([v]) for v in point]
    return float(_kernels.sample_scalar(vol.data, *c)[0])


def warp(image, deformation):
    """Pull ``image`` back through ``deformation``: ``out(p) = image(phi(p))``."""
    check_grids(image, deformation)
    phi = deformation.as_deformation().data
    return ScalarVolume(image.grid, _kernels.sample_scalar(image.data, *phi))


def warp_labels(labels, deformation):
    """Nearest-neighbour pull-back of a label volume."""
    check_grids(labels, deformation)
    phi = deformation.as_deformation().data
    idx = [np.clip(np.rint(phi[a]), 0, n - 1).astype(np.intp)
           for a, n in enumerate(labels.grid.dims)]
    return LabelVolume(labels.grid, labels.data[idx[0], idx[1], idx[2]])


def compose_displacements(u_a, u_b):
    """Displacement of ``(Id + u_a) o (Id + u_b)`` for bare ``(3, ...)`` arrays.

    ``u_a`` is sampled at ``p + u_b(p)``; lookups outside the grid reuse the
    nearest boundary displacement.
    """
    shape = u_b.shape[1:]
    gx, gy, gz = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape),
                             indexing="ij")
    moved = _kernels.sample_vector(u_a, gx + u_b[0], gy + u_b[1], gz + u_b[2])
    return u_b + moved


def compose(phi_a, phi_b):
    """``phi_a o phi_b``: ``phi_a`` evaluated component-wise at ``phi_b(p)``."""
    check_grids(phi_a, phi_b)
    u = compose_displacements(phi_a.displacement(), phi_b.displacement())
    return VectorField3(phi_a.grid, u, "displacement").as_deformation()


def gradient_array(arr):
    """Central differences inside, one-sided at the faces; ``(3, ...)`` result."""
    return np.stack(np.gradient(arr, edge_order=1))


def spatial_gradient(vol):
    return VectorField3(vol.grid, gradient_array(vol.data), "gradient")


def normalize_intensity(vol, mask=None):
    """Affinely rescale intensities to ``[0, 1]`` (min/max over ``mask`` if given)."""
    ref = vol.data if mask is None else vol.data[np.asarray(mask, dtype=bool)]
    lo, hi = float(ref.min()), float(ref.max())
    if hi <= lo:
        raise NumericalError("cannot rescale a constant image")
    return ScalarVolume(vol.grid, np.clip((vol.data - lo) / (hi - lo), 0.0, 1.0))


def smooth(arr, sigma):
    """Gaussian smoothing with edge replication; ``sigma`` in voxels."""
    if sigma <= 0:
        return arr
    return _kernels.gaussian_smooth(arr, sigma)


def smooth_field(data, sigma):
    if sigma <= 0:
        return data
    return np.stack([smooth(data[c], sigma) for c in range(3)])


def downsample(arr):
    """Halve resolution: light anti-alias blur then keep every other voxel."""
    return np.ascontiguousarray(smooth(arr, 0.7)[::2, ::2, ::2])


def upsample_field(data, dims):
    """Trilinearly resample a coarse voxel-unit field onto ``dims``, scaling by 2."""
    gx, gy, gz = np.meshgrid(*(np.arange(n, dtype=np.float64) / 2.0 for n in dims),
                             indexing="ij")
    return 2.0 * _kernels.sample_vector(data, gx, gy, gz)


def downsample_field(data):
    """Coarse-grid version of a voxel-unit field (values halved)."""
    return 0.5 * np.stack([downsample(data[c]) for c in range(3)])


def grid_coords(dims):
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims),
                                indexing="ij"))


def foreground_centroid(vol, threshold=0.5):
    m = vol.data > threshold
    coords = vol.grid.coords()
    return np.array([c[m].mean() for c in coords])


__all__ = [
    "Grid3", "ScalarVolume", "LabelVolume", "VectorField3", "check_grids",
    "sample_trilinear", "warp", "warp_labels", "compose", "compose_displacements",
    "spatial_gradient", "gradient_array", "normalize_intensity", "smooth",
    "smooth_field", "downsample", "upsample_field", "downsample_field",
    "grid_coords", "foreground_centroid",
]
