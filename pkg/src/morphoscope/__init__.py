"""Deformation-based morphometry with stationary velocity fields.

Modules
-------
volume    grids, scalar/label volumes, vector fields, warping
io        NIfTI-1 and CSV readers/writers
svf       stationary velocity fields and their exponential
register  LNCC-driven diffeomorphic registration
template  age-conditioned template construction and EFC
scores    aging score (AS) and aging-disentangled score (ADS)
stats     fits, t-tests, effect sizes, ANCOVA
phantom   seeded synthetic cohorts with known deformations
cli       the ``morphoscope`` command
"""

__version__ = "0.1.0"

from .errors import (DegenerateInputError, GridMismatchError, MorphoscopeError, NiftiError,
                     NumericalError, ValidationError)
from .register import RegistrationConfig, RegistrationResult, lncc, register
from .scores import AgingField, RegionSpec, VoxelScores, one_year_field, quantile_threshold, \
    regional_score, voxel_scores
from .svf import Svf, exp, jacobian_determinant
from .template import build_template, build_templates, efc
from .volume import Grid3, LabelVolume, ScalarVolume, VectorField3, compose, warp

__all__ = [
    "AgingField", "DegenerateInputError", "Grid3", "GridMismatchError", "LabelVolume",
    "MorphoscopeError", "NiftiError", "NumericalError", "RegionSpec", "RegistrationConfig",
    "RegistrationResult", "ScalarVolume", "Svf", "ValidationError", "VectorField3",
    "VoxelScores", "build_template", "build_templates", "compose", "efc", "exp",
    "jacobian_determinant", "lncc", "one_year_field", "quantile_threshold", "register",
    "regional_score", "voxel_scores", "warp",
]
