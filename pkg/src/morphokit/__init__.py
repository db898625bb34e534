"""Diffeomorphisms from Jacobian determinant and curl: construction,
averaging, SSD registration and unbiased templates."""
from .errors import (ConvergenceFailure, DegenerateInput, DimensionError, EmptyInput, FormatError,
                     GridMismatch, MorphoError, NonPositiveTarget, SingularJacobianSum,
                     SpecOutOfRange)
from .fields import (GridSpec, Image, ScalarField, Transformation, VectorField, compose, curl2d,
                     curl3d, interpolate, invert, jacobian_det, resample, ssd)
from .poisson import solve_dirichlet, solve_zero
from .registration import RegistrationOptions, RegistrationResult, register
from .synth import (RotationalSpec, make_family6, make_rotational_pair, make_test_image,
                    make_twisted_volume)
from .template import Cohort, TemplateOptions, build_fast, build_general
from .varcon import DescentOptions, VarConProblem, average_transformations, solve

__version__ = "0.1.0"
