"""Limit sets of similitude systems: porosity, strip series and singular integrals."""
from .errors import CapacityError, CifsError, DomainError, InvariantError, RefinementError
from .ifs import (BUILTIN_SYSTEMS, LimitSetApprox, SimilitudeMap, SystemSpec, check_osc, compose, generate,
                  load_system, similarity_dimension, stopping_family)
from .measure import (AtomicMeasure, Ball, DirectionPlane, HalfOpenCube, SphereShell, growth_constant,
                      natural_measure, strip_family)
from .porosity import (build_covering, find_directed_hole, find_grid_hole, porosity_profile, select_grid_m,
                       strip_envelope, strip_series)
from .singular import (KernelSpec, SimpleFunction, averaged_operator, bilinear_form, cross_integral,
                       maximal_sample, riesz, sign_modulated_riesz, truncated_apply, weak_convergence_trace)

__version__ = "0.1.0"
