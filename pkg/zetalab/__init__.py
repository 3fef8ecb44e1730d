"""
Zeta-function laboratory

Numerical dynamical determinants for hyperbolic torus maps: exact and
continued periodic orbits, weighted trace sums, the determinant series and
its stable zeros, cross-checked against a Fourier-Galerkin spectrum.
"""

from .errors import AliasingRisk, ConfigError, MissingArtifacts, ZetaLabError
from .models import MapSpec, RunConfig, TraceTable, WeightSpec
from .orbits import OrbitCache, enumerate_linear, validate_orbit_set
from .traces import trace_table
from .determinant import certified_radius, coefficients_from_traces, spectral_bound_params, zero_stability
from .spectral import build_galerkin, eigen_solve, match_resonances

__all__ = [
    "AliasingRisk",
    "ConfigError",
    "MissingArtifacts",
    "ZetaLabError",
    "MapSpec",
    "RunConfig",
    "TraceTable",
    "WeightSpec",
    "OrbitCache",
    "enumerate_linear",
    "validate_orbit_set",
    "trace_table",
    "certified_radius",
    "coefficients_from_traces",
    "spectral_bound_params",
    "zero_stability",
    "build_galerkin",
    "eigen_solve",
    "match_resonances",
]
__version__ = "0.1.0"
