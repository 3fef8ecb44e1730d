"""
Exception hierarchy for the zeta-function laboratory.

Each error carries the process exit code the command line reports for it.
"""

from typing import Sequence

from .constants import EXIT_CODES


class ZetaLabError(Exception):
    """Base class for all laboratory errors."""

    exit_code = EXIT_CODES["numerical_failure"]


# -----------------------------------------------------------------------------
# Configuration (exit 4)
# -----------------------------------------------------------------------------


class ConfigError(ZetaLabError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = EXIT_CODES["config_error"]


class UnsupportedDimension(ConfigError):
    """Torus dimension other than 2."""


class NotHyperbolic(ConfigError):
    """Linear part fails |trace A| > 2."""


class AmbiguousRounding(ConfigError):
    """r/2 is a half-integer, so the closest integer [r/2] is not unique."""


# -----------------------------------------------------------------------------
# Missing inputs (exit 2)
# -----------------------------------------------------------------------------


class MissingArtifacts(ZetaLabError):
    """A command needs output files that earlier stages have not written."""

    exit_code = EXIT_CODES["missing_inputs"]


# -----------------------------------------------------------------------------
# Numerical failures (exit 3)
# -----------------------------------------------------------------------------


class NonConvergence(ZetaLabError):
    """Inverse-map iteration did not reach its tolerance."""


class Degenerate(ZetaLabError):
    """det(A^n - Id) = 0, so Fix T^n is not a finite set."""


class ContinuationFailure(ZetaLabError):
    """Newton continuation of a periodic point failed."""

    def __init__(self, k: Sequence[int], detail: str = ""):
        self.k = tuple(int(v) for v in k)
        message = f"continuation failed for lift class k={list(self.k)}"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class CollisionDetected(ZetaLabError):
    """Two continued periodic points coincide."""


class DigestMismatch(ZetaLabError):
    """Cache file was built for a different map."""


class SchemaMismatch(ZetaLabError):
    """Cache or artifact file does not follow the expected schema."""


class SingularMonodromy(ZetaLabError):
    """|det(Id - DT^n(x))| is numerically zero at a periodic point."""


class GridTooCoarse(ZetaLabError):
    """Quadrature grid does not resolve the mollifier."""


class NonMonotone(ZetaLabError):
    """Extrapolation ladder differences do not shrink."""


class InsufficientTraces(ZetaLabError):
    """More determinant coefficients requested than traces available."""


class RootIterationStall(ZetaLabError):
    """Simultaneous root iteration did not reach its residual target."""


class DegenerateFit(ZetaLabError):
    """Too few usable points for the remainder decay fit."""


class EigenFailure(ZetaLabError):
    """Eigenpairs do not meet the residual contract."""


class SigmaOnEigenvalue(ZetaLabError):
    """The spectral cut lies too close to an eigenvalue modulus."""


class OrbitValidationError(ZetaLabError):
    """A computed orbit set failed validation."""


# -----------------------------------------------------------------------------
# Warnings
# -----------------------------------------------------------------------------


class AliasingRisk(UserWarning):
    """Galerkin columns carry energy near the sampling grid's Nyquist band."""
