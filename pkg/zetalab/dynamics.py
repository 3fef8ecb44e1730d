"""
Torus maps, their lifts, inverses and Jacobians, and weight primitives.

All point arguments are arrays of shape (..., 2); every function maps over
the leading axes. Passing a sequence of Fractions to `eval_map` of a linear
map takes the exact rational path instead.
"""

import logging
import math
from fractions import Fraction
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .constants import DYNAMICS
from .errors import ConfigError, NonConvergence
from .models import HyperbolicityEstimate, MapSpec, WeightSpec

logger = logging.getLogger(__name__)


# =============================================================================
# TORUS GEOMETRY
# =============================================================================


def reduce(x: np.ndarray) -> np.ndarray:
    """Reduce coordinates into [0, 1)."""
    x = np.asarray(x, dtype=float)
    r = x - np.floor(x)
    # x slightly below an integer can round up to exactly 1.0
    return np.where(r >= 1.0, 0.0, r)


def displacement(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Shortest torus displacement a - b, each component in [-1/2, 1/2]."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return d - np.round(d)


def torus_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(displacement(a, b), axis=-1)


# =============================================================================
# MAP EVALUATION
# =============================================================================


def perturbation_field(spec: MapSpec, x: np.ndarray) -> np.ndarray:
    """The vector field v(x), real, shape (..., d)."""
    x = np.asarray(x, dtype=float)
    return np.stack([poly.evaluate(x).real for poly in spec.perturbation], axis=-1)


def perturbation_jacobian(spec: MapSpec, x: np.ndarray) -> np.ndarray:
    """Dv(x) with Dv[..., i, j] = d v_i / d x_j, computed term by term."""
    x = np.asarray(x, dtype=float)
    return np.stack([poly.gradient(x).real for poly in spec.perturbation], axis=-2)


def eval_lift(spec: MapSpec, x: np.ndarray) -> np.ndarray:
    """Lift A x + epsilon v(x) on R^d, no reduction."""
    x = np.asarray(x, dtype=float)
    y = x @ spec.matrix.T.astype(float)
    if not spec.is_linear:
        y = y + spec.epsilon * perturbation_field(spec, x)
    return y


def eval_map_exact(spec: MapSpec, x: Sequence[Fraction]) -> Tuple[Fraction, ...]:
    """Exact rational image of a rational point under the linear part."""
    image = []
    for row in spec.A:
        value = sum((Fraction(a) * Fraction(xi) for a, xi in zip(row, x)), Fraction(0))
        image.append(value - math.floor(value))
    return tuple(image)


def eval_map(spec: MapSpec, x):
    """T(x) = reduce(A x + epsilon v(x))."""
    if spec.is_linear and isinstance(x, (tuple, list)) and x and isinstance(x[0], Fraction):
        return eval_map_exact(spec, x)
    return reduce(eval_lift(spec, x))


def jacobian(spec: MapSpec, x: np.ndarray) -> np.ndarray:
    """DT(x) = A + epsilon Dv(x), shape (..., d, d)."""
    x = np.asarray(x, dtype=float)
    A = np.broadcast_to(spec.matrix.astype(float), x.shape[:-1] + spec.matrix.shape)
    if spec.is_linear:
        return A.copy()
    return A + spec.epsilon * perturbation_jacobian(spec, x)


def jacobian_determinant(spec: MapSpec, x: np.ndarray) -> np.ndarray:
    if spec.is_linear:
        return np.full(np.asarray(x).shape[:-1], float(spec.determinant))
    return np.linalg.det(jacobian(spec, x))


def iterate(spec: MapSpec, x: np.ndarray, n: int) -> np.ndarray:
    """T^n(x), reduced."""
    y = reduce(x)
    for _ in range(n):
        y = eval_map(spec, y)
    return y


def iterate_jacobian(spec: MapSpec, x: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Return (T^n x, DT^n(x)) with DT^n built from step Jacobians by the chain rule."""
    y = reduce(x)
    J = np.broadcast_to(np.eye(spec.dimension), y.shape[:-1] + (spec.dimension,) * 2).copy()
    for _ in range(n):
        J = jacobian(spec, y) @ J
        y = eval_map(spec, y)
    return y, J


def lift_orbit(spec: MapSpec, x: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Lifted n-th iterate split as T~^n(x) = frac + offset with integer offset.

    Floats stay in [0, 1) between steps; the integer part is carried exactly
    through T~(y + m) = T~(y) + A m.

    Returns:
        (frac, offset, DT^n(x))
    """
    x = np.asarray(x, dtype=float)
    base = np.floor(x)
    frac = x - base
    offset = base.astype(np.int64)
    A = spec.matrix
    J = np.broadcast_to(np.eye(spec.dimension), x.shape[:-1] + (spec.dimension,) * 2).copy()
    for _ in range(n):
        J = jacobian(spec, frac) @ J
        z = eval_lift(spec, frac)
        q = np.floor(z)
        frac = z - q
        offset = offset @ A.T + q.astype(np.int64)
    return frac, offset, J


# =============================================================================
# INVERSE MAP
# =============================================================================


@lru_cache(maxsize=32)
def contraction_constant(spec: MapSpec) -> float:
    """epsilon * max|Dv| * |A^-1| over the sample grid; must stay below 1."""
    if spec.is_linear:
        return 0.0
    m = DYNAMICS["contraction_grid"]
    axis = np.arange(m) / m
    pts = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1)
    dv_norm = float(np.max(np.linalg.norm(perturbation_jacobian(spec, pts), ord=2, axis=(-2, -1))))
    return spec.epsilon * dv_norm * float(np.linalg.norm(spec.inverse_matrix.astype(float), 2))


def inverse_map(
    spec: MapSpec,
    y: np.ndarray,
    tol: float = DYNAMICS["inverse_tolerance"],
    max_iterations: int = DYNAMICS["inverse_max_iterations"],
) -> np.ndarray:
    """
    T^-1(y) by Newton iteration seeded at A^-1 y.

    Raises:
        NonConvergence when epsilon is outside the contraction regime or the
        torus residual stays above tol after max_iterations.
    """
    y = reduce(y)
    Ainv = spec.inverse_matrix.astype(float)
    x = y @ Ainv.T
    if spec.is_linear:
        return reduce(x)

    kappa = contraction_constant(spec)
    if kappa >= 1.0:
        raise NonConvergence(f"epsilon={spec.epsilon} outside the contraction regime (constant {kappa:.3f})")

    residual = displacement(eval_lift(spec, x), y)
    for iteration in range(max_iterations):
        err = np.max(np.abs(residual)) if residual.size else 0.0
        if err <= tol:
            logger.debug("inverse_map converged in %d iterations (residual %.2e)", iteration, err)
            return reduce(x)
        step = np.linalg.solve(jacobian(spec, x), residual[..., None])[..., 0]
        x = x - step
        residual = displacement(eval_lift(spec, x), y)

    err = float(np.max(np.abs(residual)))
    if err > tol:
        bad = int(np.count_nonzero(np.max(np.abs(residual), axis=-1) > tol))
        raise NonConvergence(f"inverse_map residual {err:.3e} > {tol:.1e} at {bad} points")
    return reduce(x)


def inverse_iterates(spec: MapSpec, x: np.ndarray, n: int, tol: float = DYNAMICS["inverse_tolerance"]) -> List[np.ndarray]:
    """[x, T^-1 x, ..., T^-n x]."""
    chain = [reduce(x)]
    for _ in range(n):
        chain.append(inverse_map(spec, chain[-1], tol))
    return chain


def forward_iterates(spec: MapSpec, x: np.ndarray, n: int) -> List[np.ndarray]:
    """[x, T x, ..., T^n x]."""
    chain = [reduce(x)]
    for _ in range(n):
        chain.append(eval_map(spec, chain[-1]))
    return chain


# =============================================================================
# WEIGHTS
# =============================================================================


def tensor_weight(
    spec: MapSpec,
    weight: WeightSpec,
    x: np.ndarray,
    y: np.ndarray,
    tol: float = DYNAMICS["inverse_tolerance"],
    pre: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    g~(x, y) = g(T^-1 x) |det D_{T^-1 x} T|^-1 g(y).

    pre, when given, is T^-1 x already computed by the caller.
    """
    if pre is None:
        pre = inverse_map(spec, x, tol)
    return weight.evaluate(pre) / np.abs(jacobian_determinant(spec, pre)) * weight.evaluate(y)


# =============================================================================
# HYPERBOLICITY
# =============================================================================


def linear_rates(spec: MapSpec) -> Tuple[float, float]:
    """(contracting, expanding) eigenvalue moduli of A, without cancellation."""
    t = abs(spec.trace)
    expanding = (t + math.sqrt(t * t - 4.0 * spec.determinant)) / 2.0
    return 1.0 / expanding, expanding


def _eigen_frame(spec: MapSpec) -> np.ndarray:
    """Columns (E^u, E^s) of the linear part."""
    w, V = np.linalg.eig(spec.matrix.astype(float))
    order = np.argsort(-np.abs(w))
    return np.real(V[:, order])


def _in_cone(frame_inv: np.ndarray, vectors: np.ndarray, axis: int, aperture: float) -> np.ndarray:
    c = vectors @ frame_inv.T
    return np.abs(c[..., 1 - axis]) < aperture * np.abs(c[..., axis])


def _directional_rates(steps: List[np.ndarray], n: int) -> Tuple[np.ndarray, List[np.ndarray]]:
    """
    Most contracted direction of the 2n-step product, and its growth per step.

    Returns (direction per point, [|prod_m e| for m = 1..n]).
    """
    prods = []
    J = np.broadcast_to(np.eye(2), steps[0].shape).copy()
    for step in steps:
        J = step @ J
        prods.append(J)
    _, _, vh = np.linalg.svd(prods[-1])
    e = vh[..., -1, :]
    norms = [np.linalg.norm((prods[m - 1] @ e[..., None])[..., 0], axis=-1) for m in range(1, n + 1)]
    return e, norms


def estimate_hyperbolicity(
    spec: MapSpec,
    grid_m: int = DYNAMICS["hyperbolicity_grid"],
    iterates: int = DYNAMICS["hyperbolicity_iterates"],
    cone_aperture: float = DYNAMICS["cone_aperture"],
) -> HyperbolicityEstimate:
    """
    Grid estimate of lambda and C in |DT^n|E^s| <= C lambda^n (and the
    unstable counterpart for T^-1), with an invariant-cone check.
    """
    if grid_m < 32:
        raise ConfigError("hyperbolicity grid_m must be at least 32")

    lam_lin, _ = linear_rates(spec)
    frame = _eigen_frame(spec)
    frame_inv = np.linalg.inv(frame)

    axis = np.arange(grid_m) / grid_m
    pts = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)

    # Cone check: DT keeps the unstable cone, DT^-1 keeps the stable cone
    J = jacobian(spec, pts)
    J_inv = np.linalg.inv(J)
    u, s = frame[:, 0], frame[:, 1]
    certified = True
    for sign in (1.0, -1.0):
        ray_u = u + sign * cone_aperture * s
        ray_s = s + sign * cone_aperture * u
        certified &= bool(np.all(_in_cone(frame_inv, J @ ray_u, 0, cone_aperture)))
        certified &= bool(np.all(_in_cone(frame_inv, J_inv @ ray_s, 1, cone_aperture)))

    if spec.is_linear:
        return HyperbolicityEstimate(
            lam=lam_lin,
            C=1.0,
            cone_aperture=cone_aperture,
            certified=certified,
            lambda_stable=lam_lin,
            lambda_unstable=lam_lin,
            margin=1.0 - lam_lin,
        )

    forward = forward_iterates(spec, pts, 2 * iterates - 1)
    _, stable_norms = _directional_rates([jacobian(spec, p) for p in forward], iterates)

    backward = inverse_iterates(spec, pts, 2 * iterates)
    inv_steps = [np.linalg.inv(jacobian(spec, p)) for p in backward[1:]]
    _, unstable_norms = _directional_rates(inv_steps, iterates)

    lam_s = float(np.max(stable_norms[-1])) ** (1.0 / iterates)
    lam_u = float(np.max(unstable_norms[-1])) ** (1.0 / iterates)
    lam = max(lam_s, lam_u)
    C = 1.0
    for m in range(1, iterates + 1):
        worst = max(float(np.max(stable_norms[m - 1])), float(np.max(unstable_norms[m - 1])))
        C = max(C, worst / lam**m)
    certified = certified and lam < 1.0
    logger.info(
        "Hyperbolicity: lambda_s=%.6f lambda_u=%.6f C=%.3f certified=%s", lam_s, lam_u, C, certified
    )
    return HyperbolicityEstimate(
        lam=lam,
        C=C,
        cone_aperture=cone_aperture,
        certified=certified,
        lambda_stable=lam_s,
        lambda_unstable=lam_u,
        margin=1.0 - lam,
    )
