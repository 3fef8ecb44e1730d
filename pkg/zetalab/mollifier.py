"""
Mollified delta kernels and the trace identities they verify by quadrature.

The diagonal delta is smoothed by a unit-mass kernel j_eps; pairing the
smoothed kernels of T_g^n and of the tensor operator with the diagonal gives
numbers that converge to the orbit sums tr_n as eps -> 0. None of this uses
periodic-orbit enumeration.
"""

import csv
import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .constants import LADDER_CSV, MOLLIFIER, TOLERANCE_DEFAULTS
from .dynamics import displacement, eval_map, inverse_map, jacobian_determinant, reduce, tensor_weight
from .errors import ConfigError, GridTooCoarse, NonMonotone
from .models import MapSpec, MollifierSpec, QuadratureGrid, WeightSpec
from .traces import compensated_sum
from .workers import ordered_map

logger = logging.getLogger(__name__)


# =============================================================================
# KERNEL
# =============================================================================


def mollifier_profile(shape: str, epsilon: float, d: np.ndarray) -> np.ndarray:
    """Unnormalized radial profile at displacements d of shape (..., 2)."""
    r2 = np.sum(np.asarray(d, dtype=float) ** 2, axis=-1)
    if shape == "truncated-gaussian":
        sigma = MOLLIFIER["sigma_per_epsilon"] * epsilon
        cut = MOLLIFIER["cut_sigmas"] * sigma
        return np.where(r2 <= cut * cut, np.exp(-r2 / (2.0 * sigma * sigma)), 0.0)
    # C-infinity bump supported in the open disk of radius epsilon
    t = r2 / (epsilon * epsilon)
    inside = t < 1.0
    safe = np.where(inside, t, 0.0)
    return np.where(inside, np.exp(-1.0 / (1.0 - safe)), 0.0)


@lru_cache(maxsize=64)
def _grid_mass(shape: str, epsilon: float, m: int) -> float:
    reach = int(math.ceil(epsilon * m)) + 1
    offsets = np.arange(-reach, reach + 1) / m
    d = np.stack(np.meshgrid(offsets, offsets, indexing="ij"), axis=-1)
    return math.fsum(mollifier_profile(shape, epsilon, d).ravel().tolist()) / (m * m)


def normalized_mollifier(moll: MollifierSpec, grid: QuadratureGrid) -> MollifierSpec:
    """The same kernel with its normalization set so the grid mass is exactly 1."""
    check_resolution(moll, grid)
    return replace(moll, normalization=1.0 / _grid_mass(moll.shape, moll.epsilon, grid.m))


def mollifier_values(moll: MollifierSpec, d: np.ndarray) -> np.ndarray:
    return moll.normalization * mollifier_profile(moll.shape, moll.epsilon, d)


def grid_mass(moll: MollifierSpec, grid: QuadratureGrid) -> float:
    """Quadrature of j_eps over the grid (1 after normalized_mollifier)."""
    return moll.normalization * _grid_mass(moll.shape, moll.epsilon, grid.m)


def check_resolution(moll: MollifierSpec, grid: QuadratureGrid) -> None:
    if grid.m * moll.epsilon < MOLLIFIER["min_points_per_width"]:
        raise GridTooCoarse(
            f"grid m={grid.m} does not resolve epsilon={moll.epsilon} "
            f"(m * epsilon = {grid.m * moll.epsilon:.2f} < {MOLLIFIER['min_points_per_width']:g})"
        )


def grid_for_epsilon(epsilon: float) -> QuadratureGrid:
    """Smallest power-of-two grid with points_per_width nodes across epsilon."""
    m = 1 << max(0, math.ceil(math.log2(MOLLIFIER["points_per_width"] / epsilon)))
    return QuadratureGrid(m)


def _tiled_integral(integrand, grid: QuadratureGrid, workers: Optional[int]) -> complex:
    tiles = list(grid.row_tiles(MOLLIFIER["tile_rows"]))
    partial = ordered_map(lambda tile: complex(np.sum(integrand(tile.reshape(-1, 2)))), tiles, workers)
    return compensated_sum(np.array(partial)) * grid.weight


# =============================================================================
# MOLLIFIED TRACES
# =============================================================================


def mollified_trace(
    spec: MapSpec,
    weight: WeightSpec,
    n: int,
    moll: MollifierSpec,
    grid: QuadratureGrid,
    workers: Optional[int] = None,
) -> complex:
    """
    int g_n(x) j_eps(T^n x - x) dx by grid quadrature; tends to tr_n as eps -> 0.

    Raises:
        GridTooCoarse: m * eps < 8.
    """
    if n < 1:
        raise ConfigError("mollified_trace needs n >= 1")
    kernel = normalized_mollifier(moll, grid)

    def integrand(x: np.ndarray) -> np.ndarray:
        y = x
        g_n = np.ones(x.shape[0], dtype=complex)
        for _ in range(n):
            g_n = g_n * weight.evaluate(y)
            y = eval_map(spec, y)
        return g_n * mollifier_values(kernel, displacement(y, x))

    return _tiled_integral(integrand, grid, workers)


def _tensor_chain(
    spec: MapSpec, weight: WeightSpec, x: np.ndarray, y: np.ndarray, n: int, tol: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (g~_n(x, y), T^-n x, T^n y)."""
    b = reduce(x)
    f = reduce(y)
    value = np.ones(b.shape[:-1], dtype=complex)
    for _ in range(n):
        pre = inverse_map(spec, b, tol)
        value = value * tensor_weight(spec, weight, b, f, tol, pre=pre)
        b, f = pre, eval_map(spec, f)
    return value, b, f


def tensor_weight_along_orbit(
    spec: MapSpec,
    weight: WeightSpec,
    x: np.ndarray,
    y: np.ndarray,
    n: int,
    tol: float = TOLERANCE_DEFAULTS["inverse"],
):
    """g~_n(x, y) = prod_{i<n} g~(T^-i x, T^i y), the weight of the n-th tensor power."""
    value, _, _ = _tensor_chain(spec, weight, np.asarray(x, dtype=float), np.asarray(y, dtype=float), n, tol)
    return complex(value) if value.ndim == 0 else value


def mollified_tensor_trace_even(
    spec: MapSpec,
    weight: WeightSpec,
    n: int,
    moll: MollifierSpec,
    grid: QuadratureGrid,
    tol: float = TOLERANCE_DEFAULTS["inverse"],
    workers: Optional[int] = None,
) -> complex:
    """int g~_n(x, x) j_eps(T^-n x - T^n x) dx; compares with tr_{2n}."""
    if n < 1:
        raise ConfigError("the even tensor trace needs n >= 1")
    kernel = normalized_mollifier(moll, grid)

    def integrand(x: np.ndarray) -> np.ndarray:
        value, b, f = _tensor_chain(spec, weight, x, x, n, tol)
        return value * mollifier_values(kernel, displacement(b, f))

    return _tiled_integral(integrand, grid, workers)


def mollified_tensor_trace_odd(
    spec: MapSpec,
    weight: WeightSpec,
    n: int,
    moll: MollifierSpec,
    grid: QuadratureGrid,
    tol: float = TOLERANCE_DEFAULTS["inverse"],
    workers: Optional[int] = None,
) -> complex:
    """
    Same pairing against the pushed diagonal (T_g* x Id) delta; compares with tr_{2n+1}.

    Integrand: g~_n(x, x) g(T^-n-1 x) / |det DT(T^-n-1 x)| j_eps(T^-n-1 x - T^n x).
    """
    if n < 0:
        raise ConfigError("the odd tensor trace needs n >= 0")
    kernel = normalized_mollifier(moll, grid)

    def integrand(x: np.ndarray) -> np.ndarray:
        value, b, f = _tensor_chain(spec, weight, x, x, n, tol)
        b = inverse_map(spec, b, tol)
        value = value * weight.evaluate(b) / np.abs(jacobian_determinant(spec, b))
        return value * mollifier_values(kernel, displacement(b, f))

    return _tiled_integral(integrand, grid, workers)


# =============================================================================
# EXTRAPOLATION
# =============================================================================


@dataclass(frozen=True)
class Extrapolation:
    value: complex
    error: float
    exponent: float  # NaN when the ladder is flat


def epsilon_extrapolate(values: Sequence[Tuple[float, complex]]) -> Extrapolation:
    """
    Richardson extrapolation of value(eps) = a + b eps^p on a halving eps-ladder.

    p comes from the ratio of the last two differences, clamped to [1, 3].
    A ladder flat to the noise floor returns its last value with the spread
    as error.

    Raises:
        ConfigError: fewer than 3 rungs, or eps not halving.
        NonMonotone: differences grow along the ladder.
    """
    rungs = sorted(((float(e), complex(v)) for e, v in values), key=lambda ev: -ev[0])
    if len(rungs) < 3:
        raise ConfigError("extrapolation needs at least 3 epsilon values")
    eps = [e for e, _ in rungs]
    for big, small in zip(eps, eps[1:]):
        if not math.isclose(big, 2.0 * small, rel_tol=1e-9):
            raise ConfigError(f"epsilon ladder must halve at each step, got {eps}")

    vals = [v for _, v in rungs]
    diffs = [a - b for a, b in zip(vals, vals[1:])]
    scale = 1.0 + abs(vals[-1])
    floor = MOLLIFIER["noise_floor"] * scale
    spread = max(abs(v - vals[-1]) for v in vals)
    if max(abs(d) for d in diffs) <= floor:
        return Extrapolation(vals[-1], spread, math.nan)

    for prev, cur in zip(diffs, diffs[1:]):
        if abs(cur) > abs(prev) and abs(cur) > floor:
            raise NonMonotone(f"ladder differences grow: |{cur:.3e}| > |{prev:.3e}|")

    lo, hi = MOLLIFIER["exponent_range"]
    d1, d2 = diffs[-2], diffs[-1]
    p = hi if abs(d2) == 0.0 else min(hi, max(lo, math.log2(abs(d1) / abs(d2))))
    factor = 2.0**p - 1.0
    a = vals[-1] - d2 / factor
    a_prev = vals[-2] - d1 / factor
    error = max(abs(a - a_prev), floor)
    logger.debug("Extrapolated %r (p=%.3f, error %.2e)", a, p, error)
    return Extrapolation(a, error, p)


# =============================================================================
# CONVERGENCE LADDERS
# =============================================================================

LADDER_KINDS = ("trace", "even", "odd")


@dataclass(frozen=True)
class LadderRow:
    epsilon: float
    grid_m: int
    value: complex
    reference: complex

    @property
    def abs_error(self) -> float:
        return abs(self.value - self.reference)


def mollified_value(
    kind: str,
    spec: MapSpec,
    weight: WeightSpec,
    n: int,
    moll: MollifierSpec,
    grid: QuadratureGrid,
    tol: float = TOLERANCE_DEFAULTS["inverse"],
    workers: Optional[int] = None,
) -> complex:
    if kind == "trace":
        return mollified_trace(spec, weight, n, moll, grid, workers)
    if kind == "even":
        return mollified_tensor_trace_even(spec, weight, n, moll, grid, tol, workers)
    if kind == "odd":
        return mollified_tensor_trace_odd(spec, weight, n, moll, grid, tol, workers)
    raise ConfigError(f"ladder kind must be one of {LADDER_KINDS}, got {kind!r}")


def reference_index(kind: str, n: int) -> int:
    """Which tr_k a ladder converges to."""
    return {"trace": n, "even": 2 * n, "odd": 2 * n + 1}[kind]


def mollifier_ladder(
    kind: str,
    spec: MapSpec,
    weight: WeightSpec,
    n: int,
    epsilons: Sequence[float],
    reference: complex,
    shape: str = MOLLIFIER["shape"],
    tol: float = TOLERANCE_DEFAULTS["inverse"],
    workers: Optional[int] = None,
) -> List[LadderRow]:
    """One rung per epsilon, each on the grid chosen by grid_for_epsilon."""
    rows = []
    for epsilon in epsilons:
        moll = MollifierSpec(float(epsilon), shape)
        grid = grid_for_epsilon(moll.epsilon)
        value = mollified_value(kind, spec, weight, n, moll, grid, tol, workers)
        logger.info("Mollified %s n=%d eps=%g m=%d: %r", kind, n, epsilon, grid.m, value)
        rows.append(LadderRow(moll.epsilon, grid.m, value, complex(reference)))
    return rows


def write_ladder_csv(rows: Sequence[LadderRow], path) -> Path:
    """CSV: epsilon, grid_m, re_value, im_value, reference_re, reference_im, abs_error."""
    path = Path(path)
    if path.is_dir():
        path = path / LADDER_CSV
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epsilon", "grid_m", "re_value", "im_value", "reference_re", "reference_im", "abs_error"])
        for row in rows:
            writer.writerow(
                [
                    repr(row.epsilon),
                    row.grid_m,
                    repr(row.value.real),
                    repr(row.value.imag),
                    repr(row.reference.real),
                    repr(row.reference.imag),
                    repr(row.abs_error),
                ]
            )
    return path
