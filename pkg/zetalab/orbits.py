"""
Periodic-point enumeration for hyperbolic torus maps.

Fix T^n of the linear part is found by an exact lattice scan; perturbed
maps continue every point by Newton's method, keeping its lift class.
Validated sets are cached in memory and as newline-delimited JSON on disk.
"""

import dataclasses
import json
import logging
import math
import threading
import time
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .constants import ORBITS
from .dynamics import contraction_constant, eval_lift, eval_map, jacobian, lift_orbit, reduce
from .errors import (
    CollisionDetected,
    ConfigError,
    ContinuationFailure,
    Degenerate,
    DigestMismatch,
    OrbitValidationError,
    SchemaMismatch,
)
from .models import MapSpec, OrbitSet, ValidationFailure, ValidationReport, content_digest
from .workers import chunk_slices, ordered_map

logger = logging.getLogger(__name__)

IntMatrix = Tuple[Tuple[int, ...], ...]

# int64 products below this bound cannot overflow
_SAFE_INT = 2**62


# =============================================================================
# EXACT INTEGER HELPERS
# =============================================================================


def int_matrix_power(A: IntMatrix, n: int) -> IntMatrix:
    """A^n with Python integers (no overflow)."""
    result = ((1, 0), (0, 1))
    for _ in range(n):
        result = tuple(
            tuple(sum(A[i][l] * result[l][j] for l in range(2)) for j in range(2)) for i in range(2)
        )
    return result


def fixed_point_matrix(A: IntMatrix, n: int) -> IntMatrix:
    """A^n - Id."""
    An = int_matrix_power(A, n)
    return ((An[0][0] - 1, An[0][1]), (An[1][0], An[1][1] - 1))


def expected_count(A: IntMatrix, n: int) -> int:
    """|det(A^n - Id)|, the number of points of Fix T^n."""
    B = fixed_point_matrix(A, n)
    return abs(B[0][0] * B[1][1] - B[0][1] * B[1][0])


def _divisors(n: int) -> List[int]:
    return [m for m in range(1, n + 1) if n % m == 0]


def _as_map(A) -> MapSpec:
    if isinstance(A, MapSpec):
        return A.linear_part()
    return MapSpec(tuple(tuple(int(v) for v in row) for row in A))


def effective_tolerance(tol: float, monodromies: np.ndarray) -> np.ndarray:
    """
    Residual tolerance per point, floored at the rounding level of the n-step lift.

    Below rounding_factor * eps * |DT^n| a residual is not measurable in double precision.
    """
    norms = np.linalg.norm(monodromies, ord=2, axis=(-2, -1))
    return np.maximum(tol, ORBITS["rounding_factor"] * np.finfo(float).eps * norms)


# =============================================================================
# LINEAR ENUMERATION
# =============================================================================


def _k2_interval(alpha, beta, k1, count, s):
    """Bounds on k2 from 0 <= s * (beta k1 + alpha k2) <= count - 1 (alpha != 0)."""
    a, b = s * alpha, s * beta
    lo, hi = -b * k1, count - 1 - b * k1
    if a < 0:
        a, lo, hi = -a, -hi, -lo
    return -((-lo) // a), hi // a


def _scan_lattice_numpy(B: IntMatrix, adj: IntMatrix, s: int, count: int) -> np.ndarray:
    lo1 = sum(min(0, v) for v in B[0])
    hi1 = sum(max(0, v) for v in B[0])
    lo2 = sum(min(0, v) for v in B[1])
    hi2 = sum(max(0, v) for v in B[1])
    k1 = np.arange(lo1, hi1 + 1, dtype=np.int64)
    lower = np.full(k1.shape, lo2, dtype=np.int64)
    upper = np.full(k1.shape, hi2, dtype=np.int64)
    for row in adj:
        beta, alpha = row
        if alpha == 0:
            value = s * beta * k1
            empty = (value < 0) | (value > count - 1)
            upper = np.where(empty, lower - 1, upper)
            continue
        lo, hi = _k2_interval(alpha, beta, k1, count, s)
        lower = np.maximum(lower, lo)
        upper = np.minimum(upper, hi)
    counts = np.maximum(upper - lower + 1, 0)
    total = int(counts.sum())
    starts = np.cumsum(counts) - counts
    k1_all = np.repeat(k1, counts)
    k2_all = np.repeat(lower, counts) + (np.arange(total, dtype=np.int64) - np.repeat(starts, counts))
    return np.stack([k1_all, k2_all], axis=-1)


def _scan_lattice_python(B: IntMatrix, adj: IntMatrix, s: int, count: int) -> List[Tuple[int, int]]:
    lo1 = sum(min(0, v) for v in B[0])
    hi1 = sum(max(0, v) for v in B[0])
    lo2 = sum(min(0, v) for v in B[1])
    hi2 = sum(max(0, v) for v in B[1])
    found = []
    for k1 in range(lo1, hi1 + 1):
        lower, upper = lo2, hi2
        for beta, alpha in adj:
            if alpha == 0:
                if not 0 <= s * beta * k1 <= count - 1:
                    upper = lower - 1
                continue
            lo, hi = _k2_interval(alpha, beta, k1, count, s)
            lower, upper = max(lower, lo), min(upper, hi)
        found.extend((k1, k2) for k2 in range(lower, upper + 1))
    return found


def _exact_primitive_periods(A: IntMatrix, nums: np.ndarray, n: int, count: int) -> np.ndarray:
    """Smallest m | n with (A^m - Id) x in Z^d, for x = nums / count."""
    periods = np.zeros(nums.shape[0], dtype=np.int64)
    for m in _divisors(n):
        Bm = np.array(fixed_point_matrix(A, m), dtype=np.int64)
        todo = periods == 0
        image = nums[todo] @ Bm.T
        closed = np.all(image % count == 0, axis=-1)
        idx = np.nonzero(todo)[0][closed]
        periods[idx] = m
    return periods


def exact_linear_residuals(B: IntMatrix, xs: np.ndarray, ks: np.ndarray) -> np.ndarray:
    """|B x - k| evaluated exactly for the stored floating-point x."""
    out = np.empty(xs.shape[0])
    for i, (x, k) in enumerate(zip(xs.tolist(), ks.tolist())):
        fx = [Fraction(v) for v in x]
        r = [B[j][0] * fx[0] + B[j][1] * fx[1] - k[j] for j in range(2)]
        out[i] = math.hypot(float(r[0]), float(r[1]))
    return out


def enumerate_linear(A, n: int) -> OrbitSet:
    """
    All of Fix T^n for the linear automorphism A, by exact lattice scan.

    Scans the integer bounding box of (A^n - Id)[0,1)^d row by row, solving
    each row's admissible k_2 interval exactly (Cramer with the integer
    determinant). Points come out sorted by lift class k.

    Raises:
        Degenerate: det(A^n - Id) = 0.
    """
    spec = _as_map(A)
    if n < 1:
        raise ConfigError("period n must be at least 1")
    B = fixed_point_matrix(spec.A, n)
    det = B[0][0] * B[1][1] - B[0][1] * B[1][0]
    if det == 0:
        raise Degenerate(f"det(A^{n} - Id) = 0: the linear part is not hyperbolic")
    count, s = abs(det), (1 if det > 0 else -1)
    adj = ((B[1][1], -B[0][1]), (-B[1][0], B[0][0]))

    extent = max(abs(v) for row in B for v in row) * 2 + count
    biggest = max(abs(v) for row in adj for v in row)
    if biggest * extent < _SAFE_INT:
        ks = _scan_lattice_numpy(B, adj, s, count)
        nums = s * (ks @ np.array(adj, dtype=np.int64).T)
        periods = _exact_primitive_periods(spec.A, nums, n, count)
    else:
        logger.info("Lattice scan for n=%d exceeds int64, using Python integers", n)
        pairs = _scan_lattice_python(B, adj, s, count)
        ks = np.array(pairs, dtype=object)
        nums = np.array(
            [[s * (adj[i][0] * k1 + adj[i][1] * k2) for i in range(2)] for k1, k2 in pairs], dtype=object
        )
        periods = np.array(
            [
                next(
                    m
                    for m in _divisors(n)
                    if all(
                        sum(fixed_point_matrix(spec.A, m)[i][j] * int(row[j]) for j in range(2)) % count == 0
                        for i in range(2)
                    )
                )
                for row in nums
            ],
            dtype=np.int64,
        )
        ks = ks.astype(np.int64)

    if ks.shape[0] != count:
        raise Degenerate(f"lattice scan found {ks.shape[0]} points, expected {count}")

    if nums.dtype == object:
        xs = np.array([[float(Fraction(int(a), count)) for a in row] for row in nums.tolist()]).reshape(-1, 2)
    else:
        xs = nums.astype(float) / count
    An = np.array(int_matrix_power(spec.A, n), dtype=float)
    monodromies = np.broadcast_to(An, (count, 2, 2)).copy()
    residuals = exact_linear_residuals(B, xs, ks)
    logger.debug("Enumerated %d points of Fix T^%d", count, n)
    return OrbitSet(
        map_digest=spec.digest(),
        n=n,
        expected_count=count,
        ks=ks,
        xs=xs,
        residuals=residuals,
        monodromies=monodromies,
        primitive_periods=periods,
    )


# =============================================================================
# NEWTON CONTINUATION
# =============================================================================


def periodic_residual(spec: MapSpec, x: np.ndarray, ks: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """F(x) = T~^n(x) - x - k and DT^n(x)."""
    frac, offset, J = lift_orbit(spec, x, n)
    F = (frac - x) + (offset - ks).astype(float)
    return F, J


def newton_periodic_points(
    spec: MapSpec,
    x0: np.ndarray,
    ks: np.ndarray,
    n: int,
    tol: float = ORBITS["tolerance"],
    max_iterations: int = ORBITS["newton_max_iterations"],
    max_halvings: int = ORBITS["newton_max_halvings"],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Solve T~^n(x) - x - k = 0 from x0 for every row, with step halving on overshoot.

    Returns:
        (x, residual norms, iteration counts, converged mask)
    """
    x = np.array(x0, dtype=float, copy=True)
    F, J = periodic_residual(spec, x, ks, n)
    norms = np.linalg.norm(F, axis=-1)
    limits = effective_tolerance(tol, J)
    iterations = np.zeros(x.shape[0], dtype=np.int64)
    eye = np.eye(spec.dimension)

    for _ in range(max_iterations):
        idx = np.nonzero(norms > limits)[0]
        if idx.size == 0:
            break
        step = np.linalg.solve(J[idx] - eye, F[idx][..., None])[..., 0]
        t = np.ones(idx.size)
        for _ in range(max_halvings + 1):
            trial = x[idx] - t[:, None] * step
            F_t, J_t = periodic_residual(spec, trial, ks[idx], n)
            n_t = np.linalg.norm(F_t, axis=-1)
            worse = n_t > norms[idx]
            if not worse.any():
                break
            t = np.where(worse, 0.5 * t, t)
        x[idx], F[idx], J[idx], norms[idx] = trial, F_t, J_t, n_t
        limits[idx] = effective_tolerance(tol, J_t)
        iterations[idx] += 1

    return x, norms, iterations, norms <= limits


def shooting_seeds(spec: MapSpec, x0: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Linear orbit y_0..y_{n-1} of each seed and the integer step offsets m_i.

    At the seeds T~(y_i) = y_{i+1} + m_i (indices mod n) holds for the linear
    part, and sum_i A^(n-1-i) m_i is the lift class of y_0.
    """
    linear = spec.linear_part()
    ys = [np.asarray(x0, dtype=float)]
    for _ in range(n - 1):
        ys.append(eval_map(linear, ys[-1]))
    Y = np.stack(ys, axis=-2)
    m = np.rint(eval_lift(linear, Y) - np.roll(Y, -1, axis=-2)).astype(np.int64)
    return Y, m


def shooting_class(spec: MapSpec, m: np.ndarray) -> np.ndarray:
    """Lift class sum_i A^(n-1-i) m_i of a shooting orbit, by Horner's rule."""
    A = spec.matrix.astype(np.int64)
    k = np.zeros(m.shape[:1] + m.shape[2:], dtype=np.int64)
    for i in range(m.shape[1]):
        k = k @ A.T + m[:, i]
    return k


def shooting_system(spec: MapSpec, Y: np.ndarray, m: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Residuals G_i = T~(y_i) - y_{i+1} - m_i and the cyclic block-bidiagonal Jacobian.

    Block (i, i) is DT(y_i) and block (i, i+1 mod n) is -Id.
    """
    P, n, d = Y.shape
    G = eval_lift(spec, Y) - np.roll(Y, -1, axis=1) - m
    D = jacobian(spec, Y)
    M = np.zeros((P, n * d, n * d))
    eye = np.eye(d)
    for i in range(n):
        j = (i + 1) % n
        M[:, i * d : (i + 1) * d, i * d : (i + 1) * d] += D[:, i]
        M[:, i * d : (i + 1) * d, j * d : (j + 1) * d] -= eye
    return G, M


def shooting_newton(
    spec: MapSpec,
    Y0: np.ndarray,
    m: np.ndarray,
    tol: float = ORBITS["tolerance"],
    max_iterations: int = ORBITS["newton_max_iterations"],
    max_halvings: int = ORBITS["newton_max_halvings"],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Newton's method on the whole orbit at once (multiple shooting).

    Each step only sees one application of DT, so seed errors are not
    amplified by |DT^n| the way they are for T~^n(x) - x - k.

    Returns:
        (Y, largest step residual per orbit, converged mask)
    """
    Y = np.array(Y0, dtype=float, copy=True)
    P, n, d = Y.shape
    G, M = shooting_system(spec, Y, m)
    norms = np.abs(G).max(axis=(1, 2))
    target = min(tol, ORBITS["shooting_tolerance"])
    # Stalled rows freeze; no row's path depends on the rest of its chunk
    active = np.ones(P, dtype=bool)

    for _ in range(max_iterations):
        idx = np.nonzero(active & (norms > target))[0]
        if idx.size == 0:
            break
        step = np.linalg.solve(M[idx], G[idx].reshape(idx.size, n * d, 1)).reshape(idx.size, n, d)
        t = np.ones(idx.size)
        for _ in range(max_halvings + 1):
            trial = Y[idx] - t[:, None, None] * step
            G_t, M_t = shooting_system(spec, trial, m[idx])
            n_t = np.abs(G_t).max(axis=(1, 2))
            worse = n_t > norms[idx]
            if not worse.any():
                break
            t = np.where(worse, 0.5 * t, t)
        improved = n_t < norms[idx]
        keep = idx[improved]
        Y[keep], G[keep], M[keep], norms[keep] = trial[improved], G_t[improved], M_t[improved], n_t[improved]
        active[idx[~improved]] = False

    return Y, norms, norms <= tol


def _continue_chunk(spec: MapSpec, n: int, xs: np.ndarray, ks: np.ndarray, tol: float) -> np.ndarray:
    Y, m = shooting_seeds(spec, xs, n)
    classes = shooting_class(spec, m)
    moved = np.nonzero(np.any(classes != ks, axis=-1))[0]
    if moved.size:
        i = moved[0]
        raise ContinuationFailure(ks[i], f"linear orbit closes in class {classes[i].tolist()}")

    Y_full, norms, ok = shooting_newton(spec, Y, m, tol)
    if not ok.all():
        failed = np.nonzero(~ok)[0]
        logger.warning("Shooting Newton stalled for %d seeds at n=%d, using the epsilon ladder", failed.size, n)
        Y_ladder = Y[failed]
        for fraction in ORBITS["epsilon_ladder"]:
            stage = spec.with_epsilon(fraction * spec.epsilon)
            Y_ladder, stage_norms, stage_ok = shooting_newton(stage, Y_ladder, m[failed], tol)
            if not stage_ok.all():
                bad = np.nonzero(~stage_ok)[0][0]
                raise ContinuationFailure(
                    ks[failed[bad]],
                    f"step residual {stage_norms[bad]:.3e} at {fraction:g} epsilon on the ladder",
                )
        Y_full[failed] = Y_ladder

    # One-shot polish of y_0 against T~^n(x) - x - k
    x, residuals, iterations, polished = newton_periodic_points(spec, Y_full[:, 0], ks, n, tol)
    if not polished.all():
        bad = np.nonzero(~polished)[0][0]
        raise ContinuationFailure(ks[bad], f"residual {residuals[bad]:.3e} after polishing")
    logger.debug("Continued %d seeds, polish used <= %d iterations", xs.shape[0], int(iterations.max(initial=0)))
    return x


def _float_primitive_periods(spec: MapSpec, xs: np.ndarray, n: int, thresholds: np.ndarray) -> np.ndarray:
    """Smallest m | n with dist(T^m x, x) <= threshold; 0 where none qualifies."""
    periods = np.zeros(xs.shape[0], dtype=np.int64)
    y = xs.copy()
    done = 0
    for m in range(1, n + 1):
        y = eval_map(spec, y)
        if n % m:
            continue
        d = np.linalg.norm(y - xs - np.round(y - xs), axis=-1)
        hit = (periods == 0) & (d <= thresholds)
        periods[hit] = m
        done += int(hit.sum())
        if done == xs.shape[0]:
            break
    return periods


def continue_orbits(
    spec: MapSpec,
    n: int,
    seeds: OrbitSet,
    tol: float = ORBITS["tolerance"],
    workers: Optional[int] = None,
) -> OrbitSet:
    """
    Continue Fix T^n from the linear part to the perturbed map, one lift class at a time.

    Raises:
        ContinuationFailure: epsilon leaves the contraction regime, or a seed does not
            converge even along the epsilon ladder.
        CollisionDetected: two continued points coincide within 10 tol.
    """
    if seeds.n != n:
        raise ConfigError(f"seeds are for n={seeds.n}, not n={n}")
    if spec.is_linear:
        return dataclasses.replace(seeds, map_digest=spec.digest())
    kappa = contraction_constant(spec)
    if kappa >= 1.0 and len(seeds):
        raise ContinuationFailure(
            seeds.ks[0], f"epsilon={spec.epsilon:g} leaves the contraction regime (kappa={kappa:.3f} >= 1)"
        )

    slices = chunk_slices(len(seeds), ORBITS["chunk_size"])
    parts = ordered_map(lambda sl: _continue_chunk(spec, n, seeds.xs[sl], seeds.ks[sl], tol), slices, workers)
    x = np.concatenate(parts, axis=0) if parts else seeds.xs.copy()

    # Move each point back into [0,1)^d and shift its lift class to match
    xs = reduce(x)
    shift = np.rint(x - xs).astype(np.int64)
    B = np.array(fixed_point_matrix(spec.A, n), dtype=np.int64)
    ks = seeds.ks - shift @ B.T
    order = np.lexsort((ks[:, 1], ks[:, 0]))
    xs, ks = xs[order], ks[order]
    F, J = periodic_residual(spec, xs, ks, n)
    residuals = np.linalg.norm(F, axis=-1)

    separation = ORBITS["separation_factor"] * tol
    if len(xs) > 1:
        pairs = cKDTree(xs, boxsize=1.0).query_pairs(separation, output_type="ndarray")
        if len(pairs):
            i, j = pairs[0]
            raise CollisionDetected(
                f"continued points for k={ks[i].tolist()} and k={ks[j].tolist()} coincide within {separation:.1e}"
            )

    thresholds = ORBITS["separation_factor"] * effective_tolerance(tol, J)
    periods = _float_primitive_periods(spec, xs, n, thresholds)
    logger.info("Continued %d points of Fix T^%d (max residual %.2e)", len(xs), n, float(residuals.max(initial=0)))
    return OrbitSet(
        map_digest=spec.digest(),
        n=n,
        expected_count=seeds.expected_count,
        ks=ks,
        xs=xs,
        residuals=residuals,
        monodromies=J,
        primitive_periods=periods,
    )


# =============================================================================
# VALIDATION
# =============================================================================


def validate_orbit_set(orbit_set: OrbitSet, spec: MapSpec, tol: float = ORBITS["tolerance"]) -> ValidationReport:
    """Recompute residuals, count, separation and primitive periods; list every failure."""
    n = orbit_set.n
    failures: List[ValidationFailure] = []
    expected = expected_count(spec.A, n)
    if len(orbit_set) != expected or orbit_set.expected_count != expected:
        failures.append(ValidationFailure("count", -1, f"{len(orbit_set)} points, expected {expected}"))
    if orbit_set.map_digest != spec.digest():
        failures.append(ValidationFailure("digest", -1, "set was computed for a different map"))

    if len(orbit_set) == 0:
        return ValidationReport(n, 0, expected, 0.0, math.inf, failures)

    if spec.is_linear:
        residuals = exact_linear_residuals(fixed_point_matrix(spec.A, n), orbit_set.xs, orbit_set.ks)
        monodromies = np.broadcast_to(np.array(int_matrix_power(spec.A, n), dtype=float), (len(orbit_set), 2, 2))
    else:
        F, monodromies = periodic_residual(spec, orbit_set.xs, orbit_set.ks, n)
        residuals = np.linalg.norm(F, axis=-1)
    limits = effective_tolerance(tol, monodromies)
    for i in np.nonzero(residuals > limits)[0]:
        failures.append(ValidationFailure("residual", int(i), f"residual {residuals[i]:.3e} > {limits[i]:.1e}"))

    dets = np.abs(np.linalg.det(np.eye(2) - monodromies))
    for i in np.nonzero(dets <= 0.0)[0]:
        failures.append(ValidationFailure("hyperbolicity", int(i), "det(Id - DT^n) vanishes"))

    separation = ORBITS["separation_factor"] * tol
    min_sep = math.inf
    if len(orbit_set) > 1:
        tree = cKDTree(orbit_set.xs, boxsize=1.0)
        for i, j in tree.query_pairs(separation, output_type="ndarray"):
            failures.append(ValidationFailure("separation", int(i), f"points {i} and {j} closer than {separation:.1e}"))
        dist, _ = tree.query(orbit_set.xs, k=2)
        min_sep = float(dist[:, 1].min())

    thresholds = ORBITS["separation_factor"] * limits
    periods = _float_primitive_periods(spec, orbit_set.xs, n, thresholds)
    for i in np.nonzero(periods != orbit_set.primitive_periods)[0]:
        failures.append(
            ValidationFailure(
                "primitive_period",
                int(i),
                f"stored {int(orbit_set.primitive_periods[i])}, recomputed {int(periods[i])}",
            )
        )

    return ValidationReport(
        n=n,
        count=len(orbit_set),
        expected_count=expected,
        max_residual=float(residuals.max()),
        min_separation=min_sep,
        failures=failures,
    )


def image_permutation(orbit_set: OrbitSet, spec: MapSpec, tol: float = 1e-10) -> Optional[np.ndarray]:
    """Index of T(x_i) inside the set for every i, or None when T does not permute the set."""
    if len(orbit_set) == 0:
        return np.zeros(0, dtype=np.int64)
    images = eval_map(spec, orbit_set.xs)
    dist, idx = cKDTree(orbit_set.xs, boxsize=1.0).query(images)
    if dist.max() > tol or np.unique(idx).size != idx.size:
        return None
    return idx


# =============================================================================
# ON-DISK CACHE
# =============================================================================


def orbit_cache_store(orbit_set: OrbitSet, path) -> None:
    """Write the set as newline-delimited JSON (header record, then one record per point)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(orbit_set.header(), sort_keys=True)]
    for k, x, r, mono, p in zip(
        orbit_set.ks.tolist(),
        orbit_set.xs.tolist(),
        orbit_set.residuals.tolist(),
        orbit_set.monodromies.tolist(),
        orbit_set.primitive_periods.tolist(),
    ):
        lines.append(
            json.dumps({"k": k, "x": x, "residual": r, "monodromy": mono, "primitive_period": p}, sort_keys=True)
        )
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


def orbit_cache_load(path, map_digest: str, n: int) -> OrbitSet:
    """
    Read a set written by orbit_cache_store.

    Raises:
        SchemaMismatch: empty, malformed, or for another n.
        DigestMismatch: the cache was built for a different map.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise SchemaMismatch(f"cannot read orbit cache {path}: {e}")
    if not lines:
        raise SchemaMismatch(f"orbit cache {path} is empty")
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:] if line.strip()]
    except json.JSONDecodeError as e:
        raise SchemaMismatch(f"orbit cache {path} is not valid JSON lines: {e}")
    if not isinstance(header, dict) or header.get("schema") != ORBITS["schema"]:
        raise SchemaMismatch(f"orbit cache {path} has schema {header.get('schema') if isinstance(header, dict) else None!r}")
    if header.get("map_digest") != map_digest:
        raise DigestMismatch(f"orbit cache {path} was built for map {str(header.get('map_digest'))[:12]}")
    if header.get("n") != n:
        raise SchemaMismatch(f"orbit cache {path} holds n={header.get('n')}, not n={n}")
    try:
        count = len(records)
        return OrbitSet(
            map_digest=map_digest,
            n=n,
            expected_count=int(header["expected_count"]),
            ks=np.array([r["k"] for r in records], dtype=np.int64).reshape(count, 2),
            xs=np.array([r["x"] for r in records], dtype=float).reshape(count, 2),
            residuals=np.array([r["residual"] for r in records], dtype=float),
            monodromies=np.array([r["monodromy"] for r in records], dtype=float).reshape(count, 2, 2),
            primitive_periods=np.array([r["primitive_period"] for r in records], dtype=np.int64),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaMismatch(f"orbit cache {path} has malformed records: {e}")


class OrbitCache:
    """
    Validated orbit sets for one map, kept in memory and on disk.

    - Enumerates the linear part exactly and continues to the perturbed map
    - Validates before storing; a failed validation raises
    - Thread-safe lookups; each cache file has a single writer
    """

    def __init__(
        self,
        spec: MapSpec,
        tol: float = ORBITS["tolerance"],
        cache_dir=None,
        workers: Optional[int] = None,
    ):
        self.spec = spec
        self.tol = tol
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.workers = workers
        self.key = content_digest({"map": spec.to_dict(), "tolerance": tol})
        self.hits: Dict[int, bool] = {}
        self._sets: Dict[int, OrbitSet] = {}
        self._lock = threading.Lock()

    def path_for(self, n: int) -> Optional[Path]:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"orbits-{self.key[:16]}-n{n:02d}.ndjson"

    def get(self, n: int) -> OrbitSet:
        with self._lock:
            if n in self._sets:
                self.hits[n] = True
                return self._sets[n]

        path = self.path_for(n)
        if path is not None and path.exists():
            try:
                loaded = orbit_cache_load(path, self.spec.digest(), n)
                with self._lock:
                    self._sets[n] = loaded
                    self.hits[n] = True
                logger.info("Orbit cache hit for n=%d (%s)", n, path.name)
                return loaded
            except (SchemaMismatch, DigestMismatch) as e:
                logger.warning("Ignoring orbit cache %s: %s", path, e)

        start = time.perf_counter()
        orbit_set = self.compute(n)
        logger.info("Computed Fix T^%d: %d points in %.2fs", n, len(orbit_set), time.perf_counter() - start)
        if path is not None:
            orbit_cache_store(orbit_set, path)
        with self._lock:
            self._sets[n] = orbit_set
            self.hits[n] = False
        return orbit_set

    def compute(self, n: int) -> OrbitSet:
        seeds = enumerate_linear(self.spec, n)
        orbit_set = continue_orbits(self.spec, n, seeds, self.tol, self.workers)
        report = validate_orbit_set(orbit_set, self.spec, self.tol)
        if not report.ok:
            raise OrbitValidationError(
                f"Fix T^{n} failed validation ({', '.join(report.kinds())}): {report.failures[0].detail}"
            )
        return orbit_set

    def get_many(self, ns: Sequence[int]) -> List[OrbitSet]:
        return [self.get(n) for n in ns]
