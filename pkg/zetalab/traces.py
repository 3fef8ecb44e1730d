"""
Weighted periodic-orbit sums tr_n and quadrature checks of the operator identities.

tr_n = sum over Fix T^n of g_n(x) / |det(Id - DT^n(x))|, with g_n the product of
g along the orbit. The identity checks pair functions by uniform-grid
quadrature, which is spectrally accurate on the torus.
"""

import csv
import json
import logging
import math
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from .constants import ORBITS, TOLERANCE_DEFAULTS, TRACES, TRACES_CSV, TRACES_JSON
from .dynamics import eval_map, inverse_map, jacobian_determinant, reduce
from .errors import MissingArtifacts, SchemaMismatch, SingularMonodromy
from .models import MapSpec, OrbitSet, QuadratureGrid, TraceTable, TrigPolynomial, WeightSpec
from .orbits import OrbitCache
from .workers import map_array_chunks, ordered_map

logger = logging.getLogger(__name__)

OrbitSource = Union[OrbitCache, Callable[[int], OrbitSet]]


# =============================================================================
# ORBIT SUMS
# =============================================================================


def orbit_products(spec: MapSpec, weight: WeightSpec, x: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Walk n steps from x and return (g_n(x), det DT^n(x)).

    The determinant is the product of the step determinants, which avoids the
    cancellation of taking det of a large monodromy matrix.
    """
    y = reduce(x)
    g_n = np.ones(y.shape[:-1], dtype=complex)
    det_n = np.ones(y.shape[:-1])
    for _ in range(n):
        g_n = g_n * weight.evaluate(y)
        det_n = det_n * jacobian_determinant(spec, y)
        y = eval_map(spec, y)
    return g_n, det_n


def weight_along_orbit(spec: MapSpec, weight: WeightSpec, x: np.ndarray, n: int):
    """g_n(x) = prod_{i<n} g(T^i x); a scalar for a single point, an array otherwise."""
    x = np.asarray(x, dtype=float)
    g_n, _ = orbit_products(spec, weight, x, n)
    return complex(g_n) if g_n.ndim == 0 else g_n


def orbit_terms(orbit_set: OrbitSet, spec: MapSpec, weight: WeightSpec, workers: Optional[int] = None) -> np.ndarray:
    """Per-point contributions g_n(x) / |det(Id - DT^n(x))|, in the set's order."""
    n = orbit_set.n

    def chunk(sl: slice) -> np.ndarray:
        g_n, det_n = orbit_products(spec, weight, orbit_set.xs[sl], n)
        # 2x2: det(Id - M) = 1 - tr M + det M
        tr = np.trace(orbit_set.monodromies[sl], axis1=-2, axis2=-1)
        dets = np.abs(1.0 - tr + det_n)
        singular = dets < TRACES["singular_determinant"]
        if singular.any():
            i = sl.start + int(np.nonzero(singular)[0][0])
            raise SingularMonodromy(
                f"|det(Id - DT^{n})| = {dets[singular][0]:.2e} at x={orbit_set.xs[i].tolist()}"
            )
        return g_n / dets

    return map_array_chunks(chunk, len(orbit_set), ORBITS["chunk_size"], workers)


def compensated_sum(values: np.ndarray) -> complex:
    """Correctly rounded sum of complex values (independent of summation order)."""
    values = np.asarray(values, dtype=complex)
    return complex(math.fsum(values.real.tolist()), math.fsum(values.imag.tolist()))


def trace_from_orbits(
    orbit_set: OrbitSet, spec: MapSpec, weight: WeightSpec, workers: Optional[int] = None
) -> complex:
    """
    tr_n from a validated orbit set.

    Raises:
        SingularMonodromy: a point has |det(Id - DT^n(x))| < 1e-14.
    """
    if len(orbit_set) == 0:
        return 0j
    terms = orbit_terms(orbit_set, spec, weight, workers)
    order = np.lexsort(orbit_set.ks.T[::-1])
    return compensated_sum(terms[order])


def trace_table(
    spec: MapSpec,
    weight: WeightSpec,
    n_max: int,
    orbit_source: Optional[OrbitSource] = None,
    tolerances: Optional[Dict[str, float]] = None,
    workers: Optional[int] = None,
) -> TraceTable:
    """tr_1 .. tr_{n_max}; orbit_source is an OrbitCache or any callable n -> OrbitSet."""
    tolerances = dict(tolerances or TOLERANCE_DEFAULTS)
    if orbit_source is None:
        orbit_source = OrbitCache(spec, tolerances.get("orbit", ORBITS["tolerance"]), workers=workers)
    get = orbit_source.get if isinstance(orbit_source, OrbitCache) else orbit_source

    entries = []
    for n in range(1, n_max + 1):
        tr = trace_from_orbits(get(n), spec, weight, workers)
        if weight.is_real and abs(tr.imag) > TRACES["realness_tolerance"] * (1.0 + abs(tr)):
            logger.warning("tr_%d = %r has a large imaginary part for a real weight", n, tr)
        logger.debug("tr_%d = %r", n, tr)
        entries.append(tr)

    return TraceTable(
        map_digest=spec.digest(),
        weight_digest=weight.digest(),
        entries=tuple(entries),
        tolerances=tolerances,
    )


# =============================================================================
# OPERATOR IDENTITIES BY QUADRATURE
# =============================================================================


def transfer_apply(spec: MapSpec, weight: WeightSpec, h: TrigPolynomial, x: np.ndarray, n: int) -> np.ndarray:
    """(T_g^n h)(x) = g_n(x) h(T^n x)."""
    y = reduce(x)
    value = np.ones(y.shape[:-1], dtype=complex)
    for _ in range(n):
        value = value * weight.evaluate(y)
        y = eval_map(spec, y)
    return value * h.evaluate(y)


def dual_apply(
    spec: MapSpec,
    weight: WeightSpec,
    f: TrigPolynomial,
    x: np.ndarray,
    n: int,
    tol: float = TOLERANCE_DEFAULTS["inverse"],
) -> np.ndarray:
    """(T_g*^n f)(x): n steps of u -> (g u)(T^-1 x) / |det DT(T^-1 x)|."""
    y = reduce(x)
    value = np.ones(y.shape[:-1], dtype=complex)
    for _ in range(n):
        y = inverse_map(spec, y, tol)
        value = value * weight.evaluate(y) / np.abs(jacobian_determinant(spec, y))
    return value * f.evaluate(y)


def grid_integral(integrand: Callable[[np.ndarray], np.ndarray], grid_m: int, workers: Optional[int] = None) -> complex:
    """Uniform-grid quadrature over [0,1)^2, reduced tile by tile in a fixed order."""
    grid = QuadratureGrid(grid_m)
    tiles = list(grid.row_tiles(max(1, min(grid_m, 64))))
    partial = ordered_map(lambda tile: complex(np.sum(integrand(tile.reshape(-1, 2)))), tiles, workers)
    return compensated_sum(np.array(partial)) * grid.weight


def duality_check(
    spec: MapSpec,
    weight: WeightSpec,
    h: TrigPolynomial,
    f: TrigPolynomial,
    grid_m: int = TRACES["grid_m"],
    tol: float = TOLERANCE_DEFAULTS["inverse"],
    workers: Optional[int] = None,
) -> float:
    """|<conj(T_g h), f> - <conj(h), T_g* f>|, i.e. |int (T_g h) f - int h (T_g* f)|."""
    left = grid_integral(lambda x: transfer_apply(spec, weight, h, x, 1) * f.evaluate(x), grid_m, workers)
    right = grid_integral(lambda x: h.evaluate(x) * dual_apply(spec, weight, f, x, 1, tol), grid_m, workers)
    logger.debug("duality: %r vs %r", left, right)
    return abs(left - right)


def powers_identity_residuals(
    spec: MapSpec,
    weight: WeightSpec,
    h: TrigPolynomial,
    f: TrigPolynomial,
    n: int,
    grid_m: int = TRACES["grid_m"],
    tol: float = TOLERANCE_DEFAULTS["inverse"],
    workers: Optional[int] = None,
) -> Tuple[float, float]:
    """
    Residuals of the powers identity against the reference int (T_g^{2n} h) f.

    Returns:
        (|int (T_g^n h)(T_g*^n f) - ref|, |int h (T_g*^{2n} f) - ref|)
    """
    ref = grid_integral(lambda x: transfer_apply(spec, weight, h, x, 2 * n) * f.evaluate(x), grid_m, workers)
    split = grid_integral(
        lambda x: transfer_apply(spec, weight, h, x, n) * dual_apply(spec, weight, f, x, n, tol), grid_m, workers
    )
    dual = grid_integral(lambda x: h.evaluate(x) * dual_apply(spec, weight, f, x, 2 * n, tol), grid_m, workers)
    return abs(split - ref), abs(dual - ref)


def powers_identity_check(
    spec: MapSpec,
    weight: WeightSpec,
    h: TrigPolynomial,
    f: TrigPolynomial,
    n: int,
    grid_m: int = TRACES["grid_m"],
    tol: float = TOLERANCE_DEFAULTS["inverse"],
    workers: Optional[int] = None,
) -> float:
    """|int (T_g^n h)(T_g*^n f) - int (T_g^{2n} h) f| by grid quadrature."""
    return powers_identity_residuals(spec, weight, h, f, n, grid_m, tol, workers)[0]


# =============================================================================
# TRACE TABLE FILES
# =============================================================================


def write_trace_table(table: TraceTable, out_dir) -> Tuple[Path, Path]:
    """traces.csv (n, re_tr, im_tr) plus the traces.json sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / TRACES_CSV, out_dir / TRACES_JSON
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "re_tr", "im_tr"])
        for n, tr in enumerate(table.entries, start=1):
            writer.writerow([n, repr(tr.real), repr(tr.imag)])
    json_path.write_text(json.dumps(table.sidecar(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return csv_path, json_path


def read_trace_table(out_dir) -> TraceTable:
    """
    Load a table written by write_trace_table.

    Raises:
        MissingArtifacts: either file is absent.
        SchemaMismatch: the files are malformed or disagree.
    """
    out_dir = Path(out_dir)
    csv_path, json_path = out_dir / TRACES_CSV, out_dir / TRACES_JSON
    missing = [p.name for p in (csv_path, json_path) if not p.exists()]
    if missing:
        raise MissingArtifacts(f"missing {', '.join(missing)} in {out_dir}; run the traces command first")
    try:
        sidecar = json.loads(json_path.read_text(encoding="utf-8"))
        with open(csv_path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        entries = tuple(complex(float(r["re_tr"]), float(r["im_tr"])) for r in rows)
        ns = [int(r["n"]) for r in rows]
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise SchemaMismatch(f"cannot parse trace table in {out_dir}: {e}")
    if ns != list(range(1, len(ns) + 1)) or len(ns) != sidecar.get("n_max"):
        raise SchemaMismatch(f"trace table in {out_dir} has gaps or disagrees with its sidecar")
    return TraceTable(
        map_digest=sidecar["map_digest"],
        weight_digest=sidecar["weight_digest"],
        entries=entries,
        tolerances=dict(sidecar.get("tolerances", {})),
    )
