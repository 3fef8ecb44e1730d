"""
Taylor series of the dynamical determinant, its certified disk, and its zeros.

c_0 = 1 and c_m = -(1/m) sum_{k=1}^m tr_k c_{m-k}, i.e. exp(-sum tr_n z^n / n).
Zeros come from Aberth-Ehrlich simultaneous iteration on the truncation and
are kept only when they persist across truncation orders.
"""

import csv
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .constants import DETERMINANT, RESONANCES_CSV, RESONANCES_JSON, SERIES_CSV, TOLERANCE_DEFAULTS
from .errors import (
    AmbiguousRounding,
    ConfigError,
    DegenerateFit,
    InsufficientTraces,
    MissingArtifacts,
    RootIterationStall,
    SchemaMismatch,
)
from .models import (
    DeterminantSeries,
    FitReport,
    MapSpec,
    PolynomialRoot,
    ResonanceReport,
    SpectralBoundParams,
    SpectrumEstimate,
    TraceTable,
    WeightSpec,
    ZeroRecord,
    complex_to_pair,
)
from .spectral import match_resonances, projector_traces
from .traces import OrbitSource, compensated_sum, trace_table

logger = logging.getLogger(__name__)

Traces = Union[TraceTable, Sequence[complex], np.ndarray]


def _trace_values(traces: Traces) -> List[complex]:
    if isinstance(traces, TraceTable):
        return list(traces.entries)
    return [complex(t) for t in traces]


# =============================================================================
# SERIES
# =============================================================================


def coefficients_from_traces(traces: Traces, N: int) -> DeterminantSeries:
    """
    c_0 .. c_N from tr_1 .. tr_N with compensated convolution sums.

    Raises:
        InsufficientTraces: N exceeds the number of traces.
    """
    tr = _trace_values(traces)
    if N > len(tr):
        raise InsufficientTraces(f"{N} coefficients requested, only {len(tr)} traces available")
    c = [1.0 + 0j]
    for m in range(1, N + 1):
        conv = compensated_sum(np.array([tr[k - 1] * c[m - k] for k in range(1, m + 1)]))
        c.append(-conv / m)
    digests = (traces.map_digest, traces.weight_digest) if isinstance(traces, TraceTable) else ("", "")
    return DeterminantSeries(tuple(c), *digests)


def recursion_residuals(series: DeterminantSeries, traces: Traces) -> np.ndarray:
    """|m c_m + sum_k tr_k c_{m-k}| for m = 1..N."""
    c = series.as_array()
    tr = np.array(_trace_values(traces)[: series.n_max], dtype=complex)
    out = np.empty(series.n_max)
    for m in range(1, series.n_max + 1):
        out[m - 1] = abs(m * c[m] + np.dot(tr[:m], c[m - 1 :: -1][:m]))
    return out


def traces_from_coefficients(series: DeterminantSeries) -> List[complex]:
    """Power sums back from the coefficients: tr_m = -m c_m - sum_{k<m} tr_k c_{m-k}."""
    c = series.coefficients
    if c[0] != 1:
        raise ConfigError("series must start with c_0 = 1")
    tr: List[complex] = []
    for m in range(1, series.n_max + 1):
        conv = compensated_sum(np.array([tr[k - 1] * c[m - k] for k in range(1, m)] or [0j]))
        tr.append(-m * c[m] - conv)
    return tr


def evaluate_series(series: DeterminantSeries, z: complex) -> complex:
    return complex(np.polyval(series.as_array()[::-1], z))


# =============================================================================
# CERTIFIED RADIUS
# =============================================================================


def closest_integer(a: float) -> int:
    """[a]; refuses the half-integer tie."""
    if a - math.floor(a) == 0.5:
        raise AmbiguousRounding(f"the closest integer to {a} is not unique")
    return int(math.floor(a + 0.5))


def spectral_bound_params(
    r: float,
    lam: float,
    g_sup: float,
    sigma: Optional[float] = None,
) -> SpectralBoundParams:
    """
    Radii and cuts for smoothness r, contraction lam and sup norm g_sup.

    p = [r/2], q = r - p, alpha_r = min(p, q). sigma defaults to the smallest
    admissible cut just above max(rho, rho_tilde).
    """
    if not 0.0 < lam < 1.0:
        raise ConfigError(f"lambda must lie in (0, 1), got {lam}")
    if g_sup < 0 or not r > 0:
        raise ConfigError("need g_sup >= 0 and r > 0")
    if math.isinf(r):
        p = q = alpha = math.inf
    else:
        p = closest_integer(r / 2.0)
        q = r - p
        alpha = min(p, q)
    rho = lam ** min(p, q) * g_sup
    rho_tilde = rho * g_sup
    rho_star = g_sup * lam ** (alpha / 2.0)
    floor = max(rho, rho_tilde)
    if sigma is None:
        sigma = floor * (1.0 + DETERMINANT["sigma_gap"])
    return SpectralBoundParams(
        r=r,
        p=p,
        q=q,
        alpha_r=alpha,
        lam=lam,
        g_sup=g_sup,
        rho=rho,
        rho_tilde=rho_tilde,
        rho_star=rho_star,
        sigma=sigma,
        essential_radius=g_sup * lam**alpha,
        certified_cut=max(rho, math.sqrt(rho_tilde)),
        remark_radius=max(1.0 / rho if rho > 0 else math.inf, rho_tilde**-0.5 if rho_tilde > 0 else math.inf),
    )


def certified_radius(params: SpectralBoundParams) -> float:
    """1 / rho_star = (g_sup lam^(alpha_r / 2))^-1; infinite when rho_star vanishes."""
    if params.rho_star == 0.0:
        return math.inf
    return 1.0 / params.rho_star


# =============================================================================
# ROOTS
# =============================================================================


def trimmed_coefficients(series: DeterminantSeries) -> np.ndarray:
    """Coefficients with trailing rounding noise (below trim_tolerance * max|c|) removed."""
    c = series.as_array()
    scale = float(np.max(np.abs(c)))
    keep = len(c)
    while keep > 1 and abs(c[keep - 1]) <= DETERMINANT["trim_tolerance"] * scale:
        keep -= 1
    return c[:keep]


def scaled_residual(c: np.ndarray, z: np.ndarray) -> np.ndarray:
    """|p(z)| / (max|c| max(1, |z|)^N); on the closed unit disk this is |p(z)| / max|c|."""
    z = np.asarray(z, dtype=complex)
    N = len(c) - 1
    scale = float(np.max(np.abs(c))) * np.maximum(1.0, np.abs(z)) ** N
    return np.abs(np.polyval(c[::-1], z)) / scale


def aberth_roots(c: np.ndarray, seed: int = 0) -> np.ndarray:
    """
    All roots of sum c_m z^m by Aberth-Ehrlich iteration.

    Initial guesses sit on the circle of radius |c_0 / c_N|^(1/N) with seeded
    random phase offsets.

    Raises:
        RootIterationStall: some root is not converged to rounding level
            (scaled residual above root_tolerance) within the iteration budget.
    """
    N = len(c) - 1
    if N < 1:
        return np.zeros(0, dtype=complex)
    poly = c[::-1]
    dpoly = np.polyder(poly)
    rng = np.random.default_rng(seed)
    radius = abs(c[0] / c[-1]) ** (1.0 / N)
    angles = 2.0 * np.pi * (np.arange(N) + rng.uniform(0.0, 0.5, N)) / N + rng.uniform(0.0, 2.0 * np.pi)
    z = radius * np.exp(1j * angles)

    for iteration in range(DETERMINANT["root_max_iterations"]):
        p = np.polyval(poly, z)
        dp = np.polyval(dpoly, z)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dp != 0, p / dp, 0.0)
            diff = z[:, None] - z[None, :]
            np.fill_diagonal(diff, 1.0)
            inv = 1.0 / diff
            np.fill_diagonal(inv, 0.0)
            step = ratio / (1.0 - ratio * inv.sum(axis=1))
        step = np.where(np.isfinite(step), step, 0.0)
        z = z - step
        if np.all(np.abs(step) <= 1e-15 * np.maximum(1.0, np.abs(z))):
            logger.debug("Aberth converged in %d iterations (degree %d)", iteration + 1, N)
            break

    for _ in range(DETERMINANT["polish_steps"]):
        dp = np.polyval(dpoly, z)
        step = np.where(dp != 0, np.polyval(poly, z) / np.where(dp != 0, dp, 1.0), 0.0)
        z = z - step

    worst = float(np.max(scaled_residual(c, z)))
    if worst > DETERMINANT["root_tolerance"]:
        raise RootIterationStall(f"root residual {worst:.2e} after {DETERMINANT['root_max_iterations']} iterations")
    return z


def find_zeros(series: DeterminantSeries, radius: float, seed: int = 0) -> List[PolynomialRoot]:
    """
    Roots of the truncation inside |z| < radius, by increasing modulus.

    Each root carries its scaled residual |p(z)| / (max|c| max(1, |z|)^N).

    Raises:
        RootIterationStall: some root stays above root_tolerance after the iteration budget.
    """
    c = trimmed_coefficients(series)
    roots = aberth_roots(c, seed)
    residuals = scaled_residual(c, roots) if len(roots) else np.zeros(0)
    found = [PolynomialRoot(complex(z), float(res)) for z, res in zip(roots, residuals) if abs(z) < radius]
    return sorted(found, key=lambda root: (abs(root.z), root.z.real, root.z.imag))


def _greedy_pairs(left: Sequence[complex], right: Sequence[complex]) -> Dict[int, int]:
    """Closest-first one-to-one pairing, left index -> right index."""
    candidates = sorted((abs(a - b), i, j) for i, a in enumerate(left) for j, b in enumerate(right))
    used_l, used_r, pairs = set(), set(), {}
    for _, i, j in candidates:
        if i in used_l or j in used_r:
            continue
        pairs[i] = j
        used_l.add(i)
        used_r.add(j)
    return pairs


def zero_stability(
    spec: Optional[MapSpec],
    weight: Optional[WeightSpec],
    n_list: Sequence[int],
    radius: float,
    traces: Optional[TraceTable] = None,
    threshold: float = TOLERANCE_DEFAULTS["stability"],
    seed: int = 0,
    orbit_source: Optional[OrbitSource] = None,
) -> List[ZeroRecord]:
    """
    Zeros of the largest truncation, each paired with the nearest root of every smaller one.

    A zero is stable when it has a partner at every N and all partners lie
    within threshold. Traces are computed from (spec, weight) unless given.
    """
    n_list = sorted(set(int(n) for n in n_list))
    if not n_list:
        return []
    if traces is None:
        traces = trace_table(spec, weight, n_list[-1], orbit_source)
    roots = {}
    for N in n_list:
        c = trimmed_coefficients(coefficients_from_traces(traces, N))
        roots[N] = [complex(z) for z in aberth_roots(c, seed)]

    reference = roots[n_list[-1]]
    spreads = [0.0] * len(reference)
    present = [True] * len(reference)
    for N in n_list[:-1]:
        pairs = _greedy_pairs(reference, roots[N])
        for i, z in enumerate(reference):
            if i in pairs:
                spreads[i] = max(spreads[i], abs(roots[N][pairs[i]] - z))
            else:
                present[i] = False

    records = [
        ZeroRecord(
            z=z,
            stability_spread=spreads[i] if present[i] else math.inf,
            inside_certified=abs(z) < radius,
            stable=present[i] and spreads[i] <= threshold,
        )
        for i, z in enumerate(reference)
        if abs(z) < radius
    ]
    records.sort(key=lambda r: (abs(r.z), r.z.real, r.z.imag))
    logger.info(
        "Zero stability over N=%s: %d zeros inside %.4g, %d stable",
        n_list,
        len(records),
        radius,
        sum(r.stable for r in records),
    )
    return records


def stability_radius(records: Sequence[ZeroRecord]) -> float:
    """Modulus of the innermost unstable zero (infinite when all are stable)."""
    return min((abs(r.z) for r in records if not r.stable), default=math.inf)


# =============================================================================
# SPECTRAL CUT AND FACTORIZATION
# =============================================================================


def choose_sigma(eigenvalues: Sequence[complex], params: Optional[SpectralBoundParams] = None) -> float:
    """
    Log-midpoint of the widest gap between eigenvalue moduli at most 1.

    The search starts at max(rho, rho_tilde) when params are given, so sigma
    stays admissible whenever the spectrum leaves room for it.
    """
    floor = DETERMINANT["sigma_floor"]
    if params is not None:
        floor = max(floor, params.rho, params.rho_tilde)
    levels = sorted({abs(lam) for lam in eigenvalues if floor < abs(lam) <= 1.0} | {floor}, reverse=True)
    if len(levels) == 1:
        sigma = floor * (1.0 + 2.0 * DETERMINANT["sigma_gap"])
    else:
        widest = max(range(len(levels) - 1), key=lambda i: math.log(levels[i] / levels[i + 1]))
        sigma = math.sqrt(levels[widest] * levels[widest + 1])
    if params is not None and sigma <= max(params.rho, params.rho_tilde):
        logger.warning("sigma=%.4g does not exceed max(rho, rho_tilde); the cut is not admissible", sigma)
    logger.debug("Chose sigma=%.6g from %d levels", sigma, len(levels))
    return sigma


def factorization_check(
    series: Union[DeterminantSeries, Traces],
    oracle_eigs: Sequence[complex],
    sigma: float,
    n_lo: int = DETERMINANT["n_lo"],
) -> FitReport:
    """
    Fit |tr_n - Tr P^n| ~ C s^n over n > n_lo and report the rate s.

    Power sums come from the series by the inverse Newton recursion. A
    remainder that vanishes to the noise floor reports rate 0.

    Raises:
        SigmaOnEigenvalue: sigma too close to an eigenvalue modulus.
        DegenerateFit: fewer than 4 usable remainders.
    """
    if isinstance(series, DeterminantSeries):
        tr = traces_from_coefficients(series)
    else:
        tr = _trace_values(series)
    n_max = len(tr)
    proj = projector_traces(oracle_eigs, sigma, n_max)
    remainders = [tr[n - 1] - proj[n - 1] for n in range(1, n_max + 1)]

    floor = DETERMINANT["remainder_floor"]
    tail = list(range(n_lo + 1, n_max + 1))
    usable = [n for n in tail if abs(remainders[n - 1]) > floor]
    if not usable:
        return FitReport(0.0, 0.0, sigma, n_lo, [], remainders)
    if len(usable) < DETERMINANT["min_fit_points"]:
        raise DegenerateFit(f"only {len(usable)} remainders above {floor:g} for n > {n_lo}")

    logs = np.log([abs(remainders[n - 1]) for n in usable])
    slope, intercept = np.polyfit(np.array(usable, dtype=float), logs, 1)
    report = FitReport(
        rate=float(math.exp(slope)),
        amplitude=float(math.exp(intercept)),
        sigma=sigma,
        n_lo=n_lo,
        n_used=usable,
        remainders=remainders,
    )
    logger.info("Remainder decay rate %.4g (bound sqrt(sigma) = %.4g)", report.rate, report.bound)
    return report


# =============================================================================
# REPORT
# =============================================================================


def resonance_report(
    records: List[ZeroRecord],
    params: SpectralBoundParams,
    radius_cap: float = DETERMINANT["radius_cap"],
    spectrum: Optional[SpectrumEstimate] = None,
    match_tol: float = TOLERANCE_DEFAULTS["match"],
) -> ResonanceReport:
    """Stable zeros inside min(certified radius, cap, stability radius), matched to eigenvalues."""
    certified = certified_radius(params)
    report_radius = min(certified, radius_cap, stability_radius(records))
    report = ResonanceReport(records, certified, report_radius, params=params)
    if spectrum is not None:
        report.matches = match_resonances(report.stable_zeros, spectrum, match_tol)
    return report


def write_series_csv(series: DeterminantSeries, out_dir) -> Path:
    path = Path(out_dir) / SERIES_CSV
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["m", "re_c", "im_c"])
        for m, c in enumerate(series.coefficients):
            writer.writerow([m, repr(c.real), repr(c.imag)])
    return path


def read_series_csv(out_dir) -> DeterminantSeries:
    path = Path(out_dir) / SERIES_CSV
    if not path.exists():
        raise MissingArtifacts(f"missing {path.name} in {out_dir}; run the determinant command first")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return DeterminantSeries(tuple(complex(float(r["re_c"]), float(r["im_c"])) for r in rows))
    except (KeyError, ValueError) as e:
        raise SchemaMismatch(f"cannot parse {path}: {e}")


def resonance_rows(report: ResonanceReport) -> List[Dict[str, object]]:
    """One row per reported zero, with its matched eigenvalue when there is one."""
    matched = {pair.zero: pair for pair in report.matches.pairs}
    rows = []
    for record in report.zeros:
        pair = matched.get(record.z)
        rows.append(
            {
                "re_z": record.z.real,
                "im_z": record.z.imag,
                "modulus": abs(record.z),
                "stability_spread": record.stability_spread,
                "inside_certified": record.inside_certified,
                "stable": record.stable,
                "matched_eig_re": pair.eigenvalue.real if pair else None,
                "matched_eig_im": pair.eigenvalue.imag if pair else None,
                "pairing_residual": pair.residual if pair else None,
            }
        )
    return rows


RESONANCE_COLUMNS = (
    "re_z",
    "im_z",
    "modulus",
    "stability_spread",
    "inside_certified",
    "stable",
    "matched_eig_re",
    "matched_eig_im",
    "pairing_residual",
)


def write_resonance_report(report: ResonanceReport, out_dir, extra: Optional[Dict[str, object]] = None) -> Tuple[Path, Path]:
    """resonances.csv plus a JSON sidecar with the bound parameters and match summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / RESONANCES_CSV, out_dir / RESONANCES_JSON
    rows = resonance_rows(report)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESONANCE_COLUMNS)
        for row in rows:
            writer.writerow(["" if row[c] is None else repr(row[c]) for c in RESONANCE_COLUMNS])
    sidecar: Dict[str, object] = {
        "certified_radius": report.certified_radius,
        "report_radius": report.report_radius,
        "params": report.params.to_dict() if report.params else None,
        "stable_zeros": [complex_to_pair(z) for z in report.stable_zeros],
        "zeros": rows,
        "matches": [
            {"zero": complex_to_pair(p.zero), "eigenvalue": complex_to_pair(p.eigenvalue), "residual": p.residual}
            for p in report.matches.pairs
        ],
        "unmatched_zeros": [complex_to_pair(z) for z in report.matches.unmatched_zeros],
        "unmatched_eigenvalues": [complex_to_pair(z) for z in report.matches.unmatched_eigenvalues],
    }
    sidecar.update(extra or {})
    json_path.write_text(json.dumps(_finite(sidecar), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return csv_path, json_path


def _finite(value):
    """Replace inf/nan by strings so the JSON stays strict."""
    if isinstance(value, float) and not math.isfinite(value):
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    return value


def read_resonance_json(out_dir) -> Dict[str, object]:
    path = Path(out_dir) / RESONANCES_JSON
    if not path.exists():
        raise MissingArtifacts(f"missing {path.name} in {out_dir}; run the determinant command first")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaMismatch(f"cannot parse {path}: {e}")
