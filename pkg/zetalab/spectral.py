"""
Fourier-Galerkin spectral oracle for the transfer operator T_g h = g (h o T).

Column k of the matrix holds the Fourier coefficients of g(x) e(k.T(x)) for
|k|_inf <= K, sampled on an m x m grid and transformed with the FFT.
"""

import csv
import json
import logging
import warnings
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from .constants import DETERMINANT, GALERKIN, GALERKIN_DUMP, SPECTRUM_CSV
from .dynamics import eval_lift
from .errors import AliasingRisk, ConfigError, EigenFailure, MissingArtifacts, SchemaMismatch, SigmaOnEigenvalue
from .models import (
    GalerkinOperator,
    MapSpec,
    MatchResult,
    QuadratureGrid,
    ResonancePair,
    ScanEntry,
    SpectrumEstimate,
    WeightSpec,
)
from .workers import chunk_slices, ordered_map

logger = logging.getLogger(__name__)

Eigenvalues = Union[SpectrumEstimate, Sequence[complex], np.ndarray]


def _eigenvalues(spectrum: Eigenvalues) -> List[complex]:
    if isinstance(spectrum, SpectrumEstimate):
        return [complex(v) for v in spectrum.eigenvalues]
    return [complex(v) for v in spectrum]


def frequency_grid(K: int, d: int = 2) -> np.ndarray:
    """All j with |j|_inf <= K, shell by shell, lexicographic inside each shell."""
    axis = np.arange(-K, K + 1)
    grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, d)
    shells = np.max(np.abs(grid), axis=-1)
    order = np.lexsort((grid[:, 1], grid[:, 0], shells))
    return grid[order].astype(np.int64)


# =============================================================================
# MATRIX ASSEMBLY
# =============================================================================


def build_galerkin(
    spec: MapSpec,
    weight: WeightSpec,
    K: int,
    grid_m: int = GALERKIN["grid_m"],
    workers: Optional[int] = None,
) -> GalerkinOperator:
    """
    M_jk = <e_j, T_g e_k> for |j|_inf, |k|_inf <= K.

    Warns with AliasingRisk when some column keeps energy beyond 3m/8, next to the
    Nyquist band, where the FFT folds it back onto the retained block.
    """
    if grid_m < 4 * K + 4:
        raise ConfigError(f"grid_m={grid_m} is below 4K+4={4 * K + 4}")
    freqs = frequency_grid(K, spec.dimension)
    nodes = QuadratureGrid(grid_m, spec.dimension).nodes()
    g = weight.evaluate(nodes)
    angle = 2.0 * np.pi * eval_lift(spec, nodes)
    rows = (freqs[:, 0] % grid_m, freqs[:, 1] % grid_m)

    # Energy beyond 3m/8 sits next to the Nyquist band and is likely folded
    band = np.fft.fftfreq(grid_m, 1.0 / grid_m)
    inside = np.maximum(np.abs(band)[:, None], np.abs(band)[None, :]) <= (3 * grid_m) // 8

    def columns(sl: slice) -> Tuple[np.ndarray, float]:
        k = freqs[sl].astype(float)
        samples = g[None] * np.exp(1j * np.einsum("kd,ijd->kij", k, angle))
        coeffs = np.fft.fft2(samples, axes=(-2, -1)) / (grid_m * grid_m)
        energy = np.sum(np.abs(coeffs) ** 2, axis=(-2, -1))
        tail = np.sum(np.abs(coeffs[:, ~inside]) ** 2, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(energy > 0, tail / energy, 0.0)
        return coeffs[:, rows[0], rows[1]].T, float(np.max(ratio, initial=0.0))

    parts = ordered_map(columns, chunk_slices(len(freqs), 32), workers)
    matrix = np.concatenate([p[0] for p in parts], axis=1)
    worst_tail = max(p[1] for p in parts)
    if worst_tail > GALERKIN["aliasing_tolerance"]:
        warnings.warn(
            f"Galerkin columns carry {worst_tail:.2e} of their energy beyond 3m/8 (m={grid_m}, K={K})",
            AliasingRisk,
            stacklevel=2,
        )

    scale = float(np.max(np.abs(matrix), initial=0.0))
    matrix[np.abs(matrix) < GALERKIN["chop_tolerance"] * scale] = 0.0
    logger.info("Built Galerkin matrix K=%d (dimension %d, grid %d)", K, len(freqs), grid_m)
    return GalerkinOperator(K=K, grid_m=grid_m, frequencies=freqs, matrix=matrix)


# =============================================================================
# EIGENVALUES
# =============================================================================


def eigen_solve(
    op: Union[GalerkinOperator, np.ndarray],
    count: int = GALERKIN["eigen_count"],
    tol: float = GALERKIN["residual_tolerance"],
) -> SpectrumEstimate:
    """
    The `count` largest-modulus eigenvalues with residuals |Mv - lambda v| / |v|.

    Raises:
        EigenFailure: a residual exceeds tol.
    """
    M = op.matrix if isinstance(op, GalerkinOperator) else np.asarray(op, dtype=complex)
    K = op.K if isinstance(op, GalerkinOperator) else 0
    if not 1 <= count <= M.shape[0]:
        raise ConfigError(f"count={count} outside 1..{M.shape[0]}")
    w, V = scipy.linalg.eig(M)
    order = np.lexsort((-w.imag, -w.real, -np.abs(w)))[:count]
    w, V = w[order], V[:, order]
    residuals = np.linalg.norm(M @ V - V * w, axis=0) / np.linalg.norm(V, axis=0)
    bad = np.nonzero(residuals > tol)[0]
    if bad.size:
        i = int(bad[0])
        raise EigenFailure(f"eigenvalue {w[i]:.6g} has residual {residuals[i]:.2e} > {tol:.1e}")
    logger.debug("Leading eigenvalue %r, max residual %.2e", complex(w[0]), float(residuals.max()))
    return SpectrumEstimate(
        eigenvalues=w.astype(complex),
        residuals=residuals,
        spreads=np.full(count, np.nan),
        K=K,
    )


def check_sigma(sigma: float, spectrum: Eigenvalues, gap: float = DETERMINANT["sigma_gap"]) -> None:
    """Raise SigmaOnEigenvalue when some |lambda| lies within gap * sigma of sigma."""
    for lam in _eigenvalues(spectrum):
        if abs(abs(lam) - sigma) <= gap * sigma:
            raise SigmaOnEigenvalue(f"sigma={sigma:.6g} is within {gap:.0%} of |lambda|={abs(lam):.6g}")


def projector_traces(
    spectrum: Eigenvalues,
    sigma: float,
    n_max: int,
    gap: float = DETERMINANT["sigma_gap"],
) -> List[complex]:
    """
    Tr P^n = sum_{|lambda| > sigma} lambda^n for n = 1..n_max.

    Raises:
        SigmaOnEigenvalue: some |lambda| lies within gap * sigma of sigma.
    """
    check_sigma(sigma, spectrum, gap)
    eigs = _eigenvalues(spectrum)
    outside = np.array([lam for lam in eigs if abs(lam) > sigma], dtype=complex)
    out = []
    for n in range(1, n_max + 1):
        powers = outside**n
        out.append(complex(np.sum(np.sort_complex(powers))) if powers.size else 0j)
    return out


def match_resonances(zeros: Sequence[complex], spectrum: Eigenvalues, tol: float) -> MatchResult:
    """Greedy one-to-one pairing of zeros with eigenvalues by smallest |z lambda - 1|."""
    zeros = [complex(z) for z in zeros]
    eigs = _eigenvalues(spectrum)
    candidates = sorted((abs(z * lam - 1.0), i, j) for i, z in enumerate(zeros) for j, lam in enumerate(eigs))
    used_z, used_e, pairs = set(), set(), []
    for residual, i, j in candidates:
        if residual > tol:
            break
        if i in used_z or j in used_e:
            continue
        pairs.append(ResonancePair(zeros[i], eigs[j], residual))
        used_z.add(i)
        used_e.add(j)
    return MatchResult(
        pairs=pairs,
        unmatched_zeros=[z for i, z in enumerate(zeros) if i not in used_z],
        unmatched_eigenvalues=[lam for j, lam in enumerate(eigs) if j not in used_e],
    )


def resonance_candidates(spectrum: Eigenvalues, essential_radius: float) -> List[complex]:
    """Eigenvalues outside the essential spectral radius bound."""
    return [lam for lam in _eigenvalues(spectrum) if abs(lam) > essential_radius]


# =============================================================================
# CONVERGENCE IN K
# =============================================================================


def scan_spectra(
    spec: MapSpec,
    weight: WeightSpec,
    K_list: Sequence[int],
    count: int = GALERKIN["eigen_count"],
    grid_m: int = GALERKIN["grid_m"],
    tol: float = GALERKIN["spread_tolerance"],
    residual_tol: float = GALERKIN["residual_tolerance"],
    workers: Optional[int] = None,
) -> Tuple[List[ScanEntry], SpectrumEstimate]:
    """Run the Galerkin eigensolve for every K and track eigenvalues across K."""
    K_list = [int(K) for K in K_list]
    if len(K_list) < 3 or any(b <= a for a, b in zip(K_list, K_list[1:])):
        raise ConfigError(f"K_list must be increasing with at least 3 entries, got {K_list}")

    spectra = []
    for K in K_list:
        m = max(grid_m, 4 * K + 4)
        op = build_galerkin(spec, weight, K, m, workers)
        spectra.append(eigen_solve(op, min(count, op.dimension), residual_tol))

    final = spectra[-1]
    tracks = [[complex(v)] for v in final.eigenvalues]
    for estimate in reversed(spectra[:-1]):
        available = [complex(v) for v in estimate.eigenvalues]
        candidates = sorted(
            (abs(track[0] - v), i, j) for i, track in enumerate(tracks) for j, v in enumerate(available)
        )
        used_t, used_v = set(), set()
        for _, i, j in candidates:
            if i in used_t or j in used_v:
                continue
            tracks[i].insert(0, available[j])
            used_t.add(i)
            used_v.add(j)

    entries = []
    for track in tracks:
        values = np.array(track)
        spread = float(np.max(np.abs(values[:, None] - values[None, :]))) if len(track) == len(K_list) else np.inf
        entries.append(ScanEntry(eigenvalue=track[-1], values=track, spread=spread, converged=spread <= tol))
    final.spreads = np.array([e.spread for e in entries])
    logger.info("Convergence scan K=%s: %d of %d eigenvalues converged", K_list, sum(e.converged for e in entries), len(entries))
    return entries, final


def convergence_scan(
    spec: MapSpec,
    weight: WeightSpec,
    K_list: Sequence[int],
    count: int = GALERKIN["eigen_count"],
    grid_m: int = GALERKIN["grid_m"],
    tol: float = GALERKIN["spread_tolerance"],
    workers: Optional[int] = None,
) -> List[ScanEntry]:
    """Per-eigenvalue spread across K; eigenvalues with spread <= tol are converged."""
    entries, _ = scan_spectra(spec, weight, K_list, count, grid_m, tol, workers=workers)
    return entries


# =============================================================================
# FILES
# =============================================================================


def write_galerkin_matrix(op: GalerkinOperator, path) -> Path:
    """Text dump: a JSON header line, then one row per line as re im pairs."""
    path = Path(path)
    if path.is_dir():
        path = path / GALERKIN_DUMP
    header = {
        "schema": GALERKIN["schema"],
        "K": op.K,
        "d": int(op.frequencies.shape[1]),
        "ordering": GALERKIN["ordering"],
        "m": op.grid_m,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in op.matrix:
            fh.write(" ".join(f"{v.real!r} {v.imag!r}" for v in row.tolist()) + "\n")
    return path


def write_spectrum_csv(spectrum: SpectrumEstimate, out_dir) -> Path:
    """CSV: rank, re_lambda, im_lambda, modulus, residual, k_spread."""
    path = Path(out_dir) / SPECTRUM_CSV
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "re_lambda", "im_lambda", "modulus", "residual", "k_spread"])
        for rank, (lam, res, spread) in enumerate(zip(spectrum.eigenvalues, spectrum.residuals, spectrum.spreads)):
            writer.writerow(
                [rank, repr(float(lam.real)), repr(float(lam.imag)), repr(float(abs(lam))), repr(float(res)), repr(float(spread))]
            )
    return path


def read_spectrum_csv(out_dir) -> SpectrumEstimate:
    path = Path(out_dir) / SPECTRUM_CSV
    if not path.exists():
        raise MissingArtifacts(f"missing {path.name} in {out_dir}; run the galerkin command first")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return SpectrumEstimate(
            eigenvalues=np.array([complex(float(r["re_lambda"]), float(r["im_lambda"])) for r in rows], dtype=complex),
            residuals=np.array([float(r["residual"]) for r in rows]),
            spreads=np.array([float(r["k_spread"]) for r in rows]),
        )
    except (KeyError, ValueError) as e:
        raise SchemaMismatch(f"cannot parse {path}: {e}")
