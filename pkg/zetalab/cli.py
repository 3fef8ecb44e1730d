"""
Command line front end: config loading, pipeline stages and artifact files.

Subcommands: orbits | traces | determinant | galerkin | mollifier | verify | report.
Stages only talk to each other through files in the output directory.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .constants import (
    CACHE_ENV_VAR,
    DEFAULT_CACHE_DIR,
    DEFAULT_OUTPUT_DIR,
    EXIT_CODES,
    LADDER_CSV,
    ORBIT_SUMMARY_JSON,
    REPORT_STEM,
    VERDICT_JSON,
)
from .determinant import (
    certified_radius,
    choose_sigma,
    coefficients_from_traces,
    factorization_check,
    read_resonance_json,
    read_series_csv,
    resonance_report,
    spectral_bound_params,
    write_resonance_report,
    write_series_csv,
    zero_stability,
)
from .dynamics import estimate_hyperbolicity
from .errors import ConfigError, DegenerateFit, InsufficientTraces, MissingArtifacts, OrbitValidationError, ZetaLabError
from .models import ResonanceReport, RunConfig, SpectrumEstimate, TraceTable
from .mollifier import epsilon_extrapolate, mollifier_ladder, reference_index, write_ladder_csv
from .orbits import OrbitCache, validate_orbit_set
from .spectral import (
    build_galerkin,
    match_resonances,
    read_spectrum_csv,
    resonance_candidates,
    scan_spectra,
    write_galerkin_matrix,
    write_spectrum_csv,
)
from .traces import powers_identity_residuals, duality_check, read_trace_table, trace_table, write_trace_table

logger = logging.getLogger(__name__)

LOG_FORMAT = "[%(name)s] %(message)s"


# =============================================================================
# CONFIGURATION
# =============================================================================


def load_config_data(path) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def load_config(path, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read a JSON config and apply run-block overrides before validation."""
    data = load_config_data(path)
    if overrides:
        run = dict(data.get("run", {}))
        run.update({k: v for k, v in overrides.items() if v is not None})
        data["run"] = run
    return RunConfig.from_dict(data)


def resolve_cache_dir(flag: Optional[str], config: RunConfig) -> Path:
    """--cache flag, then the ZETALAB_CACHE variable, then the config."""
    return Path(flag or os.environ.get(CACHE_ENV_VAR) or config.cache_dir or DEFAULT_CACHE_DIR)


def resolve_output_dir(flag: Optional[str], config: RunConfig) -> Path:
    return Path(flag or config.output_dir or DEFAULT_OUTPUT_DIR)


def write_json(payload: Dict[str, Any], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe(payload), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _json_safe(value):
    if isinstance(value, complex):
        return [value.real, value.imag]
    if isinstance(value, float) and not math.isfinite(value):
        return "inf" if value > 0 else ("-inf" if value < 0 else "nan")
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


# =============================================================================
# PIPELINE
# =============================================================================


class Pipeline:
    """
    One configured run: owns the orbit cache and the output directory.

    Each stage reads what earlier stages wrote when it is there and consistent
    with the config, and computes it otherwise.
    """

    def __init__(
        self,
        config: RunConfig,
        out_dir=None,
        cache_dir=None,
        workers: Optional[int] = None,
    ):
        self.config = config
        self.spec = config.map
        self.weight = config.weight
        self.run = config.run
        self.tol = config.tolerances
        self.out_dir = Path(out_dir) if out_dir else resolve_output_dir(None, config)
        self.cache_dir = Path(cache_dir) if cache_dir else resolve_cache_dir(None, config)
        self.workers = workers
        self.orbits = OrbitCache(self.spec, self.tol["orbit"], self.cache_dir, workers)

    # ------------------------------------------------------------------ orbits

    def orbit_summary(self, n_max: int) -> Dict[str, Any]:
        rows, hits = [], {}
        for n in range(1, n_max + 1):
            start = time.perf_counter()
            orbit_set = self.orbits.get(n)
            report = validate_orbit_set(orbit_set, self.spec, self.tol["orbit"])
            hits[n] = self.orbits.hits.get(n, False)
            logger.info(
                "n=%d: %d points (expected %d), cache_hit=%s, %.2fs",
                n,
                len(orbit_set),
                orbit_set.expected_count,
                hits[n],
                time.perf_counter() - start,
            )
            rows.append(report.to_dict())
            if not report.ok:
                raise OrbitValidationError(f"Fix T^{n} failed validation: {', '.join(report.kinds())}")
        summary = {"map_digest": self.spec.digest(), "n_max": n_max, "orbits": rows}
        write_json(summary, self.out_dir / ORBIT_SUMMARY_JSON)
        return {**summary, "cache_hit": {str(n): hit for n, hit in hits.items()}}

    # ------------------------------------------------------------------ traces

    def traces(self, n_max: Optional[int] = None, write: bool = True) -> TraceTable:
        n_max = n_max or int(self.run["n_max"])
        try:
            table = read_trace_table(self.out_dir)
            if (
                table.map_digest == self.spec.digest()
                and table.weight_digest == self.weight.digest()
                and table.n_max >= n_max
                and table.tolerances == dict(self.tol)
            ):
                logger.debug("Reusing trace table from %s", self.out_dir)
                return table
        except ZetaLabError:
            pass
        table = trace_table(self.spec, self.weight, n_max, self.orbits, self.tol, self.workers)
        if write:
            write_trace_table(table, self.out_dir)
        return table

    # ------------------------------------------------------------- determinant

    def bound_params(self):
        est = estimate_hyperbolicity(
            self.spec, int(self.run["hyperbolicity_grid"]), int(self.run["hyperbolicity_iterates"])
        )
        if not est.certified:
            logger.warning("Hyperbolicity is not certified on the grid (lambda=%.4f)", est.lam)
        params = spectral_bound_params(float(self.run["r"]), est.lam, self.weight.sup_norm_bound)
        return est, params

    def determinant(self, spectrum: Optional[SpectrumEstimate] = None) -> ResonanceReport:
        n_list = [int(n) for n in self.run["n_list"]]
        N = max(n_list)
        if N > int(self.run["n_max"]):
            raise InsufficientTraces(f"n_list needs tr_{N} but run.n_max={self.run['n_max']}")
        table = self.traces(int(self.run["n_max"]))
        series = coefficients_from_traces(table, N)
        write_series_csv(series, self.out_dir)

        est, params = self.bound_params()
        radius = min(certified_radius(params), float(self.run["radius_cap"]))
        records = zero_stability(
            self.spec,
            self.weight,
            n_list,
            radius,
            traces=table,
            threshold=self.tol["stability"],
            seed=int(self.run["seed"]),
        )
        if spectrum is None:
            try:
                spectrum = read_spectrum_csv(self.out_dir)
            except MissingArtifacts:
                logger.info("No spectrum in %s; zeros are reported unmatched", self.out_dir)
        report = resonance_report(records, params, float(self.run["radius_cap"]), spectrum, self.tol["match"])
        write_resonance_report(
            report,
            self.out_dir,
            extra={
                "config_digest": self.config.digest(),
                "hyperbolicity": est.to_dict(),
                "n_list": n_list,
                "unstable_count": sum(not r.stable for r in records),
                "resonance_candidates": [
                    [lam.real, lam.imag] for lam in resonance_candidates(spectrum, report.params.essential_radius)
                ]
                if spectrum is not None
                else [],
            },
        )
        logger.info(
            "Certified radius %.6g, %d stable zeros inside %.4g",
            report.certified_radius,
            len(report.stable_zeros),
            report.report_radius,
        )
        return report

    # ---------------------------------------------------------------- galerkin

    def k_list(self) -> List[int]:
        K = int(self.run["galerkin_K"])
        ks = sorted({int(k) for k in self.run["galerkin_K_list"] if int(k) < K} | {K})
        while len(ks) < 3 and ks[0] > 1:
            ks.insert(0, max(1, ks[0] // 2))
        return ks

    def galerkin(self, dump_matrix: bool = False) -> SpectrumEstimate:
        ks = self.k_list()
        entries, spectrum = scan_spectra(
            self.spec,
            self.weight,
            ks,
            int(self.run["eigen_count"]),
            int(self.run["grid_m"]),
            residual_tol=self.tol["eigen_residual"],
            workers=self.workers,
        )
        write_spectrum_csv(spectrum, self.out_dir)
        if dump_matrix:
            K = ks[-1]
            op = build_galerkin(self.spec, self.weight, K, max(int(self.run["grid_m"]), 4 * K + 4), self.workers)
            write_galerkin_matrix(op, self.out_dir)
        return spectrum

    # --------------------------------------------------------------- mollifier

    def mollifier(self, kind: str, n: int) -> Dict[str, Any]:
        ref_n = reference_index(kind, n)
        reference = self.traces(max(ref_n, 1), write=False).tr(ref_n)
        rows = mollifier_ladder(
            kind,
            self.spec,
            self.weight,
            n,
            [float(e) for e in self.run["epsilon_ladder"]],
            reference,
            tol=self.tol["inverse"],
            workers=self.workers,
        )
        write_ladder_csv(rows, self.out_dir / f"{kind}_n{n}_{LADDER_CSV}")
        result = epsilon_extrapolate([(r.epsilon, r.value) for r in rows])
        return {
            "kind": kind,
            "n": n,
            "reference": reference,
            "extrapolated": result.value,
            "error_estimate": result.error,
            "exponent": result.exponent,
            "abs_err": abs(result.value - reference),
            "ladder_errors": [r.abs_error for r in rows],
        }

    # ------------------------------------------------------------------ verify

    def verify(self, suite: str = "all") -> Dict[str, Any]:
        checks: List[Dict[str, Any]] = []
        if suite in ("identities", "all"):
            checks.extend(self._identity_checks())
        if suite in ("lemma2", "all"):
            checks.extend(self._mollifier_checks())
        if suite in ("crosscheck", "all"):
            checks.extend(self._crosschecks())
        verdict = {
            "suite": suite,
            "config_digest": self.config.digest(),
            "checks": checks,
            "pass": all(c["pass"] for c in checks),
        }
        write_json(verdict, self.out_dir / VERDICT_JSON)
        return verdict

    @staticmethod
    def _check(name: str, lhs: complex, rhs: complex, tol: float, **extra) -> Dict[str, Any]:
        err = abs(complex(lhs) - complex(rhs))
        return {"check_name": name, "lhs": lhs, "rhs": rhs, "abs_err": err, "tol": tol, "pass": err <= tol, **extra}

    @staticmethod
    def _failed(name: str, tol: float, error: ZetaLabError) -> Dict[str, Any]:
        logger.warning("Check %s failed: %s", name, error)
        return {
            "check_name": name,
            "lhs": None,
            "rhs": None,
            "abs_err": None,
            "tol": tol,
            "pass": False,
            "error": f"{type(error).__name__}: {error}",
        }

    def _identity_checks(self) -> List[Dict[str, Any]]:
        tol = self.tol["identities"]
        h, f, m = self.config.h_poly, self.config.f_poly, int(self.run["grid_m"])
        checks = []
        try:
            checks.append(
                self._check("duality", duality_check(self.spec, self.weight, h, f, m, self.tol["inverse"], self.workers), 0.0, tol)
            )
        except ZetaLabError as e:
            checks.append(self._failed("duality", tol, e))
        for n in (1, 2):
            try:
                split, dual = powers_identity_residuals(self.spec, self.weight, h, f, n, m, self.tol["inverse"], self.workers)
                checks.append(self._check(f"powers_n{n}", split, 0.0, tol))
                checks.append(self._check(f"powers_dual_n{n}", dual, 0.0, tol))
            except ZetaLabError as e:
                checks.append(self._failed(f"powers_n{n}", tol, e))
        return checks

    def _mollifier_checks(self) -> List[Dict[str, Any]]:
        plan = [
            ("trace", 1, self.tol["mollifier"]),
            ("trace", 2, self.tol["mollifier"]),
            ("even", 1, self.tol["lemma"]),
            ("odd", 0, self.tol["lemma"]),
            ("odd", 1, self.tol["lemma"]),
        ]
        checks = []
        for kind, n, tol in plan:
            name = f"mollified_{kind}_n{n}"
            try:
                res = self.mollifier(kind, n)
                checks.append(
                    self._check(name, res["extrapolated"], res["reference"], tol, error_estimate=res["error_estimate"])
                )
            except ZetaLabError as e:
                checks.append(self._failed(name, tol, e))
        return checks

    def _crosschecks(self) -> List[Dict[str, Any]]:
        tol = self.tol["match"]
        spectrum = self.galerkin()
        report = self.determinant(spectrum)
        checks = []

        if self.weight.is_constant and complex(self.weight.value) == 1:
            nearest = min(report.stable_zeros, key=lambda z: abs(z - 1.0), default=math.inf)
            checks.append(self._check("unit_zero", nearest, 1.0, 1e-6))

        converged = [
            complex(lam)
            for lam, spread in zip(spectrum.eigenvalues, spectrum.spreads)
            if spread <= self.tol["stability"] and abs(lam) > max(0.5, 1.0 / report.report_radius)
        ]
        zeros_side = match_resonances(report.stable_zeros, spectrum, tol)
        eig_side = match_resonances(report.stable_zeros, converged, tol)
        checks.append(self._check("unmatched_zeros", len(zeros_side.unmatched_zeros), 0, 0.0))
        checks.append(self._check("unmatched_eigenvalues", len(eig_side.unmatched_eigenvalues), 0, 0.0))
        worst = max((p.residual for p in zeros_side.pairs), default=0.0)
        checks.append(self._check("pairing_residual", worst, 0.0, tol))

        sigma_cfg = self.run["sigma"]
        sigma = choose_sigma(spectrum.eigenvalues, report.params) if sigma_cfg == "auto" else float(sigma_cfg)
        table = self.traces(int(self.run["n_max"]))
        series = coefficients_from_traces(table, table.n_max)
        try:
            try:
                fit = factorization_check(series, spectrum.eigenvalues, sigma, int(self.run["n_lo"]))
            except DegenerateFit:
                logger.warning("Too few remainders above the floor for n > %s, refitting from n > 1", self.run["n_lo"])
                fit = factorization_check(series, spectrum.eigenvalues, sigma, 1)
            checks.append(
                {
                    "check_name": "factorization_rate",
                    "lhs": fit.rate,
                    "rhs": fit.bound,
                    "abs_err": max(0.0, fit.rate - fit.bound),
                    "tol": 0.05,
                    "pass": fit.rate <= fit.bound + 0.05,
                    "fit": fit.to_dict(),
                }
            )
        except ZetaLabError as e:
            checks.append(self._failed("factorization_rate", 0.05, e))
        return checks

    # ------------------------------------------------------------------ report

    def report(self, fmt: str = "json") -> Path:
        """Merge series, zeros, spectrum and matches into one long-format table."""
        series = read_series_csv(self.out_dir)
        resonances = read_resonance_json(self.out_dir)
        spectrum = read_spectrum_csv(self.out_dir)
        zeros = [complex(*z) for z in resonances.get("stable_zeros", [])]
        matches = match_resonances(zeros, spectrum, self.tol["match"])

        rows: List[Dict[str, Any]] = []
        for m, c in enumerate(series.coefficients):
            rows.append(_report_row("series", m, c))
        for i, z in enumerate(zeros):
            rows.append(_report_row("zero", i, z))
        for i, lam in enumerate(spectrum.eigenvalues):
            rows.append(_report_row("eigenvalue", i, complex(lam), residual=float(spectrum.residuals[i])))
            if lam != 0:
                rows.append(_report_row("inverse_eigenvalue", i, 1.0 / complex(lam)))
        for i, pair in enumerate(matches.pairs):
            rows.append(_report_row("pair_zero", i, pair.zero, residual=pair.residual))
            rows.append(_report_row("pair_eigenvalue", i, pair.eigenvalue, residual=pair.residual))

        path = self.out_dir / f"{REPORT_STEM}.{fmt}"
        if fmt == "json":
            write_json(
                {
                    "columns": list(REPORT_COLUMNS),
                    "certified_radius": resonances.get("certified_radius"),
                    "report_radius": resonances.get("report_radius"),
                    "rows": rows,
                },
                path,
            )
        else:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(REPORT_COLUMNS)
                for row in rows:
                    writer.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in REPORT_COLUMNS])
        logger.info("Wrote %s (%d rows, %d matched pairs)", path, len(rows), len(matches.pairs))
        return path


# section: series | zero | eigenvalue | inverse_eigenvalue | pair_zero | pair_eigenvalue
REPORT_COLUMNS = ("section", "index", "re", "im", "modulus", "residual")


def _report_row(section: str, index: int, value: complex, residual: Optional[float] = None) -> Dict[str, Any]:
    value = complex(value)
    return {
        "section": section,
        "index": index,
        "re": value.real,
        "im": value.imag,
        "modulus": abs(value),
        "residual": residual,
    }


# =============================================================================
# COMMANDS
# =============================================================================


def cmd_orbits(config: RunConfig, n: Optional[int] = None, out_dir=None, cache_dir=None, workers=None) -> Dict[str, Any]:
    return Pipeline(config, out_dir, cache_dir, workers).orbit_summary(n or int(config.run["n_max"]))


def cmd_traces(config: RunConfig, out_dir=None, cache_dir=None, workers=None) -> TraceTable:
    pipeline = Pipeline(config, out_dir, cache_dir, workers)
    table = trace_table(pipeline.spec, pipeline.weight, int(config.run["n_max"]), pipeline.orbits, pipeline.tol, workers)
    write_trace_table(table, pipeline.out_dir)
    return table


def cmd_determinant(config: RunConfig, out_dir=None, cache_dir=None, workers=None) -> ResonanceReport:
    return Pipeline(config, out_dir, cache_dir, workers).determinant()


def cmd_galerkin(config: RunConfig, out_dir=None, cache_dir=None, workers=None, dump_matrix=False) -> SpectrumEstimate:
    return Pipeline(config, out_dir, cache_dir, workers).galerkin(dump_matrix)


def cmd_mollifier(config: RunConfig, kind: str = "trace", n: int = 1, out_dir=None, cache_dir=None, workers=None) -> Dict[str, Any]:
    return Pipeline(config, out_dir, cache_dir, workers).mollifier(kind, n)


def cmd_verify(config: RunConfig, suite: str = "all", out_dir=None, cache_dir=None, workers=None) -> Dict[str, Any]:
    return Pipeline(config, out_dir, cache_dir, workers).verify(suite)


def cmd_report(config: RunConfig, fmt: str = "json", out_dir=None, cache_dir=None) -> Path:
    return Pipeline(config, out_dir, cache_dir).report(fmt)


# =============================================================================
# ENTRY POINT
# =============================================================================


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--cache", help="orbit cache directory (overrides %s)" % CACHE_ENV_VAR)
    common.add_argument("--n", type=int, help="largest period (orbits, traces) or order (mollifier)")
    common.add_argument("--K", type=int, help="Galerkin cutoff")
    common.add_argument("--seed", type=int, help="root-finder seed")
    common.add_argument("--allow-large", action="store_true", help="permit n_max above 16")
    common.add_argument("--workers", type=int, help="worker threads for chunked stages")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    common.add_argument("--log-file", help="append log output to this file")

    parser = argparse.ArgumentParser(prog="zetalab", description="Dynamical determinants of hyperbolic torus maps")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("orbits", parents=[common], help="enumerate, continue and cache Fix T^n")
    sub.add_parser("traces", parents=[common], help="weighted periodic-orbit sums")
    sub.add_parser("determinant", parents=[common], help="series, certified radius and stable zeros")
    galerkin = sub.add_parser("galerkin", parents=[common], help="Fourier-Galerkin spectrum")
    galerkin.add_argument("--dump-matrix", action="store_true", help="also write the largest matrix")
    mollifier = sub.add_parser("mollifier", parents=[common], help="mollified trace ladder")
    mollifier.add_argument("--kind", choices=("trace", "even", "odd"), default="trace")
    verify = sub.add_parser("verify", parents=[common], help="identity, lemma and cross-validation checks")
    verify.add_argument("--suite", choices=("identities", "lemma2", "crosscheck", "all"), default="all")
    report = sub.add_parser("report", parents=[common], help="consolidated report from earlier stages")
    report.add_argument("--format", choices=("csv", "json"), default="json")
    return parser


def configure_logging(verbose: bool = False, log_file: Optional[str] = None) -> None:
    logging.basicConfig(
        filename=log_file,
        filemode="a",
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        force=True,
    )


def _summary(result) -> Dict[str, Any]:
    if isinstance(result, TraceTable):
        return {"n_max": result.n_max, "traces": list(result.entries)}
    if isinstance(result, ResonanceReport):
        return {
            "certified_radius": result.certified_radius,
            "report_radius": result.report_radius,
            "stable_zeros": result.stable_zeros,
        }
    if isinstance(result, SpectrumEstimate):
        return {"K": result.K, "eigenvalues": [complex(v) for v in result.eigenvalues]}
    if isinstance(result, Path):
        return {"report": str(result)}
    return result


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.log_file)

    try:
        overrides = {"seed": args.seed, "galerkin_K": args.K}
        if args.allow_large:
            overrides["allow_large"] = True
        if args.n is not None and args.command != "mollifier":
            overrides["n_max"] = args.n
        config = load_config(args.config, overrides)
        out_dir = resolve_output_dir(args.out, config)
        cache_dir = resolve_cache_dir(args.cache, config)
        logger.info("Running %s (config %s, output %s)", args.command, config.digest()[:12], out_dir)

        if args.command == "orbits":
            result = cmd_orbits(config, args.n, out_dir, cache_dir, args.workers)
        elif args.command == "traces":
            result = cmd_traces(config, out_dir, cache_dir, args.workers)
        elif args.command == "determinant":
            result = cmd_determinant(config, out_dir, cache_dir, args.workers)
        elif args.command == "galerkin":
            result = cmd_galerkin(config, out_dir, cache_dir, args.workers, args.dump_matrix)
        elif args.command == "mollifier":
            result = cmd_mollifier(config, args.kind, args.n if args.n is not None else 1, out_dir, cache_dir, args.workers)
        elif args.command == "verify":
            result = cmd_verify(config, args.suite, out_dir, cache_dir, args.workers)
        else:
            result = cmd_report(config, args.format, out_dir, cache_dir)
    except ZetaLabError as e:
        logger.error("%s failed: %s", args.command, e)
        record = {"error": type(e).__name__, "detail": str(e), "exit_code": e.exit_code}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return e.exit_code

    print(json.dumps(_json_safe(_summary(result)), sort_keys=True, indent=2))
    if args.command == "verify" and not result["pass"]:
        return EXIT_CODES["numerical_failure"]
    return EXIT_CODES["ok"]
