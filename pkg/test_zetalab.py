"""
Test suite for the zeta-function laboratory.

Run with: python test_zetalab.py
Set ZETALAB_SLOW=1 to include the long convergence ladders and acceptance runs.
"""

import contextlib
import dataclasses
import io
import json
import math
import os
import sys
import tempfile
import unittest
import warnings
from fractions import Fraction
from pathlib import Path
from unittest.mock import patch

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from zetalab import cli
from zetalab.constants import (
    CAT_LAMBDA,
    CAT_MATRIX,
    DETERMINANT,
    EXIT_CODES,
    ORBIT_SUMMARY_JSON,
    ORBITS,
    RESONANCES_JSON,
    VERDICT_JSON,
)
from zetalab.determinant import (
    certified_radius,
    closest_integer,
    coefficients_from_traces,
    factorization_check,
    find_zeros,
    recursion_residuals,
    resonance_report,
    spectral_bound_params,
    traces_from_coefficients,
    zero_stability,
)
from zetalab.dynamics import (
    estimate_hyperbolicity,
    eval_lift,
    eval_map,
    inverse_map,
    iterate,
    iterate_jacobian,
    jacobian,
    jacobian_determinant,
    lift_orbit,
    linear_rates,
    reduce,
    tensor_weight,
)
from zetalab.errors import (
    AliasingRisk,
    AmbiguousRounding,
    ConfigError,
    ContinuationFailure,
    DigestMismatch,
    GridTooCoarse,
    InsufficientTraces,
    MissingArtifacts,
    NonMonotone,
    NotHyperbolic,
    RootIterationStall,
    SchemaMismatch,
    SigmaOnEigenvalue,
    UnsupportedDimension,
)
from zetalab.models import (
    DeterminantSeries,
    MapSpec,
    MollifierSpec,
    PerturbationMode,
    QuadratureGrid,
    RunConfig,
    TrigPolynomial,
    WeightSpec,
)
from zetalab.mollifier import (
    epsilon_extrapolate,
    grid_for_epsilon,
    mollified_tensor_trace_even,
    mollified_tensor_trace_odd,
    mollified_trace,
    mollifier_ladder,
    tensor_weight_along_orbit,
)
from zetalab.orbits import (
    OrbitCache,
    continue_orbits,
    enumerate_linear,
    expected_count,
    image_permutation,
    orbit_cache_load,
    orbit_cache_store,
    validate_orbit_set,
)
from zetalab.spectral import (
    build_galerkin,
    check_sigma,
    convergence_scan,
    eigen_solve,
    frequency_grid,
    match_resonances,
    projector_traces,
    scan_spectra,
)
from zetalab.traces import (
    duality_check,
    powers_identity_residuals,
    trace_table,
    weight_along_orbit,
)
from zetalab.workers import chunk_slices, ordered_map

SLOW = bool(os.environ.get("ZETALAB_SLOW"))

CAT = MapSpec(CAT_MATRIX)
CAT_COUNTS = (1, 5, 16, 45, 121, 320, 841, 2205, 5776, 15125, 39601, 103680)
SIN_MODE = PerturbationMode(component=0, amplitude=1.0, frequency=(0, 1), phase="sin")
ONE = WeightSpec()


def perturbed_cat(epsilon: float) -> MapSpec:
    return MapSpec(CAT_MATRIX, epsilon, (SIN_MODE,))


def trig_weight() -> WeightSpec:
    """g(x) = 1 + 0.2 cos(2 pi x_1)."""
    return WeightSpec(
        "trig",
        poly=TrigPolynomial.from_terms(
            [
                {"frequency": [0, 0], "re": 1.0},
                {"frequency": [1, 0], "re": 0.1},
                {"frequency": [-1, 0], "re": 0.1},
            ]
        ),
    )


class TestModels(unittest.TestCase):
    """Test map, weight and config models."""

    def test_three_dimensional_matrix_rejected(self):
        with self.assertRaises(UnsupportedDimension):
            MapSpec(((1, 0, 0), (0, 1, 0), (0, 0, 1)))

    def test_non_unimodular_matrix_rejected(self):
        with self.assertRaises(ConfigError):
            MapSpec(((2, 0), (0, 1)))

    def test_non_hyperbolic_matrix_rejected(self):
        with self.assertRaises(NotHyperbolic):
            MapSpec(((1, 1), (0, 1)))
        with self.assertRaises(NotHyperbolic):
            MapSpec(((0, -1), (1, 0)))
        with self.assertRaises(NotHyperbolic):
            RunConfig.from_dict({"map": {"matrix": [[1, 1], [0, 1]]}})

    def test_digest_tracks_epsilon(self):
        self.assertEqual(perturbed_cat(0.02).digest(), perturbed_cat(0.02).digest())
        self.assertNotEqual(perturbed_cat(0.02).digest(), perturbed_cat(0.03).digest())

    def test_sin_mode_is_real(self):
        poly = TrigPolynomial.real_mode(1.0, (0, 1), "sin")
        x = np.array([[0.1, 0.25], [0.3, 0.6]])
        np.testing.assert_allclose(poly.evaluate(x), np.sin(2 * np.pi * x[:, 1]), atol=1e-15)
        self.assertTrue(poly.is_conjugate_symmetric())

    def test_weight_sup_norm_bound(self):
        self.assertAlmostEqual(trig_weight().sup_norm_bound, 1.2)
        self.assertAlmostEqual(WeightSpec("constant", 0.7).sup_norm_bound, 0.7)

    def test_config_rejects_unknown_keys(self):
        with self.assertRaises(ConfigError):
            RunConfig.from_dict({"map": {"matrix": [[2, 1], [1, 1]]}, "plot": True})
        with self.assertRaises(ConfigError):
            RunConfig.from_dict({"map": {"matrix": [[2, 1], [1, 1]]}, "run": {"n_maxx": 3}})

    def test_large_n_needs_opt_in(self):
        with self.assertRaises(ConfigError):
            RunConfig.from_dict({"map": {"matrix": [[2, 1], [1, 1]]}, "run": {"n_max": 20}})
        config = RunConfig.from_dict({"map": {"matrix": [[2, 1], [1, 1]]}, "run": {"n_max": 20, "allow_large": True}})
        self.assertEqual(config.run["n_max"], 20)

    def test_config_digest_ignores_output_dir(self):
        a = RunConfig.from_dict({"map": {"matrix": [[2, 1], [1, 1]]}, "output_dir": "a"})
        b = RunConfig.from_dict({"map": {"matrix": [[2, 1], [1, 1]]}, "output_dir": "b"})
        self.assertEqual(a.digest(), b.digest())


class TestDynamics(unittest.TestCase):
    """Test map evaluation, inverses and hyperbolicity."""

    def test_origin_fixed(self):
        np.testing.assert_array_equal(eval_map(CAT, np.array([0.0, 0.0])), [0.0, 0.0])

    def test_half_point(self):
        np.testing.assert_allclose(eval_map(CAT, np.array([0.5, 0.5])), [0.5, 0.0])

    def test_perturbed_evaluation(self):
        # A x = (0.25, 0.25) and v(x) = (1, 0)
        y = eval_map(perturbed_cat(0.1), np.array([0.0, 0.25]))
        np.testing.assert_allclose(y, [0.35, 0.25], atol=1e-15)

    def test_exact_rational_path(self):
        y = eval_map(CAT, (Fraction(1, 3), Fraction(2, 3)))
        self.assertEqual(y, (Fraction(1, 3), Fraction(0)))

    def test_lift_is_not_reduced(self):
        np.testing.assert_allclose(eval_lift(CAT, np.array([1.0, 0.0])), [2.0, 1.0])
        np.testing.assert_allclose(eval_lift(CAT, np.array([0.5, 0.5])), [1.5, 1.0])

    def test_linear_inverse(self):
        np.testing.assert_allclose(inverse_map(CAT, np.array([0.5, 0.0])), [0.5, 0.5])
        np.testing.assert_allclose(inverse_map(CAT, np.array([0.0, 0.0])), [0.0, 0.0])

    def test_perturbed_inverse_round_trip(self):
        spec = perturbed_cat(0.05)
        rng = np.random.default_rng(3)
        x = rng.uniform(0.0, 1.0, (200, 2))
        back = inverse_map(spec, eval_map(spec, x))
        d = back - x
        self.assertLess(np.max(np.abs(d - np.round(d))), 1e-12)

    def test_jacobian(self):
        np.testing.assert_array_equal(jacobian(CAT, np.array([0.3, 0.7])), np.array(CAT_MATRIX, dtype=float))
        J = jacobian(perturbed_cat(0.1), np.array([0.0, 0.0]))
        np.testing.assert_allclose(J, [[2.0, 1.0 + 0.2 * np.pi], [1.0, 1.0]])

    def test_reduce_stays_below_one(self):
        self.assertLess(float(reduce(np.array([-1e-18]))[0]), 1.0)

    def test_parabolic_not_hyperbolic(self):
        with self.assertRaises(NotHyperbolic):
            estimate_hyperbolicity(MapSpec(((1, 1), (0, 1))))

    def test_cat_map_rates(self):
        lam, expanding = linear_rates(CAT)
        self.assertAlmostEqual(lam, CAT_LAMBDA, places=12)
        self.assertAlmostEqual(lam * expanding, 1.0, places=12)
        estimate = estimate_hyperbolicity(CAT)
        self.assertAlmostEqual(estimate.lam, CAT_LAMBDA, places=10)

    def test_perturbed_rate_close_to_linear(self):
        estimate = estimate_hyperbolicity(perturbed_cat(0.02))
        self.assertLess(estimate.lam, 1.0)
        self.assertLess(abs(estimate.lam - CAT_LAMBDA), 0.1)

    def test_small_perturbation_certified(self):
        estimate = estimate_hyperbolicity(perturbed_cat(0.01))
        self.assertTrue(estimate.certified)
        self.assertLessEqual(abs(estimate.lam - CAT_LAMBDA), 0.02)

    def test_jacobian_matches_finite_differences(self):
        spec = perturbed_cat(0.05)
        x = np.array([[0.13, 0.41], [0.77, 0.92], [0.5, 0.05]])
        h = 1e-6
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            column = (eval_lift(spec, x + e) - eval_lift(spec, x - e)) / (2 * h)
            np.testing.assert_allclose(jacobian(spec, x)[..., :, j], column, atol=1e-8)

    def test_lift_commutes_with_integer_shifts(self):
        spec = perturbed_cat(0.05)
        rng = np.random.default_rng(7)
        x = rng.uniform(0.0, 1.0, (50, 2))
        m = np.array([2.0, -3.0])
        shifted = eval_lift(spec, x + m)
        np.testing.assert_allclose(shifted, eval_lift(spec, x) + spec.matrix @ m, atol=1e-12)

    def test_chain_rule_along_lifted_orbit(self):
        spec = perturbed_cat(0.05)
        x = np.array([0.31, 0.62])
        y, J = iterate_jacobian(spec, x, 3)
        frac, offset, J_lift = lift_orbit(spec, x, 3)
        np.testing.assert_allclose(J_lift, J, rtol=1e-12)
        np.testing.assert_allclose(frac, y, atol=1e-12)

        h = 1e-6
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            plus = lift_orbit(spec, x + e, 3)
            minus = lift_orbit(spec, x - e, 3)
            column = ((plus[0] + plus[1]) - (minus[0] + minus[1])) / (2 * h)
            np.testing.assert_allclose(J[:, j], column, atol=1e-6)

    def test_tensor_weight_is_direct_composition(self):
        spec = perturbed_cat(0.02)
        g = trig_weight()
        rng = np.random.default_rng(11)
        x = rng.uniform(0.0, 1.0, (40, 2))
        y = rng.uniform(0.0, 1.0, (40, 2))
        pre = inverse_map(spec, x)
        d = eval_map(spec, pre) - x
        self.assertLess(np.max(np.abs(d - np.round(d))), 1e-12)
        expected = g.evaluate(pre) / np.abs(jacobian_determinant(spec, pre)) * g.evaluate(y)
        np.testing.assert_allclose(tensor_weight(spec, g, x, y), expected, rtol=1e-14)
        np.testing.assert_allclose(tensor_weight_along_orbit(spec, g, x, y, 1), expected, rtol=1e-14)

        second = tensor_weight(spec, g, pre, eval_map(spec, y))
        np.testing.assert_allclose(tensor_weight_along_orbit(spec, g, x, y, 2), expected * second, rtol=1e-12)


class TestOrbits(unittest.TestCase):
    """Test periodic-point enumeration, continuation, validation and caching."""

    def test_counts(self):
        for n, count in enumerate(CAT_COUNTS[:8], start=1):
            self.assertEqual(expected_count(CAT_MATRIX, n), count)
            self.assertEqual(len(enumerate_linear(CAT, n)), count)

    def test_large_counts_exact(self):
        for n in (9, 10, 11, 12):
            self.assertEqual(expected_count(CAT_MATRIX, n), CAT_COUNTS[n - 1])

    def test_fixed_point_is_origin(self):
        orbit_set = enumerate_linear(CAT, 1)
        np.testing.assert_array_equal(orbit_set.xs, [[0.0, 0.0]])
        self.assertEqual(orbit_set.expected_count, 1)

    def test_period_two_points(self):
        orbit_set = enumerate_linear(CAT, 2)
        self.assertEqual(len(orbit_set), 5)
        np.testing.assert_allclose(orbit_set.xs * 5, np.round(orbit_set.xs * 5), atol=1e-12)
        self.assertEqual(sorted(orbit_set.primitive_periods.tolist()), [1, 2, 2, 2, 2])

    def test_points_are_periodic(self):
        orbit_set = enumerate_linear(CAT, 5)
        images = iterate(CAT, orbit_set.xs, 5)
        d = images - orbit_set.xs
        self.assertLess(np.max(np.abs(d - np.round(d))), 1e-12)
        self.assertTrue(validate_orbit_set(orbit_set, CAT).ok)

    def test_map_permutes_fixed_set(self):
        orbit_set = enumerate_linear(CAT, 4)
        perm = image_permutation(orbit_set, CAT)
        self.assertIsNotNone(perm)
        self.assertEqual(sorted(perm.tolist()), list(range(len(orbit_set))))

    def test_continuation_keeps_counts(self):
        spec = perturbed_cat(0.02)
        for n in range(1, 5):
            orbit_set = continue_orbits(spec, n, enumerate_linear(CAT, n))
            self.assertEqual(len(orbit_set), CAT_COUNTS[n - 1])
            report = validate_orbit_set(orbit_set, spec)
            self.assertTrue(report.ok, report.kinds())
            self.assertTrue(np.all((orbit_set.xs >= 0.0) & (orbit_set.xs < 1.0)))

    def test_continuation_at_long_periods(self):
        spec = perturbed_cat(0.02)
        for n in (9, 10):
            orbit_set = continue_orbits(spec, n, enumerate_linear(CAT, n))
            self.assertEqual(len(orbit_set), CAT_COUNTS[n - 1])
            report = validate_orbit_set(orbit_set, spec)
            self.assertTrue(report.ok, report.kinds())

    def test_monodromy_conjugate_along_orbit(self):
        spec = perturbed_cat(0.02)
        orbit_set = continue_orbits(spec, 3, enumerate_linear(CAT, 3))
        x = orbit_set.xs
        _, M = iterate_jacobian(spec, x, 3)
        _, M_next = iterate_jacobian(spec, eval_map(spec, x), 3)
        D = jacobian(spec, x)
        np.testing.assert_allclose(M_next, D @ M @ np.linalg.inv(D), atol=1e-8)

    def test_ladder_failure_names_first_failing_stage(self):
        calls = []

        def never_converges(spec, Y0, m, tol=None, *args):
            calls.append(spec.epsilon)
            P = Y0.shape[0]
            return Y0, np.ones(P), np.zeros(P, dtype=bool)

        with patch("zetalab.orbits.shooting_newton", side_effect=never_converges):
            with self.assertRaises(ContinuationFailure) as cm:
                continue_orbits(perturbed_cat(0.02), 2, enumerate_linear(CAT, 2))
        self.assertIn("0.25 epsilon", str(cm.exception))
        self.assertEqual(len(calls), 2)

    def test_ladder_checks_every_stage(self):
        calls = []

        def converges_below(spec, Y0, m, tol=None, *args):
            calls.append(spec.epsilon)
            P = Y0.shape[0]
            ok = spec.epsilon < 0.008
            return Y0, np.full(P, 0.0 if ok else 1.0), np.full(P, ok)

        with patch("zetalab.orbits.shooting_newton", side_effect=converges_below):
            with self.assertRaises(ContinuationFailure) as cm:
                continue_orbits(perturbed_cat(0.02), 2, enumerate_linear(CAT, 2))
        self.assertIn("0.5 epsilon", str(cm.exception))
        self.assertEqual(len(calls), 3)

    def test_epsilon_outside_contraction_regime(self):
        with self.assertRaises(ContinuationFailure) as cm:
            continue_orbits(perturbed_cat(0.5), 2, enumerate_linear(CAT, 2))
        self.assertIn("contraction regime", str(cm.exception))

    def test_continuation_independent_of_chunking(self):
        spec = perturbed_cat(0.02)
        seeds = enumerate_linear(CAT, 6)
        whole = continue_orbits(spec, 6, seeds, workers=1)
        with patch.dict(ORBITS, {"chunk_size": 7}):
            chunked = continue_orbits(spec, 6, seeds, workers=4)
        self.assertTrue(chunked.same_as(whole))

    def test_injected_fault_flagged(self):
        orbit_set = enumerate_linear(CAT, 3)
        xs = orbit_set.xs.copy()
        xs[1] = reduce(xs[1] + 1e-3)
        report = validate_orbit_set(dataclasses.replace(orbit_set, xs=xs), CAT)
        self.assertFalse(report.ok)
        self.assertIn("residual", report.kinds())

    def test_cache_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            first = OrbitCache(CAT, cache_dir=tmp)
            computed = first.get(4)
            self.assertFalse(first.hits[4])
            second = OrbitCache(CAT, cache_dir=tmp)
            loaded = second.get(4)
            self.assertTrue(second.hits[4])
            self.assertTrue(loaded.same_as(computed))

    def test_cache_round_trip_perturbed(self):
        spec = perturbed_cat(0.02)
        with tempfile.TemporaryDirectory() as tmp:
            computed = OrbitCache(spec, cache_dir=tmp).get(8)
            self.assertEqual(len(computed), CAT_COUNTS[7])
            second = OrbitCache(spec, cache_dir=tmp)
            loaded = second.get(8)
            self.assertTrue(second.hits[8])
            self.assertTrue(loaded.same_as(computed))

    def test_cache_files_per_period(self):
        with tempfile.TemporaryDirectory() as tmp:
            cache = OrbitCache(CAT, cache_dir=tmp)
            cache.get_many(range(1, 9))
            self.assertEqual(len(list(Path(tmp).glob("*.ndjson"))), 8)

    def test_cache_digest_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "orbits.ndjson"
            orbit_cache_store(enumerate_linear(CAT, 2), path)
            with self.assertRaises(DigestMismatch):
                orbit_cache_load(path, perturbed_cat(0.02).digest(), 2)

    def test_empty_cache_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "orbits.ndjson"
            path.write_text("", encoding="utf-8")
            with self.assertRaises(SchemaMismatch):
                orbit_cache_load(path, CAT.digest(), 2)


class TestTraces(unittest.TestCase):
    """Test weighted orbit sums and the quadrature identities."""

    def test_cat_map_traces_are_one(self):
        table = trace_table(CAT, ONE, 8)
        for tr in table.entries:
            self.assertAlmostEqual(abs(tr - 1.0), 0.0, delta=1e-10)

    def test_constant_weight_scaling(self):
        table = trace_table(CAT, WeightSpec("constant", 0.5), 8)
        for n, tr in enumerate(table.entries, start=1):
            self.assertAlmostEqual(abs(tr - 0.5**n), 0.0, delta=1e-12)

    def test_zero_weight(self):
        table = trace_table(CAT, WeightSpec("constant", 0.0), 4)
        self.assertEqual(table.entries, (0j, 0j, 0j, 0j))

    def test_weight_along_orbit(self):
        x = np.array([0.2, 0.7])
        self.assertAlmostEqual(weight_along_orbit(CAT, WeightSpec("constant", 0.3), x, 4), 0.3**4)
        g = trig_weight()
        self.assertAlmostEqual(weight_along_orbit(CAT, g, x, 1), complex(g.evaluate(x)))

    def test_perturbed_fixed_point_trace(self):
        # The origin stays fixed and det(I - DT(0)) = -(1 + 2 pi epsilon)
        table = trace_table(perturbed_cat(0.02), ONE, 1)
        self.assertAlmostEqual(abs(table.tr(1) - 1.0 / (1.0 + 0.04 * np.pi)), 0.0, delta=1e-12)

    def test_perturbed_traces_decay_to_one(self):
        table = trace_table(perturbed_cat(0.02), ONE, 6)
        gaps = [abs(tr - 1.0) for tr in table.entries]
        for tr in table.entries:
            self.assertLess(abs(tr.imag), 1e-12)
        for before, after in zip(gaps, gaps[1:]):
            self.assertLess(after, before)
        self.assertLess(gaps[-1], 1e-5)

    def test_perturbed_traces_match_galerkin_powers(self):
        spec = perturbed_cat(0.02)
        table = trace_table(spec, ONE, 6)
        M = build_galerkin(spec, ONE, 16, grid_m=256).matrix
        power = np.eye(M.shape[0], dtype=complex)
        for n, tr in enumerate(table.entries, start=1):
            power = power @ M
            self.assertAlmostEqual(abs(tr - np.trace(power)), 0.0, delta=1e-5)

    def test_traces_independent_of_chunking(self):
        spec = perturbed_cat(0.02)
        whole = trace_table(spec, trig_weight(), 6, workers=1)
        with patch.dict(ORBITS, {"chunk_size": 7}):
            chunked = trace_table(spec, trig_weight(), 6, workers=4)
        self.assertEqual(chunked.entries, whole.entries)

    def test_duality_linear(self):
        h = RunConfig.from_dict({"map": {"matrix": [[2, 1], [1, 1]]}}).h_poly
        f = TrigPolynomial.from_terms([{"frequency": [0, 1], "re": 1.0}, {"frequency": [1, 1], "im": 0.5}])
        self.assertLess(duality_check(CAT, trig_weight(), h, f, grid_m=64), 1e-12)

    def test_powers_identity_linear(self):
        config = RunConfig.from_dict({"map": {"matrix": [[2, 1], [1, 1]]}})
        split, dual = powers_identity_residuals(CAT, trig_weight(), config.h_poly, config.f_poly, 2, grid_m=64)
        self.assertLess(split, 1e-12)
        self.assertLess(dual, 1e-12)

    def test_duality_perturbed(self):
        config = RunConfig.from_dict({"map": {"matrix": [[2, 1], [1, 1]]}})
        residual = duality_check(perturbed_cat(0.02), trig_weight(), config.h_poly, config.f_poly, grid_m=256)
        self.assertLess(residual, 1e-8)

    def test_powers_identity_perturbed(self):
        config = RunConfig.from_dict({"map": {"matrix": [[2, 1], [1, 1]]}})
        split, dual = powers_identity_residuals(
            perturbed_cat(0.01), trig_weight(), config.h_poly, config.f_poly, 1, grid_m=256
        )
        self.assertLess(split, 1e-8)
        self.assertLess(dual, 1e-8)


class TestMollifier(unittest.TestCase):
    """Test mollified traces and epsilon extrapolation."""

    def test_kernel_width_limit(self):
        with self.assertRaises(ConfigError):
            MollifierSpec(0.3)

    def test_grid_too_coarse(self):
        with self.assertRaises(GridTooCoarse):
            mollified_trace(CAT, ONE, 1, MollifierSpec(0.01), QuadratureGrid(256))

    def test_grid_for_epsilon_resolves(self):
        grid = grid_for_epsilon(0.1)
        self.assertEqual(grid.m, 512)
        self.assertGreaterEqual(grid.m * 0.1, 8)

    def test_mollified_trace_cat_map(self):
        value = mollified_trace(CAT, ONE, 1, MollifierSpec(0.1), grid_for_epsilon(0.1))
        self.assertAlmostEqual(abs(value - 1.0), 0.0, delta=3e-2)

    def test_mollified_trace_zero_weight(self):
        value = mollified_trace(CAT, WeightSpec("constant", 0.0), 1, MollifierSpec(0.1), QuadratureGrid(128))
        self.assertEqual(value, 0j)

    def test_tensor_traces_cat_map(self):
        grid = QuadratureGrid(256)
        even = mollified_tensor_trace_even(CAT, ONE, 1, MollifierSpec(0.1), grid)
        odd = mollified_tensor_trace_odd(CAT, ONE, 0, MollifierSpec(0.1), grid)
        self.assertAlmostEqual(abs(even - 1.0), 0.0, delta=2e-2)
        self.assertAlmostEqual(abs(odd - 1.0), 0.0, delta=2e-2)

    def test_constant_weight_homogeneity(self):
        c = 0.7
        scaled = WeightSpec("constant", c)
        moll, grid = MollifierSpec(0.1), QuadratureGrid(128)
        cases = [
            (lambda w: mollified_trace(CAT, w, 1, moll, grid), c),
            (lambda w: mollified_trace(CAT, w, 2, moll, grid), c**2),
            (lambda w: mollified_tensor_trace_even(CAT, w, 1, moll, grid), c**2),
            (lambda w: mollified_tensor_trace_odd(CAT, w, 0, moll, grid), c),
            (lambda w: mollified_tensor_trace_odd(CAT, w, 1, moll, grid), c**3),
        ]
        for value, factor in cases:
            base = value(ONE)
            self.assertAlmostEqual(abs(value(scaled) - factor * base), 0.0, delta=1e-12 * abs(base))

    def test_extrapolation_quadratic(self):
        ladder = [(e, 2.0 + 3.0 * e * e) for e in (0.1, 0.05, 0.025)]
        result = epsilon_extrapolate(ladder)
        self.assertAlmostEqual(abs(result.value - 2.0), 0.0, delta=1e-12)
        self.assertAlmostEqual(result.exponent, 2.0, places=9)

    def test_extrapolation_flat(self):
        result = epsilon_extrapolate([(0.1, 1.5), (0.05, 1.5), (0.025, 1.5)])
        self.assertEqual(result.value, 1.5)
        self.assertEqual(result.error, 0.0)

    def test_extrapolation_needs_halving(self):
        with self.assertRaises(ConfigError):
            epsilon_extrapolate([(0.1, 1.0), (0.06, 1.1), (0.02, 1.2)])
        with self.assertRaises(ConfigError):
            epsilon_extrapolate([(0.1, 1.0), (0.05, 1.1)])

    def test_extrapolation_growing_differences(self):
        with self.assertRaises(NonMonotone):
            epsilon_extrapolate([(0.1, 1.0), (0.05, 1.01), (0.025, 1.5)])

    @unittest.skipUnless(SLOW, "set ZETALAB_SLOW=1 for the full epsilon ladder")
    def test_ladder_converges(self):
        rows = mollifier_ladder("trace", CAT, ONE, 1, (0.1, 0.05, 0.025), 1.0)
        result = epsilon_extrapolate([(r.epsilon, r.value) for r in rows])
        self.assertLess(abs(result.value - 1.0), 1e-3)

    @unittest.skipUnless(SLOW, "set ZETALAB_SLOW=1 for the full epsilon ladder")
    def test_tensor_ladders_converge(self):
        for kind in ("even", "odd"):
            rows = mollifier_ladder(kind, CAT, ONE, 1, (0.1, 0.05, 0.025), 1.0)
            result = epsilon_extrapolate([(r.epsilon, r.value) for r in rows])
            self.assertLess(abs(result.value - 1.0), 2e-2, kind)


class TestDeterminant(unittest.TestCase):
    """Test series coefficients, certified radius and zeros."""

    def test_unit_traces(self):
        series = coefficients_from_traces([1.0] * 8, 8)
        np.testing.assert_allclose(series.as_array(), [1, -1, 0, 0, 0, 0, 0, 0, 0], atol=1e-12)

    def test_zero_traces(self):
        series = coefficients_from_traces([0.0] * 5, 5)
        np.testing.assert_array_equal(series.as_array(), [1, 0, 0, 0, 0, 0])

    def test_two_resonances(self):
        traces = [1.0 + 0.5**n for n in range(1, 9)]
        series = coefficients_from_traces(traces, 8)
        np.testing.assert_allclose(series.as_array()[:4], [1, -1.5, 0.5, 0], atol=1e-12)
        self.assertLess(float(np.max(recursion_residuals(series, traces))), 1e-12)

    def test_inverse_recursion(self):
        traces = [1.0 + 0.5**n for n in range(1, 9)]
        back = traces_from_coefficients(coefficients_from_traces(traces, 8))
        np.testing.assert_allclose(back, traces, atol=1e-12)

    def test_insufficient_traces(self):
        with self.assertRaises(InsufficientTraces):
            coefficients_from_traces([1.0] * 3, 5)

    def test_closest_integer(self):
        self.assertEqual(closest_integer(2.0), 2)
        self.assertEqual(closest_integer(2.4), 2)
        with self.assertRaises(AmbiguousRounding):
            closest_integer(1.5)

    def test_certified_radius(self):
        self.assertAlmostEqual(certified_radius(spectral_bound_params(4.0, CAT_LAMBDA, 1.0)), 2.6180340, delta=1e-5)
        self.assertAlmostEqual(certified_radius(spectral_bound_params(2.0, CAT_LAMBDA, 1.0)), 1.6180340, delta=1e-5)
        with self.assertRaises(AmbiguousRounding):
            spectral_bound_params(3.0, CAT_LAMBDA, 1.0)

    def test_doubling_weight_halves_radius(self):
        one = certified_radius(spectral_bound_params(4.0, CAT_LAMBDA, 1.0))
        two = certified_radius(spectral_bound_params(4.0, CAT_LAMBDA, 2.0))
        self.assertEqual(two, one / 2.0)

    def test_vanishing_weight_radius(self):
        self.assertEqual(certified_radius(spectral_bound_params(4.0, CAT_LAMBDA, 0.0)), math.inf)

    def test_find_zeros(self):
        roots = find_zeros(DeterminantSeries((1.0, -1.0)), 2.0)
        self.assertEqual(len(roots), 1)
        self.assertAlmostEqual(abs(roots[0].z - 1.0), 0.0, delta=1e-12)
        roots = find_zeros(DeterminantSeries((1.0, -1.5, 0.5)), 3.0)
        np.testing.assert_allclose(sorted(r.z.real for r in roots), [1.0, 2.0], atol=1e-10)

    def test_root_residuals_scaled_by_coefficients(self):
        roots = find_zeros(DeterminantSeries((1.0, -1.0)), 2.0)
        self.assertLessEqual(roots[0].residual, DETERMINANT["root_tolerance"])
        # Roots at 1 and 1000: the far root is judged against max|c| |z|^N
        roots = find_zeros(DeterminantSeries((1.0, -1.001, 0.001)), 2000.0)
        np.testing.assert_allclose([r.z.real for r in roots], [1.0, 1000.0], rtol=1e-9)
        for root in roots:
            self.assertLessEqual(root.residual, DETERMINANT["root_tolerance"])

    def test_unconverged_roots_raise(self):
        with patch.dict(DETERMINANT, {"root_max_iterations": 0, "polish_steps": 0}):
            with self.assertRaises(RootIterationStall):
                find_zeros(DeterminantSeries((1.0, -1.0)), 2.0)

    def test_truncated_exponential_has_no_small_zeros(self):
        coefficients = tuple((-1.0) ** m / math.factorial(m) for m in range(21))
        self.assertEqual(find_zeros(DeterminantSeries(coefficients), 1.0), [])

    def test_stable_unit_zero(self):
        records = zero_stability(None, None, [8, 10, 12], 2.0, traces=[1.0] * 12)
        self.assertEqual(len(records), 1)
        self.assertTrue(records[0].stable)
        self.assertLess(abs(records[0].z - 1.0), 1e-8)
        self.assertLessEqual(records[0].stability_spread, 1e-8)

    def test_scaling_covariance(self):
        records = zero_stability(None, None, [8, 10, 12], 3.0, traces=[0.7**n for n in range(1, 13)])
        self.assertEqual(len(records), 1)
        self.assertAlmostEqual(abs(records[0].z - 1.0 / 0.7), 0.0, delta=1e-8)

    def test_noise_tail_flagged_unstable(self):
        rng = np.random.default_rng(7)
        traces = [1.0] * 8 + list(1.0 + 1e-8 * rng.standard_normal(4))
        records = zero_stability(None, None, [8, 10, 12], 100.0, traces=traces)
        stable = [r for r in records if r.stable]
        self.assertEqual(len(stable), 1)
        self.assertLess(abs(stable[0].z - 1.0), 1e-6)
        self.assertGreater(len(records), 1)

    def test_cat_map_acceptance(self):
        table = trace_table(CAT, ONE, 12)
        series = coefficients_from_traces(table, 12)
        expected = np.zeros(13)
        expected[:2] = [1.0, -1.0]
        np.testing.assert_allclose(series.as_array(), expected, atol=1e-9)
        records = zero_stability(CAT, ONE, [8, 10, 12], 1.5, traces=table)
        report = resonance_report(records, spectral_bound_params(4.0, CAT_LAMBDA, 1.0), 1.5)
        self.assertEqual(len(report.stable_zeros), 1)
        self.assertLess(abs(report.stable_zeros[0] - 1.0), 1e-8)

    def test_factorization_exact_projector(self):
        fit = factorization_check([1.0] * 10, [1.0], 0.5)
        self.assertEqual(fit.rate, 0.0)

    def test_factorization_rate(self):
        traces = [1.0 + 0.3**n for n in range(1, 13)]
        fit = factorization_check(traces, [1.0], 0.5, n_lo=2)
        self.assertAlmostEqual(fit.rate, 0.3, delta=1e-6)
        self.assertLessEqual(fit.rate, fit.bound)


class TestSpectral(unittest.TestCase):
    """Test the Fourier-Galerkin oracle and resonance matching."""

    def test_frequency_ordering(self):
        freqs = frequency_grid(2)
        self.assertEqual(len(freqs), 25)
        np.testing.assert_array_equal(freqs[0], [0, 0])
        shells = np.max(np.abs(freqs), axis=1)
        self.assertTrue(np.all(np.diff(shells) >= 0))

    def test_cat_map_matrix_is_partial_permutation(self):
        K = 3
        op = build_galerkin(CAT, ONE, K, grid_m=64)
        index = {tuple(k): i for i, k in enumerate(op.frequencies.tolist())}
        A_T = np.array(CAT_MATRIX).T
        expected = np.zeros_like(op.matrix)
        for i, k in enumerate(op.frequencies):
            j = tuple((A_T @ k).tolist())
            if j in index:
                expected[index[j], i] = 1.0
        np.testing.assert_allclose(op.matrix, expected, atol=1e-12)

    def test_grid_too_small(self):
        with self.assertRaises(ConfigError):
            build_galerkin(CAT, ONE, 8, grid_m=32)

    def test_aliasing_warning(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            build_galerkin(CAT, ONE, 8, grid_m=36)
        self.assertTrue(any(issubclass(w.category, AliasingRisk) for w in caught))

    def test_diagonal_eigenvalues(self):
        spectrum = eigen_solve(np.diag([0.9, 0.5, 0.1]), count=2)
        np.testing.assert_allclose(spectrum.eigenvalues, [0.9, 0.5])

    def test_constant_weight_spectrum(self):
        _, spectrum = scan_spectra(CAT, WeightSpec("constant", 0.7), [4, 6, 8], count=6, grid_m=64)
        self.assertAlmostEqual(abs(spectrum.eigenvalues[0] - 0.7), 0.0, delta=1e-12)
        self.assertLessEqual(float(np.max(np.abs(spectrum.eigenvalues[1:]))), 1e-10)
        self.assertLessEqual(spectrum.spreads[0], 1e-12)

    def test_scan_needs_three_cutoffs(self):
        with self.assertRaises(ConfigError):
            scan_spectra(CAT, ONE, [4, 8])

    def test_projector_traces(self):
        self.assertEqual(projector_traces([1.0], 0.5, 4), [1, 1, 1, 1])
        self.assertAlmostEqual(projector_traces([1.0, 0.8, 0.3], 0.5, 2)[1], 1.64)
        with self.assertRaises(SigmaOnEigenvalue):
            projector_traces([0.5], 0.5, 2)

    def test_check_sigma_gap(self):
        check_sigma(0.7, [1.0, 0.5, 0.2j])
        with self.assertRaises(SigmaOnEigenvalue):
            check_sigma(0.505, [1.0, 0.5])
        with self.assertRaises(SigmaOnEigenvalue):
            check_sigma(0.5, [0.3 + 0.4j])

    def test_galerkin_square_has_squared_spectrum(self):
        M = build_galerkin(perturbed_cat(0.02), trig_weight(), 6, grid_m=64).matrix
        lead = [lam for lam in np.linalg.eigvals(M) if abs(lam) > 0.5]
        self.assertTrue(lead)
        squares = np.linalg.eigvals(M @ M)
        for lam in lead:
            self.assertLess(float(np.min(np.abs(squares - lam * lam))), 1e-8)

    def test_galerkin_spectrum_ignores_basis_order(self):
        M = build_galerkin(perturbed_cat(0.02), trig_weight(), 6, grid_m=64).matrix
        perm = np.random.default_rng(5).permutation(M.shape[0])
        shuffled = np.linalg.eigvals(M[np.ix_(perm, perm)])
        for lam in np.linalg.eigvals(M):
            if abs(lam) > 0.5:
                self.assertLess(float(np.min(np.abs(shuffled - lam))), 1e-10)

    def test_galerkin_linear_in_weight(self):
        spec = perturbed_cat(0.02)
        one = build_galerkin(spec, ONE, 4, grid_m=64).matrix
        scaled = build_galerkin(spec, WeightSpec("constant", 0.7), 4, grid_m=64).matrix
        np.testing.assert_allclose(scaled, 0.7 * one, atol=1e-13)

    @unittest.skipUnless(SLOW, "set ZETALAB_SLOW=1 for the full Galerkin cutoff scan")
    def test_scan_spread_shrinks_with_cutoff(self):
        entries = convergence_scan(perturbed_cat(0.02), ONE, [16, 24, 32], count=4)
        self.assertLessEqual(entries[0].spread, 1e-8)
        for entry in entries[:3]:
            first, middle, last = entry.values
            self.assertLessEqual(abs(middle - last), 1.5 * abs(first - last) + 1e-12)

    def test_matching(self):
        result = match_resonances([1.0], [1.0], 1e-3)
        self.assertEqual(len(result.pairs), 1)
        self.assertEqual(result.pairs[0].residual, 0.0)
        result = match_resonances([1.4285714], [0.7], 1e-6)
        self.assertEqual(len(result.pairs), 1)
        result = match_resonances([1.0], [0.5], 1e-3)
        self.assertEqual(result.unmatched_zeros, [1.0])
        self.assertEqual(result.unmatched_eigenvalues, [0.5])


class TestWorkers(unittest.TestCase):
    """Test ordered chunk mapping."""

    def test_slices_cover_range(self):
        slices = chunk_slices(10, 4)
        self.assertEqual([(s.start, s.stop) for s in slices], [(0, 4), (4, 8), (8, 10)])

    def test_order_kept_with_threads(self):
        self.assertEqual(ordered_map(lambda v: v * v, range(20), workers=4), [v * v for v in range(20)])


class TestCommandLine(unittest.TestCase):
    """Test config handling, pipeline stages and exit codes."""

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.out = self.tmp / "out"
        self.cache = self.tmp / "cache"

    def tearDown(self):
        self._tmp.cleanup()

    def write_config(self, **run) -> str:
        data = {
            "map": {"matrix": [[2, 1], [1, 1]]},
            "run": {"n_max": 8, "n_list": [4, 6, 8], "grid_m": 64, "galerkin_K": 4, "galerkin_K_list": [2, 3], **run},
        }
        path = self.tmp / "config.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        return str(path)

    def write_raw_config(self, data) -> str:
        path = self.tmp / "raw.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        return str(path)

    def run_cli(self, *argv) -> int:
        return self.run_cli_with_stderr(*argv)[0]

    def run_cli_with_stderr(self, *argv):
        err = io.StringIO()
        with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(err):
            code = cli.main(list(argv) + ["--out", str(self.out), "--cache", str(self.cache)])
        return code, err.getvalue()

    def test_missing_config(self):
        self.assertEqual(self.run_cli("orbits", "--config", str(self.tmp / "nope.json")), EXIT_CODES["config_error"])

    def test_orbits_summary(self):
        config = self.write_config()
        self.assertEqual(self.run_cli("orbits", "--config", config, "--n", "6"), 0)
        summary = json.loads((self.out / ORBIT_SUMMARY_JSON).read_text(encoding="utf-8"))
        self.assertEqual([row["count"] for row in summary["orbits"]], list(CAT_COUNTS[:6]))
        self.assertEqual(len(list(self.cache.glob("*.ndjson"))), 6)

    def test_large_n_rejected(self):
        self.assertEqual(self.run_cli("orbits", "--config", self.write_config(), "--n", "20"), EXIT_CODES["config_error"])

    def test_determinant_unit_zero(self):
        self.assertEqual(self.run_cli("determinant", "--config", self.write_config()), 0)
        resonances = json.loads((self.out / RESONANCES_JSON).read_text(encoding="utf-8"))
        self.assertEqual(len(resonances["stable_zeros"]), 1)
        self.assertAlmostEqual(resonances["stable_zeros"][0][0], 1.0, delta=1e-8)

    def test_ambiguous_rounding_exit_code(self):
        config = self.write_config(r=3, n_max=4, n_list=[2, 3, 4])
        self.assertEqual(self.run_cli("determinant", "--config", config), EXIT_CODES["config_error"])

    def test_insufficient_traces_exit_code(self):
        config = self.write_config(n_max=4, n_list=[2, 3, 8])
        self.assertEqual(self.run_cli("determinant", "--config", config), EXIT_CODES["numerical_failure"])

    def test_report_needs_artifacts(self):
        self.assertEqual(self.run_cli("report", "--config", self.write_config()), EXIT_CODES["missing_inputs"])

    def test_full_report(self):
        config = self.write_config()
        self.assertEqual(self.run_cli("galerkin", "--config", config), 0)
        self.assertEqual(self.run_cli("determinant", "--config", config), 0)
        self.assertEqual(self.run_cli("report", "--config", config, "--format", "csv"), 0)
        self.assertEqual(self.run_cli("report", "--config", config, "--format", "json"), 0)
        report = json.loads((self.out / "report.json").read_text(encoding="utf-8"))
        pairs = [row for row in report["rows"] if row["section"] == "pair_zero"]
        self.assertEqual(len(pairs), 1)
        self.assertTrue((self.out / "report.csv").exists())

    def test_identities_suite(self):
        config = self.write_config()
        self.assertEqual(self.run_cli("verify", "--config", config, "--suite", "identities"), 0)
        verdict = json.loads((self.out / "verdict.json").read_text(encoding="utf-8"))
        self.assertTrue(verdict["pass"])
        self.assertEqual(len(verdict["checks"]), 5)

    def test_epsilon_too_large_exit_code(self):
        config = self.write_raw_config(
            {
                "map": {
                    "matrix": [[2, 1], [1, 1]],
                    "epsilon": 0.5,
                    "perturbation": [{"component": 0, "amplitude": 1.0, "frequency": [0, 1], "phase": "sin"}],
                },
                "run": {"n_max": 4},
            }
        )
        code, err = self.run_cli_with_stderr("orbits", "--config", config, "--n", "2")
        self.assertEqual(code, EXIT_CODES["numerical_failure"])
        record = json.loads(err.strip().splitlines()[-1])
        self.assertEqual(record["error"], "ContinuationFailure")
        self.assertEqual(record["exit_code"], EXIT_CODES["numerical_failure"])

    def test_tight_tolerances_fail_verification(self):
        config = self.write_raw_config(
            {
                "map": {"matrix": [[2, 1], [1, 1]]},
                "run": {"n_max": 4, "epsilon_ladder": [0.2, 0.1, 0.05]},
                "tolerances": {"mollifier": 1e-15, "lemma": 1e-15},
            }
        )
        self.assertEqual(
            self.run_cli("verify", "--config", config, "--suite", "lemma2"), EXIT_CODES["numerical_failure"]
        )
        verdict = json.loads((self.out / VERDICT_JSON).read_text(encoding="utf-8"))
        self.assertFalse(verdict["pass"])
        self.assertEqual(len(verdict["checks"]), 5)
        self.assertTrue(all(c["tol"] == 1e-15 for c in verdict["checks"]))
        self.assertTrue(any(not c["pass"] for c in verdict["checks"]))

    def test_workers_do_not_change_traces(self):
        config = self.write_raw_config(
            {
                "map": {
                    "matrix": [[2, 1], [1, 1]],
                    "epsilon": 0.02,
                    "perturbation": [{"component": 0, "amplitude": 1.0, "frequency": [0, 1], "phase": "sin"}],
                },
                "run": {"n_max": 6, "n_list": [4, 5, 6]},
            }
        )
        outputs = []
        for workers in ("1", "4"):
            self.out = self.tmp / f"out{workers}"
            self.cache = self.tmp / f"cache{workers}"
            self.assertEqual(self.run_cli("traces", "--config", config, "--workers", workers), 0)
            outputs.append((self.out / "traces.csv").read_bytes())
        self.assertEqual(outputs[0], outputs[1])

    def test_cache_env_precedence(self):
        config = RunConfig.from_dict({"map": {"matrix": [[2, 1], [1, 1]]}, "cache_dir": "from_config"})
        with patch.dict(os.environ, {"ZETALAB_CACHE": "from_env"}):
            self.assertEqual(cli.resolve_cache_dir(None, config), Path("from_env"))
            self.assertEqual(cli.resolve_cache_dir("from_flag", config), Path("from_flag"))
        with patch.dict(os.environ, {}, clear=True):
            self.assertEqual(cli.resolve_cache_dir(None, config), Path("from_config"))

    @unittest.skipUnless(SLOW, "set ZETALAB_SLOW=1 for the cross-validation suite")
    def test_perturbed_crosscheck(self):
        data = {
            "map": {
                "matrix": [[2, 1], [1, 1]],
                "epsilon": 0.02,
                "perturbation": [{"component": 0, "amplitude": 1.0, "frequency": [0, 1], "phase": "sin"}],
            },
            "run": {"n_max": 12, "galerkin_K": 32, "galerkin_K_list": [24]},
        }
        path = self.tmp / "perturbed.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        self.assertEqual(self.run_cli("verify", "--config", str(path), "--suite", "crosscheck"), 0)


if __name__ == "__main__":
    # Run tests
    print("=" * 60)
    print("Zeta-Function Laboratory Test Suite")
    print("=" * 60)

    # Create test suite
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()

    # Add all test classes
    suite.addTests(loader.loadTestsFromTestCase(TestModels))
    suite.addTests(loader.loadTestsFromTestCase(TestDynamics))
    suite.addTests(loader.loadTestsFromTestCase(TestOrbits))
    suite.addTests(loader.loadTestsFromTestCase(TestTraces))
    suite.addTests(loader.loadTestsFromTestCase(TestMollifier))
    suite.addTests(loader.loadTestsFromTestCase(TestDeterminant))
    suite.addTests(loader.loadTestsFromTestCase(TestSpectral))
    suite.addTests(loader.loadTestsFromTestCase(TestWorkers))
    suite.addTests(loader.loadTestsFromTestCase(TestCommandLine))

    # Run with verbosity
    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)

    # Summary
    print("\n" + "=" * 60)
    if result.wasSuccessful():
        print("✅ All tests passed!")
    else:
        print(f"❌ {len(result.failures)} failures, {len(result.errors)} errors")
    print("=" * 60)

    # Exit with appropriate code
    sys.exit(0 if result.wasSuccessful() else 1)
