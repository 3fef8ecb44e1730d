"""
Constants and default settings for the zeta-function laboratory.

Every tunable number lives here as a plain dict so configs can override it
key by key.
"""

import math

# =============================================================================
# DYNAMICS
# =============================================================================

DYNAMICS = {
    "dimension": 2,  # only d = 2 is supported by the algorithms
    "inverse_tolerance": 1e-13,
    "inverse_max_iterations": 50,
    "contraction_grid": 64,  # sample grid for the inverse-map contraction precheck
    "weight_grid": 512,  # grid used for the reported sup-norm estimate
    "hyperbolicity_grid": 64,
    "hyperbolicity_iterates": 8,
    "cone_aperture": 0.5,
}

# Cat map, the reference example throughout
CAT_MATRIX = ((2, 1), (1, 1))
CAT_LAMBDA = (3.0 - math.sqrt(5.0)) / 2.0


# =============================================================================
# ORBITS
# =============================================================================

ORBITS = {
    "tolerance": 1e-11,
    "newton_max_iterations": 25,
    "newton_max_halvings": 8,
    "rounding_factor": 64.0,  # floor of residual tolerances, in units of eps * |DT^n|
    "separation_factor": 10.0,  # points closer than this * tolerance collide
    "epsilon_ladder": (0.25, 0.5, 0.75, 1.0),  # fractions of epsilon for the fallback continuation
    "shooting_tolerance": 1e-13,  # largest per-step residual the shooting Newton aims for
    "chunk_size": 4096,
    "schema": "orbitset-v1",
}


# =============================================================================
# TRACES
# =============================================================================

TRACES = {
    "singular_determinant": 1e-14,
    "grid_m": 256,
    "realness_tolerance": 1e-10,
}


# =============================================================================
# MOLLIFIER
# =============================================================================

MOLLIFIER = {
    "shape": "truncated-gaussian",
    "sigma_per_epsilon": 0.25,  # sigma = epsilon / 4
    "cut_sigmas": 4.0,  # support radius 4 sigma = epsilon, diameter 8 sigma
    "min_points_per_width": 8.0,  # grid_m * epsilon must reach this
    "points_per_width": 48.0,  # used to choose grid_m for a ladder rung
    "max_width": 0.25,  # 2 epsilon < 0.5
    "epsilon_ladder": (0.1, 0.05, 0.025),
    "tile_rows": 128,
    "exponent_range": (1.0, 3.0),
    "noise_floor": 1e-12,
}


# =============================================================================
# DETERMINANT
# =============================================================================

DETERMINANT = {
    "max_terms": 16,
    "trim_tolerance": 1e-13,  # trailing coefficients below this * max|c| are rounding noise
    "root_tolerance": 1e-10,
    "root_max_iterations": 500,
    "polish_steps": 3,
    "stability_threshold": 1e-6,
    "n_list": (8, 10, 12),
    "n_lo": 4,
    "sigma_gap": 0.02,  # minimum relative distance between sigma and any eigenvalue modulus
    "sigma_floor": 1e-6,  # lower end of the spectral gap search
    "remainder_floor": 1e-12,
    "min_fit_points": 4,
    "radius_cap": 1.5,
}


# =============================================================================
# GALERKIN
# =============================================================================

GALERKIN = {
    "K": 32,
    "K_list": (16, 24, 32),
    "grid_m": 256,
    "chop_tolerance": 1e-13,
    "aliasing_tolerance": 1e-6,
    "residual_tolerance": 1e-8,
    "spread_tolerance": 1e-6,
    "eigen_count": 12,
    "ordering": "maxnorm-lex",
    "schema": "galerkin-v1",
}


# =============================================================================
# VERIFY
# =============================================================================

# Test functions for the operator identities, as weight-style term lists
VERIFY = {
    "h_terms": (
        {"frequency": [1, 0], "re": 0.5, "im": 0.0},
        {"frequency": [-1, 0], "re": 0.5, "im": 0.0},
        {"frequency": [0, 1], "re": 0.0, "im": 0.25},
    ),
    "f_terms": (
        {"frequency": [0, 0], "re": 1.0, "im": 0.0},
        {"frequency": [0, 1], "re": 0.3, "im": 0.0},
        {"frequency": [1, -1], "re": 0.0, "im": -0.2},
    ),
}


# =============================================================================
# RUN DEFAULTS
# =============================================================================

RUN_DEFAULTS = {
    "n_max": 12,
    "galerkin_K": GALERKIN["K"],
    "galerkin_K_list": list(GALERKIN["K_list"]),
    "grid_m": TRACES["grid_m"],
    "epsilon_ladder": list(MOLLIFIER["epsilon_ladder"]),
    "sigma": "auto",
    "r": 4.0,
    "n_list": list(DETERMINANT["n_list"]),
    "seed": 0,
    "n_lo": DETERMINANT["n_lo"],
    "radius_cap": DETERMINANT["radius_cap"],
    "eigen_count": GALERKIN["eigen_count"],
    "hyperbolicity_grid": DYNAMICS["hyperbolicity_grid"],
    "hyperbolicity_iterates": DYNAMICS["hyperbolicity_iterates"],
    "allow_large": False,
}

TOLERANCE_DEFAULTS = {
    "orbit": ORBITS["tolerance"],
    "inverse": DYNAMICS["inverse_tolerance"],
    "stability": DETERMINANT["stability_threshold"],
    "match": 1e-3,
    "mollifier": 1e-3,
    "lemma": 2e-2,
    "identities": 1e-8,
    "eigen_residual": GALERKIN["residual_tolerance"],
}

MAX_N_DEFAULT = 16


# =============================================================================
# EXIT CODES
# =============================================================================

EXIT_CODES = {
    "ok": 0,
    "missing_inputs": 2,
    "numerical_failure": 3,
    "config_error": 4,
}


# =============================================================================
# FILE/PATH SETTINGS
# =============================================================================

CACHE_ENV_VAR = "ZETALAB_CACHE"
DEFAULT_OUTPUT_DIR = "zetalab_out"
DEFAULT_CACHE_DIR = "zetalab_cache"

TRACES_CSV = "traces.csv"
TRACES_JSON = "traces.json"
SERIES_CSV = "series.csv"
RESONANCES_CSV = "resonances.csv"
RESONANCES_JSON = "resonances.json"
SPECTRUM_CSV = "spectrum.csv"
GALERKIN_DUMP = "galerkin_matrix.txt"
LADDER_CSV = "mollifier_ladder.csv"
VERDICT_JSON = "verdict.json"
REPORT_STEM = "report"
ORBIT_SUMMARY_JSON = "orbits_summary.json"
