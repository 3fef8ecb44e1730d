"""
Data models for the zeta-function laboratory.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .constants import (
    DYNAMICS,
    MAX_N_DEFAULT,
    MOLLIFIER,
    ORBITS,
    RUN_DEFAULTS,
    TOLERANCE_DEFAULTS,
    VERIFY,
)
from .errors import ConfigError, NotHyperbolic, UnsupportedDimension

TWO_PI = 2.0 * math.pi


def content_digest(payload: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON encoding of a payload."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def complex_to_pair(value: complex) -> List[float]:
    return [float(value.real), float(value.imag)]


def pair_to_complex(value: Any) -> complex:
    """Accept a number or an [re, im] pair."""
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise ConfigError(f"complex value must be [re, im], got {value!r}")
        return complex(float(value[0]), float(value[1]))
    return complex(value)


# =============================================================================
# TRIGONOMETRIC POLYNOMIALS
# =============================================================================


@dataclass(frozen=True)
class TrigPolynomial:
    """Finite sum x -> sum_k c_k exp(2 pi i k.x) on the torus."""

    frequencies: Tuple[Tuple[int, ...], ...] = ()
    coefficients: Tuple[complex, ...] = ()

    def __post_init__(self):
        if len(self.frequencies) != len(self.coefficients):
            raise ConfigError("frequencies and coefficients differ in length")

    @property
    def dimension(self) -> int:
        return len(self.frequencies[0]) if self.frequencies else DYNAMICS["dimension"]

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Evaluate at points x of shape (..., d); returns a complex array of shape (...)."""
        x = np.asarray(x, dtype=float)
        value = np.zeros(x.shape[:-1], dtype=complex)
        for freq, coeff in zip(self.frequencies, self.coefficients):
            value += coeff * np.exp(1j * TWO_PI * (x @ np.asarray(freq, dtype=float)))
        return value

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """Analytic gradient, shape (..., d)."""
        x = np.asarray(x, dtype=float)
        grad = np.zeros(x.shape, dtype=complex)
        for freq, coeff in zip(self.frequencies, self.coefficients):
            k = np.asarray(freq, dtype=float)
            term = coeff * np.exp(1j * TWO_PI * (x @ k))
            grad += (1j * TWO_PI) * term[..., None] * k
        return grad

    def coefficient_bound(self) -> float:
        """Sum of |c_k|, an upper bound for the sup norm."""
        return math.fsum(abs(c) for c in self.coefficients)

    def max_frequency(self) -> int:
        return max((max(abs(v) for v in f) for f in self.frequencies), default=0)

    def is_conjugate_symmetric(self, tol: float = 1e-15) -> bool:
        """True when the polynomial is real valued (c_{-k} = conj c_k)."""
        table = dict(zip(self.frequencies, self.coefficients))
        for freq, coeff in table.items():
            mirror = table.get(tuple(-v for v in freq), 0.0)
            if abs(mirror - coeff.conjugate()) > tol * (1.0 + abs(coeff)):
                return False
        return True

    def scaled(self, factor: complex) -> "TrigPolynomial":
        return TrigPolynomial(self.frequencies, tuple(factor * c for c in self.coefficients))

    def plus_constant(self, value: complex) -> "TrigPolynomial":
        zero = tuple(0 for _ in range(self.dimension))
        table = dict(zip(self.frequencies, self.coefficients))
        table[zero] = table.get(zero, 0.0) + value
        freqs = tuple(sorted(table))
        return TrigPolynomial(freqs, tuple(complex(table[f]) for f in freqs))

    @classmethod
    def from_terms(cls, terms: Sequence[Dict[str, Any]]) -> "TrigPolynomial":
        """Build from config terms [{frequency, re, im}]; repeated frequencies add up."""
        table: Dict[Tuple[int, ...], complex] = {}
        for term in terms:
            freq = tuple(int(v) for v in term["frequency"])
            coeff = complex(float(term.get("re", 0.0)), float(term.get("im", 0.0)))
            table[freq] = table.get(freq, 0.0) + coeff
        freqs = tuple(sorted(table))
        return cls(freqs, tuple(complex(table[f]) for f in freqs))

    @classmethod
    def real_mode(cls, amplitude: float, frequency: Sequence[int], phase: str) -> "TrigPolynomial":
        """amplitude * sin(2 pi k.x) or amplitude * cos(2 pi k.x)."""
        k = tuple(int(v) for v in frequency)
        minus_k = tuple(-v for v in k)
        if phase == "sin":
            return cls((k, minus_k), (-0.5j * amplitude, 0.5j * amplitude))
        if phase == "cos":
            return cls((k, minus_k), (0.5 * amplitude + 0j, 0.5 * amplitude + 0j))
        raise ConfigError(f"perturbation phase must be 'sin' or 'cos', got {phase!r}")

    def __add__(self, other: "TrigPolynomial") -> "TrigPolynomial":
        table: Dict[Tuple[int, ...], complex] = {}
        for poly in (self, other):
            for freq, coeff in zip(poly.frequencies, poly.coefficients):
                table[freq] = table.get(freq, 0.0) + coeff
        freqs = tuple(sorted(table))
        return TrigPolynomial(freqs, tuple(complex(table[f]) for f in freqs))

    def to_terms(self) -> List[Dict[str, Any]]:
        return [
            {"frequency": list(f), "re": float(c.real), "im": float(c.imag)}
            for f, c in zip(self.frequencies, self.coefficients)
        ]


# =============================================================================
# MAPS AND WEIGHTS
# =============================================================================


@dataclass(frozen=True)
class PerturbationMode:
    """One real mode amplitude * phase(2 pi k.x) added to component `component` of v."""

    component: int
    amplitude: float
    frequency: Tuple[int, ...]
    phase: str = "sin"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "component": self.component,
            "amplitude": self.amplitude,
            "frequency": list(self.frequency),
            "phase": self.phase,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PerturbationMode":
        return cls(
            component=int(data["component"]),
            amplitude=float(data["amplitude"]),
            frequency=tuple(int(v) for v in data["frequency"]),
            phase=data.get("phase", "sin"),
        )


@dataclass(frozen=True)
class MapSpec:
    """Hyperbolic torus diffeomorphism T(x) = A x + epsilon v(x) mod Z^d."""

    A: Tuple[Tuple[int, ...], ...]
    epsilon: float = 0.0
    modes: Tuple[PerturbationMode, ...] = ()
    smoothness_r: float = math.inf

    def __post_init__(self):
        d = len(self.A)
        if d != DYNAMICS["dimension"]:
            raise UnsupportedDimension(f"only d=2 tori are supported, got d={d}")
        if any(len(row) != d for row in self.A):
            raise ConfigError("map.matrix must be square")
        det = self.A[0][0] * self.A[1][1] - self.A[0][1] * self.A[1][0]
        if abs(det) != 1:
            raise ConfigError(f"|det A| must be 1 for a torus diffeomorphism, got det={det}")
        trace = self.A[0][0] + self.A[1][1]
        if abs(trace) <= 2:
            raise NotHyperbolic(f"|trace A| = {abs(trace)} <= 2, the linear part is not hyperbolic")
        if self.epsilon < 0:
            raise ConfigError("map.epsilon must be non-negative")
        for mode in self.modes:
            if not 0 <= mode.component < d or len(mode.frequency) != d:
                raise ConfigError(f"bad perturbation mode {mode.to_dict()}")
        if not self.smoothness_r > 0:
            raise ConfigError("map.smoothness_r must be positive")

    @property
    def dimension(self) -> int:
        return len(self.A)

    @cached_property
    def matrix(self) -> np.ndarray:
        return np.array(self.A, dtype=np.int64)

    @property
    def determinant(self) -> int:
        return self.A[0][0] * self.A[1][1] - self.A[0][1] * self.A[1][0]

    @property
    def trace(self) -> int:
        return self.A[0][0] + self.A[1][1]

    @cached_property
    def inverse_matrix(self) -> np.ndarray:
        """Exact integer inverse (adjugate times det, since det = +-1)."""
        (a, b), (c, d) = self.A
        det = self.determinant
        return np.array([[d * det, -b * det], [-c * det, a * det]], dtype=np.int64)

    @cached_property
    def perturbation(self) -> Tuple[TrigPolynomial, ...]:
        """The vector field v, one real-valued trig polynomial per component."""
        components = [TrigPolynomial() for _ in range(self.dimension)]
        for mode in self.modes:
            term = TrigPolynomial.real_mode(mode.amplitude, mode.frequency, mode.phase)
            components[mode.component] = components[mode.component] + term
        return tuple(components)

    @property
    def is_linear(self) -> bool:
        return self.epsilon == 0.0 or not self.modes

    def with_epsilon(self, epsilon: float) -> "MapSpec":
        return MapSpec(self.A, epsilon, self.modes, self.smoothness_r)

    def linear_part(self) -> "MapSpec":
        return MapSpec(self.A, 0.0, (), self.smoothness_r)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "matrix": [list(row) for row in self.A],
            "epsilon": self.epsilon,
            "perturbation": [m.to_dict() for m in self.modes],
            "smoothness_r": "inf" if math.isinf(self.smoothness_r) else self.smoothness_r,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MapSpec":
        try:
            matrix = tuple(tuple(int(v) for v in row) for row in data["matrix"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"map.matrix missing or malformed: {e}")
        return cls(
            A=matrix,
            epsilon=float(data.get("epsilon", 0.0)),
            modes=tuple(PerturbationMode.from_dict(m) for m in data.get("perturbation", [])),
            smoothness_r=float(data.get("smoothness_r", math.inf)),
        )

    def digest(self) -> str:
        return content_digest(self.to_dict())


WEIGHT_KINDS = ("constant", "trig", "exp-trig")


@dataclass(frozen=True)
class WeightSpec:
    """Weight g: a constant, a trig polynomial, or the exponential of one."""

    kind: str = "constant"
    value: complex = 1.0 + 0j
    poly: Optional[TrigPolynomial] = None

    def __post_init__(self):
        if self.kind not in WEIGHT_KINDS:
            raise ConfigError(f"weight.kind must be one of {WEIGHT_KINDS}, got {self.kind!r}")
        if self.kind != "constant" and self.poly is None:
            raise ConfigError(f"weight.kind={self.kind!r} needs weight.terms")

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "constant":
            return np.full(x.shape[:-1], complex(self.value), dtype=complex)
        values = self.poly.evaluate(x)
        if self.kind == "exp-trig":
            return np.exp(values)
        return values

    @property
    def sup_norm_bound(self) -> float:
        """Rigorous upper bound for the sup norm of g."""
        if self.kind == "constant":
            return abs(complex(self.value))
        bound = self.poly.coefficient_bound()
        return math.exp(bound) if self.kind == "exp-trig" else bound

    def grid_sup_norm(self, m: Optional[int] = None) -> float:
        """Sup norm sampled on an m x m grid (reported next to the bound)."""
        m = m or DYNAMICS["weight_grid"]
        axis = np.arange(m) / m
        best = 0.0
        for row in axis:
            pts = np.stack([np.full(m, row), axis], axis=-1)
            best = max(best, float(np.max(np.abs(self.evaluate(pts)))))
        return best

    @property
    def is_real(self) -> bool:
        if self.kind == "constant":
            return complex(self.value).imag == 0.0
        return self.poly.is_conjugate_symmetric()

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def scaled(self, factor: complex) -> "WeightSpec":
        """The weight c * g."""
        if self.kind == "constant":
            return WeightSpec("constant", complex(factor) * complex(self.value))
        if self.kind == "trig":
            return WeightSpec("trig", poly=self.poly.scaled(factor))
        return WeightSpec("exp-trig", poly=self.poly.plus_constant(complex(np.log(complex(factor)))))

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"kind": self.kind}
        if self.kind == "constant":
            data["value"] = complex_to_pair(complex(self.value))
        else:
            data["terms"] = self.poly.to_terms()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "WeightSpec":
        kind = data.get("kind", "constant")
        if kind == "constant":
            return cls("constant", pair_to_complex(data.get("value", 1.0)))
        return cls(kind, poly=TrigPolynomial.from_terms(data.get("terms", [])))

    def digest(self) -> str:
        return content_digest(self.to_dict())


@dataclass(frozen=True)
class HyperbolicityEstimate:
    """Grid estimate of the Anosov constants (a heuristic, not a proof)."""

    lam: float
    C: float
    cone_aperture: float
    certified: bool
    lambda_stable: float = math.nan
    lambda_unstable: float = math.nan
    margin: float = math.nan  # 1 - lambda

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lambda": self.lam,
            "C": self.C,
            "cone_aperture": self.cone_aperture,
            "certified": self.certified,
            "lambda_stable": self.lambda_stable,
            "lambda_unstable": self.lambda_unstable,
            "margin": self.margin,
        }


# =============================================================================
# PERIODIC ORBITS
# =============================================================================


@dataclass(frozen=True)
class PeriodicPoint:
    """A point of Fix T^n with its lift class and monodromy."""

    n: int
    k: Tuple[int, ...]
    x: Tuple[float, ...]
    residual: float
    monodromy: Tuple[Tuple[float, ...], ...]
    primitive_period: int


@dataclass
class OrbitSet:
    """Fix T^n stored column-wise; `points` gives the per-point view."""

    map_digest: str
    n: int
    expected_count: int
    ks: np.ndarray  # (P, d) int64 lift classes
    xs: np.ndarray  # (P, d) reduced coordinates
    residuals: np.ndarray  # (P,)
    monodromies: np.ndarray  # (P, d, d)
    primitive_periods: np.ndarray  # (P,) int64

    def __len__(self) -> int:
        return int(self.xs.shape[0])

    def point(self, i: int) -> PeriodicPoint:
        return PeriodicPoint(
            n=self.n,
            k=tuple(int(v) for v in self.ks[i]),
            x=tuple(float(v) for v in self.xs[i]),
            residual=float(self.residuals[i]),
            monodromy=tuple(tuple(float(v) for v in row) for row in self.monodromies[i]),
            primitive_period=int(self.primitive_periods[i]),
        )

    @property
    def points(self) -> List[PeriodicPoint]:
        return [self.point(i) for i in range(len(self))]

    def __iter__(self) -> Iterator[PeriodicPoint]:
        for i in range(len(self)):
            yield self.point(i)

    def header(self) -> Dict[str, Any]:
        return {
            "schema": ORBITS["schema"],
            "map_digest": self.map_digest,
            "n": self.n,
            "expected_count": self.expected_count,
        }

    def same_as(self, other: "OrbitSet") -> bool:
        """Bit-exact equality of all stored data."""
        return (
            self.header() == other.header()
            and np.array_equal(self.ks, other.ks)
            and np.array_equal(self.xs, other.xs)
            and np.array_equal(self.residuals, other.residuals)
            and np.array_equal(self.monodromies, other.monodromies)
            and np.array_equal(self.primitive_periods, other.primitive_periods)
        )


@dataclass(frozen=True)
class ValidationFailure:
    kind: str  # residual | count | separation | primitive_period | hyperbolicity
    index: int
    detail: str


@dataclass
class ValidationReport:
    """Outcome of re-checking an OrbitSet against its map."""

    n: int
    count: int
    expected_count: int
    max_residual: float
    min_separation: float
    failures: List[ValidationFailure] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def kinds(self) -> List[str]:
        return sorted({f.kind for f in self.failures})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "count": self.count,
            "expected_count": self.expected_count,
            "max_residual": self.max_residual,
            "min_separation": self.min_separation,
            "ok": self.ok,
            "failures": [f.__dict__ for f in self.failures[:50]],
        }


# =============================================================================
# TRACES
# =============================================================================


@dataclass(frozen=True)
class TraceTable:
    """Weighted periodic-orbit sums tr_1 .. tr_{n_max}."""

    map_digest: str
    weight_digest: str
    entries: Tuple[complex, ...]
    tolerances: Dict[str, float] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("a trace table needs at least tr_1")

    @property
    def n_max(self) -> int:
        return len(self.entries)

    def tr(self, n: int) -> complex:
        if not 1 <= n <= self.n_max:
            raise IndexError(f"tr_{n} outside 1..{self.n_max}")
        return self.entries[n - 1]

    def as_array(self) -> np.ndarray:
        return np.array(self.entries, dtype=complex)

    def sidecar(self) -> Dict[str, Any]:
        return {
            "map_digest": self.map_digest,
            "weight_digest": self.weight_digest,
            "n_max": self.n_max,
            "tolerances": dict(self.tolerances),
        }


# =============================================================================
# MOLLIFIER QUADRATURE
# =============================================================================


@dataclass(frozen=True)
class MollifierSpec:
    """Unit-mass kernel j_epsilon of width epsilon."""

    epsilon: float
    shape: str = MOLLIFIER["shape"]
    normalization: float = 1.0  # multiplies the raw profile so the grid mass is 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("mollifier epsilon must be positive")
        if self.shape not in ("bump", "truncated-gaussian"):
            raise ConfigError(f"unknown mollifier shape {self.shape!r}")
        if self.epsilon >= MOLLIFIER["max_width"]:
            raise ConfigError("mollifier support must stay below the injectivity scale 0.5")


@dataclass(frozen=True)
class QuadratureGrid:
    """Uniform m^d grid on [0,1)^d with cell weight m^-d."""

    m: int
    d: int = 2

    @property
    def weight(self) -> float:
        return float(self.m) ** (-self.d)

    @property
    def axis(self) -> np.ndarray:
        return np.arange(self.m, dtype=float) / self.m

    def nodes(self) -> np.ndarray:
        """All nodes, shape (m, m, 2), first index along x_1."""
        a = self.axis
        return np.stack(np.meshgrid(a, a, indexing="ij"), axis=-1)

    def row_tiles(self, rows: int) -> Iterator[np.ndarray]:
        """Node blocks of `rows` x_1-values each, in a fixed order."""
        a = self.axis
        for start in range(0, self.m, rows):
            block = a[start : start + rows]
            yield np.stack(np.meshgrid(block, a, indexing="ij"), axis=-1)


# =============================================================================
# DETERMINANT
# =============================================================================


@dataclass(frozen=True)
class DeterminantSeries:
    """Taylor coefficients c_0 .. c_N of the dynamical determinant."""

    coefficients: Tuple[complex, ...]
    map_digest: str = ""
    weight_digest: str = ""

    @property
    def n_max(self) -> int:
        return len(self.coefficients) - 1

    def as_array(self) -> np.ndarray:
        return np.array(self.coefficients, dtype=complex)

    def truncated(self, N: int) -> "DeterminantSeries":
        return DeterminantSeries(self.coefficients[: N + 1], self.map_digest, self.weight_digest)


@dataclass(frozen=True)
class SpectralBoundParams:
    """Radii and cuts derived from r, lambda and the sup norm of g."""

    r: float
    p: float
    q: float
    alpha_r: float
    lam: float
    g_sup: float
    rho: float
    rho_tilde: float
    rho_star: float
    sigma: float
    essential_radius: float
    certified_cut: float  # max{rho, rho_tilde^(1/2)}
    remark_radius: float  # max{rho^-1, rho_tilde^(-1/2)}, as stated in the closing remark

    @property
    def sigma_radius(self) -> float:
        return self.sigma ** -0.5 if self.sigma > 0 else math.inf

    def to_dict(self) -> Dict[str, Any]:
        return {
            "r": self.r,
            "p": self.p,
            "q": self.q,
            "alpha_r": self.alpha_r,
            "lambda": self.lam,
            "g_sup": self.g_sup,
            "rho": self.rho,
            "rho_tilde": self.rho_tilde,
            "rho_star": self.rho_star,
            "sigma": self.sigma,
            "sigma_radius": self.sigma_radius,
            "essential_radius": self.essential_radius,
            "certified_cut": self.certified_cut,
            "remark_radius": self.remark_radius,
        }


@dataclass(frozen=True)
class PolynomialRoot:
    z: complex
    residual: float  # |p(z)| / sum |c_m| |z|^m


@dataclass(frozen=True)
class ZeroRecord:
    z: complex
    stability_spread: float
    inside_certified: bool
    stable: bool = True


@dataclass(frozen=True)
class ResonancePair:
    zero: complex
    eigenvalue: complex
    residual: float  # |z * lambda - 1|


@dataclass
class MatchResult:
    pairs: List[ResonancePair] = field(default_factory=list)
    unmatched_zeros: List[complex] = field(default_factory=list)
    unmatched_eigenvalues: List[complex] = field(default_factory=list)


@dataclass
class ResonanceReport:
    """Stable zeros of the determinant and their pairing with eigenvalues."""

    zeros: List[ZeroRecord]
    certified_radius: float
    report_radius: float
    matches: MatchResult = field(default_factory=MatchResult)
    params: Optional[SpectralBoundParams] = None

    @property
    def stable_zeros(self) -> List[complex]:
        return [r.z for r in self.zeros if r.stable and abs(r.z) < self.report_radius]


@dataclass
class FitReport:
    """Geometric decay fit of tr_n - Tr P^n."""

    rate: float
    amplitude: float
    sigma: float
    n_lo: int
    n_used: List[int]
    remainders: List[complex]

    @property
    def bound(self) -> float:
        return math.sqrt(self.sigma)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rate": self.rate,
            "amplitude": self.amplitude,
            "sigma": self.sigma,
            "bound": self.bound,
            "n_lo": self.n_lo,
            "n_used": list(self.n_used),
            "remainders": [complex_to_pair(r) for r in self.remainders],
        }


# =============================================================================
# SPECTRAL ORACLE
# =============================================================================


@dataclass
class GalerkinOperator:
    """Fourier-Galerkin matrix M_jk = <e_j, T_g e_k> for |j|,|k| <= K (max norm)."""

    K: int
    grid_m: int
    frequencies: np.ndarray  # (D, d) in maxnorm-lex order
    matrix: np.ndarray  # (D, D) complex

    @property
    def dimension(self) -> int:
        return int(self.frequencies.shape[0])


@dataclass
class SpectrumEstimate:
    """Eigenvalues by descending modulus with residual certificates."""

    eigenvalues: np.ndarray
    residuals: np.ndarray
    spreads: np.ndarray  # NaN until a convergence scan fills them
    K: int = 0

    def __len__(self) -> int:
        return int(self.eigenvalues.shape[0])


@dataclass
class ScanEntry:
    eigenvalue: complex  # value at the largest K
    values: List[complex]  # tracked value per K
    spread: float
    converged: bool


# =============================================================================
# RUN CONFIGURATION
# =============================================================================

CONFIG_KEYS = {"map", "weight", "run", "tolerances", "verify", "output_dir", "cache_dir"}


@dataclass
class RunConfig:
    """Everything one pipeline run needs, loaded from a JSON config file."""

    map: MapSpec
    weight: WeightSpec = field(default_factory=WeightSpec)
    run: Dict[str, Any] = field(default_factory=lambda: dict(RUN_DEFAULTS))
    tolerances: Dict[str, float] = field(default_factory=lambda: dict(TOLERANCE_DEFAULTS))
    verify: Dict[str, Any] = field(
        default_factory=lambda: {k: [dict(t) for t in v] for k, v in VERIFY.items()}
    )
    output_dir: Optional[str] = None
    cache_dir: Optional[str] = None

    def __post_init__(self):
        for name, value in self.tolerances.items():
            if not float(value) > 0:
                raise ConfigError(f"tolerance {name!r} must be positive, got {value!r}")
        n_max = int(self.run["n_max"])
        if n_max < 1:
            raise ConfigError("run.n_max must be at least 1")
        if n_max > MAX_N_DEFAULT and not self.run.get("allow_large", False):
            raise ConfigError(f"run.n_max={n_max} exceeds {MAX_N_DEFAULT}; pass --allow-large")
        sigma = self.run.get("sigma", "auto")
        if sigma != "auto" and not float(sigma) > 0:
            raise ConfigError("run.sigma must be 'auto' or positive")

    @property
    def h_poly(self) -> TrigPolynomial:
        return TrigPolynomial.from_terms(self.verify["h_terms"])

    @property
    def f_poly(self) -> TrigPolynomial:
        return TrigPolynomial.from_terms(self.verify["f_terms"])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "map": self.map.to_dict(),
            "weight": self.weight.to_dict(),
            "run": dict(self.run),
            "tolerances": dict(self.tolerances),
            "verify": {k: [dict(t) for t in v] for k, v in self.verify.items()},
            "output_dir": self.output_dir,
            "cache_dir": self.cache_dir,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        unknown = set(data) - CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "map" not in data:
            raise ConfigError("config needs a 'map' block")
        run = dict(RUN_DEFAULTS)
        bad_run = set(data.get("run", {})) - set(RUN_DEFAULTS)
        if bad_run:
            raise ConfigError(f"unknown run keys: {sorted(bad_run)}")
        run.update(data.get("run", {}))
        tolerances = dict(TOLERANCE_DEFAULTS)
        bad_tol = set(data.get("tolerances", {})) - set(TOLERANCE_DEFAULTS)
        if bad_tol:
            raise ConfigError(f"unknown tolerance keys: {sorted(bad_tol)}")
        tolerances.update({k: float(v) for k, v in data.get("tolerances", {}).items()})
        verify = {k: [dict(t) for t in v] for k, v in VERIFY.items()}
        verify.update(data.get("verify", {}))
        return cls(
            map=MapSpec.from_dict(data["map"]),
            weight=WeightSpec.from_dict(data.get("weight", {"kind": "constant", "value": 1.0})),
            run=run,
            tolerances=tolerances,
            verify=verify,
            output_dir=data.get("output_dir"),
            cache_dir=data.get("cache_dir"),
        )

    def digest(self) -> str:
        """Changes whenever the map, the weight or any tolerance changes."""
        return content_digest(
            {
                "map": self.map.to_dict(),
                "weight": self.weight.to_dict(),
                "tolerances": dict(self.tolerances),
            }
        )
