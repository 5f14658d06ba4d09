"""Instance-anchored polar distributions and their mixtures.

A polar distribution scores a 2-D point by its distance and bearing from an
anchor: distance is Gaussian, bearing is von Mises. A weighted mixture of such
components (one per scene object) scores arbitrary workspace locations, and a
discretized score field supports multiplying several expressions together and
picking the best cell.

All functions here are pure; nothing mutates its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Concentration above this is numerically indistinguishable from a point mass
# and exp(kappa) would start to dominate double range; variance below VAR_MIN
# would blow up 1/sigma^2.
KAPPA_MAX = 500.0
VAR_MIN = 1e-6

TWO_PI = 2.0 * math.pi


def wrap_angle(phi: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return (phi + math.pi) % TWO_PI - math.pi


# ---------------------------------------------------------------------------
# Modified Bessel functions of the first kind, orders 0 and 1.
# ---------------------------------------------------------------------------

_BESSEL_SERIES_CUTOFF = 15.0
_BESSEL_X_MAX = 700.0  # I0(700) ~ 1.5e302, still inside double range


def bessel_i(order: int, x: float) -> float:
    """I0(x) or I1(x), relative error <= 1e-10 on [0, 700].

    Power series below x=15, asymptotic expansion above. The series terms are
    built recursively so no intermediate overflows for large x.
    """
    if order not in (0, 1):
        raise ValueError(f"order must be 0 or 1, got {order}")
    if not math.isfinite(x) or x < 0.0:
        raise ValueError(f"x must be finite and >= 0, got {x}")
    if x > _BESSEL_X_MAX:
        raise ValueError(f"x={x} exceeds overflow guard {_BESSEL_X_MAX}")
    if x < _BESSEL_SERIES_CUTOFF:
        return _bessel_series(order, x)
    return _bessel_asymptotic(order, x)


def _bessel_series(order: int, x: float) -> float:
    # I_v(x) = sum_k (x/2)^(2k+v) / (k! (k+v)!)
    half = 0.5 * x
    q = half * half
    term = 1.0 if order == 0 else half
    total = term
    for k in range(1, 60):
        term *= q / (k * (k + order))
        total += term
        if term < total * 1e-18:
            break
    return total


def _bessel_asymptotic(order: int, x: float) -> float:
    # Abramowitz & Stegun 9.7.1: I_v(x) ~ e^x / sqrt(2 pi x) * sum_k a_k,
    # a_0 = 1, a_k = -a_{k-1} (mu - (2k-1)^2) / (8 x k), mu = 4 v^2.
    # Truncated at the smallest term; below x=15 that term exceeds the
    # 1e-10 target, which is why the series path takes over there.
    mu = 4.0 * order * order
    total = 1.0
    term = 1.0
    prev = math.inf
    for k in range(1, 40):
        term *= -(mu - (2 * k - 1) ** 2) / (8.0 * x * k)
        if abs(term) >= prev:
            break
        total += term
        prev = abs(term)
        if prev < 1e-17:
            break
    return math.exp(x) / math.sqrt(TWO_PI * x) * total


def log_bessel_i0(x: float) -> float:
    """log I0(x), usable for any kappa in [0, KAPPA_MAX]."""
    return math.log(bessel_i(0, x))


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------


def gaussian_pdf(d: float, mu_d: float, var_d: float) -> float:
    """Normal density in the distance coordinate."""
    if not var_d > 0.0:
        raise ValueError(f"var_d must be > 0, got {var_d}")
    z = d - mu_d
    return math.exp(-0.5 * z * z / var_d) / math.sqrt(TWO_PI * var_d)


def von_mises_pdf(phi: float, mu_phi: float, kappa_phi: float) -> float:
    """Circular density exp(kappa cos(phi - mu)) / (2 pi I0(kappa))."""
    if kappa_phi < 0.0:
        raise ValueError(f"kappa_phi must be >= 0, got {kappa_phi}")
    return math.exp(kappa_phi * math.cos(phi - mu_phi)) / (
        TWO_PI * bessel_i(0, kappa_phi)
    )


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolarParams:
    """Distance mean/variance plus angular location/concentration.

    mu_phi is wrapped to [-pi, pi) and kappa_phi clamped to [0, KAPPA_MAX]
    on construction.
    """

    mu_d: float
    var_d: float
    mu_phi: float
    kappa_phi: float

    def __post_init__(self):
        if not (math.isfinite(self.mu_d) and self.mu_d >= 0.0):
            raise ValueError(f"mu_d must be finite and >= 0, got {self.mu_d}")
        if not (math.isfinite(self.var_d) and self.var_d > 0.0):
            raise ValueError(f"var_d must be finite and > 0, got {self.var_d}")
        if not math.isfinite(self.mu_phi):
            raise ValueError("mu_phi must be finite")
        if not (math.isfinite(self.kappa_phi) and self.kappa_phi >= 0.0):
            raise ValueError(f"kappa_phi must be finite and >= 0, got {self.kappa_phi}")
        object.__setattr__(self, "mu_phi", wrap_angle(self.mu_phi))
        object.__setattr__(self, "kappa_phi", min(self.kappa_phi, KAPPA_MAX))


@dataclass(frozen=True)
class MixtureComponent:
    """One polar component pinned to a scene object's coordinate."""

    weight: float
    params: PolarParams
    anchor: tuple[float, float]
    node_id: int = -1

    def __post_init__(self):
        if not (math.isfinite(self.weight) and self.weight >= 0.0):
            raise ValueError(f"weight must be finite and >= 0, got {self.weight}")
        ax, ay = self.anchor
        if not (math.isfinite(ax) and math.isfinite(ay)):
            raise ValueError("anchor coordinates must be finite")


@dataclass(frozen=True)
class SpatialMixture:
    """Ordered per-object components; order matches scene-graph node order."""

    components: tuple[MixtureComponent, ...]

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if not self.components:
            raise ValueError("mixture must have at least one component")

    def normalized_weights(self) -> np.ndarray:
        w = np.array([c.weight for c in self.components], dtype=float)
        total = w.sum()
        if total <= 0.0:
            raise ValueError("all mixture weights are zero")
        return w / total


@dataclass(frozen=True)
class GridSpec:
    """Uniform cell grid over a rectangular workspace."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    resolution: int

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")
        if not self.y_max > self.y_min:
            raise ValueError("y_max must exceed y_min")
        if self.resolution < 2:
            raise ValueError("resolution must be >= 2")

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(xs, ys) 1-D center coordinates; row i of a field is y index i."""
        n = self.resolution
        dx = (self.x_max - self.x_min) / n
        dy = (self.y_max - self.y_min) / n
        xs = self.x_min + (np.arange(n) + 0.5) * dx
        ys = self.y_min + (np.arange(n) + 0.5) * dy
        return xs, ys


@dataclass(frozen=True)
class ScoreField:
    """resolution x resolution non-negative scores; values[i, j] is cell
    (x index j, y index i)."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        n = self.grid.resolution
        if v.shape != (n, n):
            raise ValueError(f"values must be {n}x{n}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        if np.any(v < 0.0):
            raise ValueError("field values must be >= 0")
        object.__setattr__(self, "values", v)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def _component_log_scores(
    x: np.ndarray, y: np.ndarray, comp: MixtureComponent
) -> np.ndarray:
    """Vectorized log score of one component at cartesian points."""
    p = comp.params
    ax, ay = comp.anchor
    dx = x - ax
    dy = y - ay
    d = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx)
    # At the anchor the bearing is undefined; pin it to 0 so the score stays
    # finite and deterministic.
    phi = np.where(d == 0.0, 0.0, phi)
    zd = d - p.mu_d
    log_gauss = -0.5 * zd * zd / p.var_d - 0.5 * np.log(TWO_PI * p.var_d)
    log_vm = (
        p.kappa_phi * np.cos(phi - p.mu_phi)
        - math.log(TWO_PI)
        - log_bessel_i0(p.kappa_phi)
    )
    return log_gauss + log_vm


def polar_log_score(x: tuple[float, float], comp: MixtureComponent) -> float:
    """Log of the joint distance/bearing density of one component at x."""
    px, py = x
    if not (math.isfinite(px) and math.isfinite(py)):
        raise ValueError("point must be finite")
    out = _component_log_scores(np.asarray(px, dtype=float), np.asarray(py), comp)
    return float(out)


def _mixture_values(x: np.ndarray, y: np.ndarray, mix: SpatialMixture) -> np.ndarray:
    w = mix.normalized_weights()
    total = np.zeros(np.broadcast(x, y).shape, dtype=float)
    for wj, comp in zip(w, mix.components):
        if wj == 0.0:
            continue
        total = total + wj * np.exp(_component_log_scores(x, y, comp))
    return total


def mixture_score(x: tuple[float, float], mix: SpatialMixture) -> float:
    """Weighted sum of component densities; weights normalized internally."""
    px, py = x
    out = _mixture_values(np.asarray(px, dtype=float), np.asarray(py, dtype=float), mix)
    return float(out)


def score_field(mix: SpatialMixture, grid: GridSpec) -> ScoreField:
    """Evaluate the mixture at every cell center."""
    xs, ys = grid.cell_centers()
    gx = xs[np.newaxis, :]
    gy = ys[:, np.newaxis]
    values = _mixture_values(gx, gy, mix)
    return ScoreField(grid=grid, values=values)


class ContradictionError(ValueError):
    """The product of expression fields has no support anywhere."""


def combine_score_fields(fields: list[ScoreField]) -> ScoreField:
    """Pointwise product of fields on the same grid, peak-normalized to 1.

    Raises ValueError if the grids differ or the product vanishes everywhere
    (mutually contradictory expressions).
    """
    if not fields:
        raise ValueError("need at least one field")
    grid = fields[0].grid
    product = np.ones_like(fields[0].values)
    for f in fields:
        if f.grid != grid:
            raise ValueError(f"grid mismatch: {f.grid} vs {grid}")
        product = product * f.values
    peak = product.max()
    if peak <= 0.0:
        raise ContradictionError("combined field is zero everywhere")
    return ScoreField(grid=grid, values=product / peak)


def grid_argmax(field: ScoreField) -> tuple[tuple[float, float], float]:
    """Center of the best cell and its score; ties go to the lowest
    row-major index."""
    values = field.values
    if values.max() <= 0.0:
        raise ValueError("cannot take argmax of an all-zero field")
    flat = int(np.argmax(values))
    n = field.grid.resolution
    i, j = divmod(flat, n)
    xs, ys = field.grid.cell_centers()
    return (float(xs[j]), float(ys[i])), float(values[i, j])


# ---------------------------------------------------------------------------
# Fitting and sampling
# ---------------------------------------------------------------------------


def _bessel_ratio(kappa: float) -> float:
    # A(kappa) = I1/I0, the mean resultant length of a von Mises sample.
    if kappa <= 0.0:
        return 0.0
    return bessel_i(1, kappa) / bessel_i(0, kappa)


def solve_kappa(r_bar: float, max_newton: int = 20) -> float:
    """Invert A(kappa) = r_bar.

    Starts from the rational approximation r(2 - r^2)/(1 - r^2) and refines
    with Newton steps using A'(k) = 1 - A(k)^2 - A(k)/k. Result clamped to
    [0, KAPPA_MAX].
    """
    if r_bar <= 0.0:
        return 0.0
    if r_bar >= 1.0:
        return KAPPA_MAX
    denom = 1.0 - r_bar * r_bar
    kappa = r_bar * (2.0 - r_bar * r_bar) / denom
    kappa = min(max(kappa, 0.0), KAPPA_MAX)
    for _ in range(max_newton):
        a = _bessel_ratio(kappa)
        if kappa > 0.0:
            deriv = 1.0 - a * a - a / kappa
        else:
            deriv = 0.5
        if deriv <= 0.0:
            break
        step = (a - r_bar) / deriv
        kappa = min(max(kappa - step, 0.0), KAPPA_MAX)
        if abs(step) < 1e-12:
            break
    return kappa


def fit_polar_mle(samples: list[tuple[float, float]]) -> PolarParams:
    """Maximum-likelihood polar parameters from (distance, angle) pairs.

    Distance: sample mean and unbiased variance (floored at VAR_MIN).
    Angle: circular mean, with concentration solved from the mean resultant
    length.
    """
    if len(samples) < 2:
        raise ValueError(f"need at least 2 samples, got {len(samples)}")
    d = np.array([s[0] for s in samples], dtype=float)
    phi = np.array([s[1] for s in samples], dtype=float)
    if np.any(d < 0.0):
        raise ValueError("distances must be >= 0")
    mu_d = float(d.mean())
    var_d = max(float(d.var(ddof=1)), VAR_MIN)
    sin_mean = float(np.sin(phi).mean())
    cos_mean = float(np.cos(phi).mean())
    mu_phi = math.atan2(sin_mean, cos_mean)
    r_bar = math.hypot(sin_mean, cos_mean)
    kappa = solve_kappa(r_bar)
    return PolarParams(mu_d=mu_d, var_d=var_d, mu_phi=mu_phi, kappa_phi=kappa)


def sample_polar(
    params: PolarParams, n: int, seed: int
) -> list[tuple[float, float]]:
    """Draw (distance, angle) pairs; deterministic for a given seed.

    Distances resample the Gaussian until non-negative; angles use the
    Best-Fisher rejection sampler.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    sigma = math.sqrt(params.var_d)
    out = []
    for _ in range(n):
        d = rng.normal(params.mu_d, sigma)
        while d < 0.0:
            d = rng.normal(params.mu_d, sigma)
        out.append((float(d), _sample_von_mises(rng, params.mu_phi, params.kappa_phi)))
    return out


def _sample_von_mises(rng: np.random.Generator, mu: float, kappa: float) -> float:
    if kappa < 1e-8:
        return float(rng.uniform(-math.pi, math.pi))
    # Best & Fisher wrapped-Cauchy envelope.
    a = 1.0 + math.sqrt(1.0 + 4.0 * kappa * kappa)
    b = (a - math.sqrt(2.0 * a)) / (2.0 * kappa)
    r = (1.0 + b * b) / (2.0 * b)
    while True:
        u1, u2, u3 = rng.uniform(0.0, 1.0, size=3)
        z = math.cos(math.pi * u1)
        f = (1.0 + r * z) / (r + z)
        c = kappa * (r - f)
        if c * (2.0 - c) - u2 > 0.0 or math.log(c / u2) + 1.0 - c >= 0.0:
            break
    phi = mu + math.copysign(math.acos(f), u3 - 0.5)
    return wrap_angle(phi)
