"""The two-allele Wright--Fisher diffusion with selection and mutation.

    dX = ½(s X(1-X) - θ₂ X + θ₁ (1-X)) dt + sqrt(X(1-X)) dW,   X in [0, 1].
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass

import numpy as np

from .diffusion import DiffusionSpec, Interval
from .errors import DivergenceError, ParameterError
from .quadrature import DEFAULT_REL_TOL, adaptive_quad


class BoundaryType(str, enum.Enum):
    REGULAR = "regular"
    ENTRANCE = "entrance"


@dataclass(frozen=True)
class WFParams:
    s: float
    theta1: float
    theta2: float

    def __post_init__(self):
        for name in ("s", "theta1", "theta2"):
            v = getattr(self, name)
            if not isinstance(v, (int, float, np.floating, np.integer)) or not math.isfinite(v):
                raise ParameterError("invalid-parameters", f"{name} must be a finite real")
        if self.theta1 <= 0:
            raise ParameterError("invalid-parameters", "theta1 must be positive")
        if self.theta2 <= 0:
            raise ParameterError("invalid-parameters", "theta2 must be positive")
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "theta1", float(self.theta1))
        object.__setattr__(self, "theta2", float(self.theta2))

    @property
    def lan_regime(self) -> bool:
        return self.theta1 >= 1 and self.theta2 >= 1

    @property
    def finite_information(self) -> bool:
        """Strict version of ``lan_regime``: mutation information is finite."""
        return self.theta1 > 1 and self.theta2 > 1

    def with_s(self, s):
        return WFParams(s, self.theta1, self.theta2)

    def reflected(self):
        """Parameters of 1 - X."""
        return WFParams(-self.s, self.theta2, self.theta1)

    def as_tuple(self):
        return (self.s, self.theta1, self.theta2)


@dataclass(frozen=True)
class BoundaryClass:
    at_zero: BoundaryType
    at_one: BoundaryType

    def as_tuple(self):
        return (self.at_zero.value, self.at_one.value)


@dataclass(frozen=True)
class FisherMatrix:
    """Fisher information in (s, θ₁, θ₂) order; divergent entries are ``inf``."""

    matrix: np.ndarray

    @property
    def selection(self) -> float:
        return float(self.matrix[0, 0])

    @property
    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.matrix)))

    def to_json(self):
        return [[float(v) if math.isfinite(v) else "infinite" for v in row] for row in self.matrix]


def _check_state(x):
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any((x < 0) | (x > 1)):
        raise ParameterError("state-out-of-range", "state must lie in [0, 1]")
    return x


def _unwrap(a):
    return float(a) if np.ndim(a) == 0 else a


def wf_drift(params, x):
    x = np.asarray(x, dtype=float)
    return 0.5 * (params.s * x * (1 - x) - params.theta2 * x + params.theta1 * (1 - x))


def wf_diffusion_sq(x):
    x = np.asarray(x, dtype=float)
    return x * (1 - x)


def wf_coefficients(params: WFParams, x):
    """Drift and squared diffusion coefficient at ``x`` in [0, 1]."""
    x = _check_state(x)
    return _unwrap(wf_drift(params, x)), _unwrap(wf_diffusion_sq(x))


def _log_scale_integrand(params, x):
    return params.s + params.theta1 / x - params.theta2 / (1 - x)


def _log_scale_antiderivative(params, x):
    x = np.asarray(x, dtype=float)
    return params.s * x + params.theta1 * np.log(x) + params.theta2 * np.log1p(-x)


def classify_boundaries(params: WFParams) -> BoundaryClass:
    """Regular below θ = 1, entrance at θ >= 1 (mirrored at 1 with θ₂)."""
    if not isinstance(params, WFParams):
        params = WFParams(*params)

    def kind(theta):
        return BoundaryType.ENTRANCE if theta >= 1 else BoundaryType.REGULAR

    return BoundaryClass(kind(params.theta1), kind(params.theta2))


def _boundary_strings(params):
    return classify_boundaries(params).as_tuple()


WF_SPEC = DiffusionSpec(
    interval=Interval(0.0, 1.0),
    drift=wf_drift,
    diffusion_sq=wf_diffusion_sq,
    log_scale_integrand=_log_scale_integrand,
    log_scale_antiderivative=_log_scale_antiderivative,
    boundary_classes=_boundary_strings,
)


def _log_kernel(params, x):
    x = np.asarray(x, dtype=float)
    return params.s * x + (params.theta1 - 1) * np.log(x) + (params.theta2 - 1) * np.log1p(-x)


def _log_kernel_reflected(params, y):
    # Log kernel at x = 1 - y, written in y so the x = 1 end keeps full precision.
    y = np.asarray(y, dtype=float)
    return params.s * (1 - y) + (params.theta1 - 1) * np.log1p(-y) + (params.theta2 - 1) * np.log(y)


def _kernel_integral(params, h, offset, rel_tol, h_reflected=None):
    """∫ h(x) exp(log kernel - offset) over (0, 1), split at 1/2.

    The upper half is integrated in y = 1 - x: near x = 1 the floats are too
    coarse to resolve an integrable singularity.  ``h_reflected(y)`` may give
    h(1 - y) directly when h itself is singular at 1.
    """
    if h_reflected is None:
        def h_reflected(y):
            return h(1 - y)
    left = adaptive_quad(
        lambda x: h(x) * np.exp(_log_kernel(params, x) - offset), 0.0, 0.5, rel_tol=rel_tol)
    right = adaptive_quad(
        lambda y: h_reflected(y) * np.exp(_log_kernel_reflected(params, y) - offset), 0.0, 0.5,
        rel_tol=rel_tol)
    return left.value + right.value


@functools.lru_cache(maxsize=512)
def _log_normalizer(params, rel_tol):
    # Factor out the maximum of e^{sx} so the integrand stays O(1).
    shift = max(params.s, 0.0)
    return math.log(_kernel_integral(params, np.ones_like, shift, rel_tol)) + shift


def normalizer(params: WFParams, rel_tol=DEFAULT_REL_TOL) -> float:
    """G = ∫ e^{sx} x^{θ₁-1} (1-x)^{θ₂-1} dx (cached)."""
    return math.exp(_log_normalizer(params, rel_tol))


def stationary_density(params: WFParams, x):
    x = np.asarray(x, dtype=float)
    if np.any((x <= 0) | (x >= 1)):
        raise ParameterError("state-out-of-range", "x must lie in (0, 1)")
    return _unwrap(np.exp(_log_kernel(params, x) - _log_normalizer(params, DEFAULT_REL_TOL)))


def stationary_log_density(params: WFParams, x):
    x = np.asarray(x, dtype=float)
    return _unwrap(_log_kernel(params, x) - _log_normalizer(params, DEFAULT_REL_TOL))


def stationary_expectation(params: WFParams, h, rel_tol=DEFAULT_REL_TOL, h_reflected=None) -> float:
    """E[h(ξ)] for ξ ~ stationary law; ``h_reflected(y) = h(1 - y)`` is optional."""
    log_g = _log_normalizer(params, DEFAULT_REL_TOL)

    def hh(x):
        return np.asarray(h(x), dtype=float)

    try:
        hr = None if h_reflected is None else (lambda y: np.asarray(h_reflected(y), dtype=float))
        return _kernel_integral(params, hh, log_g, rel_tol, hr)
    except DivergenceError as exc:
        raise DivergenceError("moment-infinite", "stationary expectation is infinite") from exc


def stationary_cdf(params: WFParams, x):
    from .quadrature import cumulative_quad

    x = np.atleast_1d(np.asarray(x, dtype=float))
    inside = (x > 0) & (x < 1)
    out = np.where(x >= 1, 1.0, 0.0)
    if np.any(inside):
        log_g = _log_normalizer(params, DEFAULT_REL_TOL)
        vals = cumulative_quad(lambda y: np.exp(_log_kernel(params, y) - log_g), 0.0, x[inside])
        out[inside] = np.clip(vals, 0.0, 1.0)
    return out


def fisher_matrix(params: WFParams) -> FisherMatrix:
    """¼ E[μ̇ μ̇ᵀ / σ²] with μ̇ = ½ (x(1-x), 1-x, -x)."""
    E = functools.partial(stationary_expectation, params)
    m_xx = E(lambda x: x * (1 - x))
    m_x = E(lambda x: x)
    i11 = 0.25 * E(lambda x: (1 - x) / x) if params.theta1 > 1 else math.inf
    i22 = 0.25 * E(lambda x: x / (1 - x), h_reflected=lambda y: (1 - y) / y) if params.theta2 > 1 else math.inf
    mat = np.array([
        [0.25 * m_xx, 0.25 * (1 - m_x), -0.25 * m_x],
        [0.25 * (1 - m_x), i11, -0.25],
        [-0.25 * m_x, -0.25, i22],
    ])
    return FisherMatrix(mat)


def selection_information(params: WFParams) -> float:
    return 0.25 * stationary_expectation(params, lambda x: x * (1 - x))


# ---------------------------------------------------------------------------
# Exact stationary sampling


def _gamma(rng, shape, n):
    """Marsaglia--Tsang squeeze method; shapes below one use the U^{1/a} boost."""
    if shape < 1:
        g = _gamma(rng, shape + 1.0, n)
        return g * rng.random(n) ** (1.0 / shape)
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(n)
    pending = np.arange(n)
    while pending.size:
        m = pending.size
        z = rng.standard_normal(m)
        u = rng.random(m)
        v = (1.0 + c * z) ** 3
        pos = v > 0
        logv = np.log(np.where(pos, v, 1.0))
        with np.errstate(divide="ignore"):
            logu = np.log(u)
        accept = pos & ((u < 1.0 - 0.0331 * z ** 4) | (logu < 0.5 * z * z + d * (1.0 - v + logv)))
        out[pending[accept]] = d * v[accept]
        pending = pending[~accept]
    return out


def _beta(rng, a, b, n):
    x = _gamma(rng, a, n)
    y = _gamma(rng, b, n)
    return x / (x + y)


def stationary_rejection_trials(params: WFParams, rng, n):
    """``n`` Beta(θ₁, θ₂) proposals and their accept flags under the e^{sx} tilt."""
    prop = _beta(rng, params.theta1, params.theta2, n)
    accept = rng.random(n) < np.exp(params.s * prop - max(params.s, 0.0))
    return prop, accept


def sample_stationary(params: WFParams, rng, size=None):
    """Exact draws from the stationary law by Beta proposal and rejection."""
    if not isinstance(params, WFParams):
        params = WFParams(*params)
    n = 1 if size is None else int(size)
    out = np.empty(n)
    filled = 0
    # e^{-|s|} bounds the acceptance rate from below.
    rate = math.exp(-abs(params.s))
    while filled < n:
        need = n - filled
        batch = max(16, int(need / rate * 1.1) + 1)
        prop, accept = stationary_rejection_trials(params, rng, batch)
        got = prop[accept][:need]
        out[filled:filled + got.size] = got
        filled += got.size
    return float(out[0]) if size is None else out
