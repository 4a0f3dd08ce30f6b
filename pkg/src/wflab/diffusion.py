"""Analytics for a scalar diffusion dY = mu(params, Y) dt + sigma(Y) dW on [l, r].

Everything is expressed through the log-scale function

    Lambda(x) = ∫_{x_ref}^x 2 mu / sigma^2,

with scale density exp(-Lambda) and speed density (2 / sigma^2) exp(Lambda).
The reference point ``x_ref`` (the interval midpoint) is arbitrary and cancels
in every normalized quantity.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .errors import DivergenceError, NumericalError, ParameterError
from .quadrature import (
    DEFAULT_ABS_TOL,
    DEFAULT_REL_TOL,
    GradedPanels,
    adaptive_quad,
    cumulative_quad,
)

ENTRANCE = "entrance"
REGULAR = "regular"


@dataclass(frozen=True)
class Interval:
    l: float
    r: float

    def __post_init__(self):
        if not (math.isfinite(self.l) and math.isfinite(self.r)):
            raise ParameterError(message="interval endpoints must be finite")
        if not self.l < self.r:
            raise ParameterError(message=f"need l < r, got [{self.l}, {self.r}]")

    @property
    def midpoint(self):
        return 0.5 * (self.l + self.r)

    def contains_open(self, x):
        return self.l < x < self.r


@dataclass(frozen=True)
class DiffusionSpec:
    """Coefficients of a scalar diffusion on a bounded interval.

    ``drift(params, x)`` and ``diffusion_sq(x)`` must accept numpy arrays.
    ``log_scale_integrand(params, x)`` is 2 mu / sigma^2; when omitted it is
    formed from the coefficients.  ``log_scale_antiderivative(params, x)`` is an
    optional closed-form antiderivative of it (any additive constant); without
    it Lambda is computed by quadrature from ``x_ref``.
    ``boundary_classes(params)`` optionally returns the (left, right) boundary
    types as ``"regular"`` / ``"entrance"``.
    """

    interval: Interval
    drift: Callable[[Any, np.ndarray], np.ndarray]
    diffusion_sq: Callable[[np.ndarray], np.ndarray]
    log_scale_integrand: Optional[Callable[[Any, np.ndarray], np.ndarray]] = None
    log_scale_antiderivative: Optional[Callable[[Any, np.ndarray], np.ndarray]] = None
    boundary_classes: Optional[Callable[[Any], tuple]] = None
    x_ref: Optional[float] = field(default=None)

    @property
    def reference_point(self):
        return self.interval.midpoint if self.x_ref is None else self.x_ref

    def scale_integrand(self, params, x):
        x = np.asarray(x, dtype=float)
        if self.log_scale_integrand is not None:
            return np.asarray(self.log_scale_integrand(params, x), dtype=float)
        return 2.0 * np.asarray(self.drift(params, x)) / np.asarray(self.diffusion_sq(x))

    def log_scale(self, params, x, rel_tol=DEFAULT_REL_TOL):
        """Lambda(x) relative to the reference point."""
        x = np.asarray(x, dtype=float)
        x0 = self.reference_point
        if self.log_scale_antiderivative is not None:
            anti = self.log_scale_antiderivative
            return np.asarray(anti(params, x), dtype=float) - float(anti(params, np.asarray(x0)))
        return cumulative_quad(lambda y: self.scale_integrand(params, y), x0, x,
                               rel_tol=rel_tol, abs_tol=DEFAULT_ABS_TOL)

    def log_speed(self, params, x, rel_tol=DEFAULT_REL_TOL):
        x = np.asarray(x, dtype=float)
        return math.log(2.0) - np.log(self.diffusion_sq(x)) + self.log_scale(params, x, rel_tol)

    def scale_density(self, params, x, rel_tol=DEFAULT_REL_TOL):
        return np.exp(-self.log_scale(params, x, rel_tol))

    def speed_density(self, params, x, rel_tol=DEFAULT_REL_TOL):
        return np.exp(self.log_speed(params, x, rel_tol))


@dataclass
class ErgodicityReport:
    grid: list
    kappa_l_min: float
    kappa_r_min: float
    # (Unbounded1, Unbounded2, Unbounded3) suprema; None when not evaluated,
    # math.inf when the condition diverges at some grid point.
    unbounded_condition_suprema: Optional[tuple] = None
    passed: bool = False

    def __post_init__(self):
        self.passed = self._compute_pass()

    def _compute_pass(self):
        ok = self.kappa_l_min > 0 and self.kappa_r_min > 0
        if self.unbounded_condition_suprema is not None:
            ok = ok and all(math.isfinite(v) for v in self.unbounded_condition_suprema)
        return bool(ok)

    @property
    def condition_flags(self):
        if self.unbounded_condition_suprema is None:
            return None
        return tuple(math.isfinite(v) for v in self.unbounded_condition_suprema)

    def to_dict(self):
        def enc(v):
            return v if math.isfinite(v) else "infinite"

        grid = [list(p.as_tuple()) if hasattr(p, "as_tuple") else list(p) for p in self.grid]
        sup = self.unbounded_condition_suprema
        return {
            "grid": grid,
            "kappa_l_min": enc(self.kappa_l_min),
            "kappa_r_min": enc(self.kappa_r_min),
            "unbounded_condition_suprema": (
                "not-evaluated" if sup is None else [enc(v) for v in sup]
            ),
            "pass": self.passed,
        }


# ---------------------------------------------------------------------------
# Invariant density


@functools.lru_cache(maxsize=256)
def _normalizer(spec, params, rel_tol):
    iv = spec.interval
    try:
        res = adaptive_quad(lambda x: spec.speed_density(params, x, rel_tol * 10),
                            iv.l, iv.r, rel_tol=rel_tol)
    except DivergenceError as exc:
        raise DivergenceError("not-positive-recurrent", "speed measure has infinite mass") from exc
    if not math.isfinite(res.value) or res.value <= 0:
        raise DivergenceError("not-positive-recurrent", "speed measure has infinite mass")
    return res.value


def speed_normalizer(spec, params, rel_tol=DEFAULT_REL_TOL):
    """G = ∫_l^r (2 / sigma^2) exp(Lambda), with Lambda(x_ref) = 0."""
    return _normalizer(spec, params, rel_tol)


def invariant_density(spec, params, x, rel_tol=DEFAULT_REL_TOL):
    """Stationary density (2 / sigma^2(x)) exp(Lambda(x)) / G."""
    x_arr = np.asarray(x, dtype=float)
    iv = spec.interval
    if np.any((x_arr <= iv.l) | (x_arr >= iv.r)):
        raise ParameterError("state-out-of-range", f"x must lie in the open interval ({iv.l}, {iv.r})")
    g = speed_normalizer(spec, params, rel_tol)
    out = np.exp(spec.log_speed(params, x_arr) - math.log(g))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Kappa integrals


def _check_inner(spec, a, b):
    iv = spec.interval
    if not (iv.l <= a < b <= iv.r):
        raise ParameterError(message=f"need l <= a < b <= r, got a={a}, b={b}")


def _kappa(spec, params, a, b, left, rel_tol):
    _check_inner(spec, a, b)
    iv = spec.interval
    inner_tol = rel_tol * 10
    end = iv.l if left else iv.r

    def outer(xi):
        # ∫_l^xi speed (left) or ∫_xi^r speed (right), for a batch of xi.
        inner = cumulative_quad(lambda y: spec.speed_density(params, y, inner_tol),
                                end, xi, rel_tol=inner_tol)
        if not left:
            inner = -inner
        return spec.scale_density(params, xi, inner_tol) * inner

    try:
        return adaptive_quad(outer, a, b, rel_tol=rel_tol).value
    except DivergenceError as exc:
        raise DivergenceError("boundary-not-accessible-integrable",
                              "speed measure is not integrable at the boundary") from exc


def kappa_l(spec, params, a, b, rel_tol=DEFAULT_REL_TOL):
    """∫_a^b s(xi) ∫_l^xi m(eta) d eta d xi by nested adaptive quadrature.

    ``a`` may equal ``l``; ``kappa_l(spec, p, x, b)`` is also E_x[T_b] for x < b.
    """
    return _kappa(spec, params, a, b, True, rel_tol)


def kappa_r(spec, params, a, b, rel_tol=DEFAULT_REL_TOL):
    """∫_a^b s(xi) ∫_xi^r m(eta) d eta d xi; equals E_b[T_a] for a < b."""
    return _kappa(spec, params, a, b, False, rel_tol)


# ---------------------------------------------------------------------------
# Hitting-time moments


def _hitting_profiles(spec, params, x, b, q, h, grid_kwargs=None):
    """Evaluate U_1..U_q on a graded grid between the boundary and ``b``.

    Returns (grid, [U_n at nodes], [U_n(x)]).  The grid spans (l, b) when
    x < b and (b, r) otherwise; ``x`` is a panel edge.
    """
    iv = spec.interval
    left = x < b
    kwargs = dict(grid_kwargs or {})
    if left:
        grid = GradedPanels(iv.l, b, breakpoints=[x], grade_lo=True, grade_hi=False, **kwargs)
    else:
        grid = GradedPanels(b, iv.r, breakpoints=[x], grade_lo=False, grade_hi=True, **kwargs)
    nodes = grid.nodes
    log_scale = spec.log_scale(params, nodes)
    log_speed = math.log(2.0) - np.log(spec.diffusion_sq(nodes)) + log_scale
    weight = np.exp(log_speed)
    if h is not None:
        weight = weight * np.asarray(h(nodes), dtype=float)
    scale = np.exp(-log_scale)
    ix = grid.edge_index(x)
    u_prev = np.ones_like(nodes)
    profiles, at_x = [], []
    for n in range(1, q + 1):
        try:
            inner, _ = grid.cumulative(weight * u_prev, from_lo=left)
        except DivergenceError as exc:
            raise DivergenceError("moment-infinite", "hitting-time functional has infinite moment") from exc
        outer_nodes, outer_edges = grid.cumulative(scale * inner, from_lo=not left)
        u_n = n * outer_nodes
        profiles.append(u_n)
        at_x.append(n * outer_edges[ix])
        u_prev = u_n
    if not all(math.isfinite(v) for v in at_x):
        raise DivergenceError("moment-infinite", "hitting-time functional has infinite moment")
    return grid, profiles, at_x


def hitting_moment(spec, params, x, b, q, h=None, grid_kwargs=None):
    """E_x[(∫_0^{T_b} h(Y_t) dt)^q] via the backward-equation recursion.

    ``h=None`` means h = 1, i.e. plain moments of the hitting time T_b.  The
    recursion U_n = n ∫∫ s m h U_{n-1} is evaluated on one graded
    Gauss--Legendre grid so every level reuses the same nodes.
    """
    if q < 0 or int(q) != q:
        raise ParameterError(message="q must be a nonnegative integer")
    if q == 0:
        return 1.0
    iv = spec.interval
    if not (iv.contains_open(x) and iv.contains_open(b)):
        raise ParameterError("state-out-of-range", "x and b must lie inside the interval")
    if x == b:
        return 0.0
    _, _, at_x = _hitting_profiles(spec, params, x, b, int(q), h, grid_kwargs)
    return float(at_x[-1])


def regeneration_rate(spec, params, a, b):
    """Long-run number of completed a -> b -> a cycles per unit time."""
    if a >= b:
        raise ParameterError("degenerate-cycle", "need a < b for a regeneration cycle")
    cycle = hitting_moment(spec, params, a, b, 1) + hitting_moment(spec, params, b, a, 1)
    return 1.0 / cycle


# ---------------------------------------------------------------------------
# Uniform-ergodicity checks


def check_uniform_ergodicity(spec, param_grid: Sequence, a, b, rel_tol=1e-8):
    """Evaluate kappa_l(a, b) and kappa_r(a, b) over a finite parameter grid."""
    grid = list(param_grid)
    if not grid:
        raise ParameterError("empty-parameter-grid", "parameter grid is empty")
    kl = min(kappa_l(spec, p, a, b, rel_tol) for p in grid)
    kr = min(kappa_r(spec, p, a, b, rel_tol) for p in grid)
    return ErgodicityReport(grid=grid, kappa_l_min=kl, kappa_r_min=kr)


def _finite_or_inf(fn):
    try:
        v = fn()
    except (DivergenceError, NumericalError):
        return math.inf
    return v if math.isfinite(v) else math.inf


def check_unbounded_conditions(spec, params_grid: Sequence, h, b, x, nu="stationary"):
    """Suprema over the grid of the three integrals that extend uniform
    ergodicity to a function ``h`` unbounded at the boundaries.

    Conditions (for x < b):

    1. ∫_x^b s ∫_l^xi m h                      = E_x[∫_0^{T_b} h]
    2. ∫_x^b s ∫_l^xi m h E_eta[∫_0^{T_b} h]   = E_x[(∫_0^{T_b} h)^2] / 2
    3. ∫ E_y[∫_0^{T_b} h] nu(dy)

    ``nu`` is ``"stationary"`` or a starting point.  A divergent condition is
    reported as ``math.inf`` (failed), not raised.
    """
    grid = list(params_grid)
    if not grid:
        raise ParameterError("empty-parameter-grid", "parameter grid is empty")
    if not x < b:
        raise ParameterError(message="conditions are stated for x < b")
    if spec.boundary_classes is not None:
        for p in grid:
            if tuple(spec.boundary_classes(p)) != (ENTRANCE, ENTRANCE):
                raise ParameterError(
                    "boundaries-not-entrance",
                    f"both boundaries must be entrance at every grid point (failed at {p})",
                )
    iv = spec.interval
    sups = [0.0, 0.0, 0.0]
    for p in grid:
        c1 = _finite_or_inf(lambda: hitting_moment(spec, p, x, b, 1, h))
        c2 = _finite_or_inf(lambda: 0.5 * hitting_moment(spec, p, x, b, 2, h))
        if nu == "stationary":
            def stationary_part():
                total = 0.0
                for lo_side in (True, False):
                    start = 0.5 * (iv.l + b) if lo_side else 0.5 * (b + iv.r)
                    grid_, prof, _ = _hitting_profiles(spec, p, start, b, 1, h)
                    dens = invariant_density(spec, p, grid_.nodes)
                    total += grid_.integral(prof[0] * dens)
                return total

            c3 = _finite_or_inf(stationary_part)
        else:
            x0 = float(nu)
            c3 = _finite_or_inf(lambda: hitting_moment(spec, p, x0, b, 1, h))
        for i, c in enumerate((c1, c2, c3)):
            sups[i] = max(sups[i], c)
    lo_pt, hi_pt = x, b
    kl = min(_finite_or_inf(lambda: kappa_l(spec, p, lo_pt, hi_pt, 1e-8)) for p in grid)
    kr = min(_finite_or_inf(lambda: kappa_r(spec, p, lo_pt, hi_pt, 1e-8)) for p in grid)
    return ErgodicityReport(grid=grid, kappa_l_min=kl, kappa_r_min=kr,
                            unbounded_condition_suprema=tuple(sups))
