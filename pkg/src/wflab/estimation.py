"""Inference for the selection parameter s from an observed path.

For the Wright--Fisher drift the path log-likelihood in s (with θ known and
reference value s₀ = 0) is the quadratic

    ℓ(s) = A s - B s² / 2,    A = ΔX / 2 - M / 4,    B = Q / 4,

where ΔX = X_T - X_0, M = ∫ (θ₁(1-X) - θ₂X) dt and Q = ∫ X(1-X) dt.
Everything below is built on (A, B).
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ParameterError
from .model import WFParams, fisher_matrix, stationary_log_density
from .quadrature import DEFAULT_MAX_EVALS, _integrate_pieces, adaptive_rule
from .simulate import Observer, SamplePath, clamp_unit, riemann_functional


@dataclass(frozen=True)
class SufficientStats:
    A: float
    B: float
    delta_x: float
    mut_integral: float
    sel_integral: float

    @classmethod
    def from_integrals(cls, delta_x, mut_integral, sel_integral):
        return cls(A=0.5 * delta_x - 0.25 * mut_integral, B=0.25 * sel_integral,
                   delta_x=delta_x, mut_integral=mut_integral, sel_integral=sel_integral)


@dataclass(frozen=True)
class EstimationResult:
    estimate: float
    method: str
    stats: SufficientStats
    T: float

    def to_dict(self):
        return {"method": self.method, "estimate": self.estimate, "T": self.T, **asdict(self.stats)}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def sufficient_stats(path: SamplePath, theta1, theta2, rule="right") -> SufficientStats:
    delta_x = float(path.values[-1] - path.values[0])
    mut = riemann_functional(path, lambda x: theta1 * (1 - x) - theta2 * x, rule)
    sel = riemann_functional(path, lambda x: x * (1 - x), rule)
    if not sel > 0:
        raise ParameterError("degenerate-path", "∫X(1-X)dt vanishes; the likelihood is flat")
    return SufficientStats.from_integrals(delta_x, mut, sel)


def mle_riemann(path: SamplePath, theta1, theta2, rule="right") -> EstimationResult:
    """(ΔX - M) / Q, the Riemann-sum estimator in its published form."""
    st = sufficient_stats(path, theta1, theta2, rule)
    est = (st.delta_x - st.mut_integral) / st.sel_integral
    return EstimationResult(est, "mle_riemann", st, path.T)


def mle_score(path: SamplePath, theta1, theta2, rule="right") -> EstimationResult:
    """A / B = (2ΔX - M) / Q, the root of the score equation."""
    st = sufficient_stats(path, theta1, theta2, rule)
    return EstimationResult(st.A / st.B, "mle_score", st, path.T)


def _start_log_ratio(path, s_prime, s, theta1, theta2):
    if path.start_mode != "stationary":
        return 0.0
    x0 = path.values[0]
    return (stationary_log_density(WFParams(s_prime, theta1, theta2), x0)
            - stationary_log_density(WFParams(s, theta1, theta2), x0))


def log_likelihood_ratio_from_stats(stats: SufficientStats, s_prime, s):
    return stats.A * (s_prime - s) - 0.5 * stats.B * (s_prime ** 2 - s ** 2)


def log_likelihood_ratio(path: SamplePath, s_prime, s, theta1, theta2, rule="right"):
    """log dP_{s'}/dP_s on the observed path (initial law included for stationary starts)."""
    if s_prime == s:
        return 0.0
    st = sufficient_stats(path, theta1, theta2, rule)
    return log_likelihood_ratio_from_stats(st, s_prime, s) + _start_log_ratio(path, s_prime, s, theta1, theta2)


def _check_local(s, u, T, support):
    if support is not None:
        lo, hi = support
        if not lo < s + u / math.sqrt(T) < hi:
            raise ParameterError("local-parameter-out-of-range", f"s + u/sqrt(T) leaves the support for u={u}")


def likelihood_ratio_Z(path: SamplePath, s, u, theta1, theta2, support=None, rule="right"):
    """Z_{T,s}(u) = L(s + u/√T) / L(s)."""
    _check_local(s, u, path.T, support)
    if u == 0:
        return 1.0
    return math.exp(log_likelihood_ratio(path, s + u / math.sqrt(path.T), s, theta1, theta2, rule))


# ---------------------------------------------------------------------------
# Priors, losses and the Bayes estimator


@dataclass(frozen=True)
class Prior:
    density: Callable
    support: tuple
    A_maj: float = 1.0
    b_maj: float = 1.0

    def __post_init__(self):
        lo, hi = self.support
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ParameterError(message="prior support must be a bounded interval")

    @property
    def width(self):
        return self.support[1] - self.support[0]


def uniform_prior(lo, hi) -> Prior:
    c = 1.0 / (hi - lo)
    return Prior(lambda s: np.full(np.shape(s), c), (lo, hi), A_maj=max(c, 1e-300), b_maj=1.0)


@dataclass(frozen=True)
class Loss:
    fn: Callable
    A_maj: float = 1.0
    b_maj: float = 2.0
    name: str = "custom"


QUADRATIC_LOSS = Loss(lambda u: np.asarray(u, dtype=float) ** 2, 1.0, 2.0, "quadratic")
ABSOLUTE_LOSS = Loss(lambda u: np.abs(np.asarray(u, dtype=float)), 1.0, 1.0, "absolute")


@dataclass
class ValidationReport:
    flags: dict
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(self.flags.values())


def validate_loss(loss: Loss, H=10.0, gamma=0.5, grid=None) -> ValidationReport:
    """Grid checks of the loss-class conditions A1--A4."""
    u = np.linspace(-20.0, 20.0, 4001) if grid is None else np.asarray(grid, dtype=float)
    u = np.unique(np.concatenate([u, -u, [0.0]]))
    val = np.asarray(loss.fn(u), dtype=float)
    scale = max(1.0, float(np.max(np.abs(val))))
    mirrored = np.asarray(loss.fn(-u), dtype=float)
    zero = float(loss.fn(np.array([0.0]))[0])
    small = np.asarray(loss.fn(np.logspace(-4, -12, 9)), dtype=float)
    a1 = (bool(np.all(np.isfinite(val)))
          and bool(np.all(np.abs(val - mirrored) <= 1e-12 * scale))
          and bool(np.all(val >= 0))
          and zero == 0.0
          and bool(np.any(val > 0))
          and bool(np.all(np.abs(small) <= np.abs(small[0]) + 1e-300)) and abs(small[-1]) <= 1e-6 * scale)
    pos = u >= 0
    a2 = bool(np.all(np.diff(val[pos]) >= -1e-12 * scale))
    a3 = bool(np.all(np.abs(val) <= loss.A_maj * (1 + np.abs(u) ** loss.b_maj) * (1 + 1e-12)))
    outer = val[np.abs(u) > H]
    inner = val[np.abs(u) <= H ** gamma]
    gap = float(outer.min() - inner.max()) if outer.size and inner.size else math.nan
    a4 = bool(gap >= 0)
    return ValidationReport({"A1": a1, "A2": a2, "A3": a3, "A4": a4}, {"A4_gap": gap})


def validate_prior(prior: Prior, grid=None, continuity_tol=None) -> ValidationReport:
    """Nonnegativity, continuity, polynomial majorant and unit mass."""
    lo, hi = prior.support
    x = np.linspace(lo, hi, 2001) if grid is None else np.sort(np.asarray(grid, dtype=float))
    p = np.asarray(prior.density(x), dtype=float) * np.ones_like(x)
    finite = bool(np.all(np.isfinite(p)))
    nonneg = finite and bool(np.all(p >= 0))
    # Modulus of continuity: a jump shows up as a step that does not shrink
    # when the grid is refined.
    x2 = np.linspace(x[0], x[-1], 4 * (x.size - 1) + 1)
    p2 = np.asarray(prior.density(x2), dtype=float) * np.ones_like(x2)
    tol = continuity_tol if continuity_tol is not None else 0.5 * max(1.0, float(np.max(np.abs(p))))
    jump1 = float(np.max(np.abs(np.diff(p)))) if finite else math.inf
    jump2 = float(np.max(np.abs(np.diff(p2)))) if finite else math.inf
    continuous = finite and (jump2 <= 0.5 * jump1 + 1e-12 or jump2 <= 1e-9 * max(1.0, jump1)) and jump2 < tol
    majorant = finite and bool(np.all(p <= prior.A_maj * (1 + np.abs(x) ** prior.b_maj) * (1 + 1e-12)))
    mass = math.nan
    if nonneg:
        nodes, w = adaptive_rule(lambda s: np.asarray(prior.density(s), dtype=float) * np.ones_like(s),
                                 lo, hi, rel_tol=1e-11)
        mass = float(w @ (np.asarray(prior.density(nodes), dtype=float) * np.ones_like(nodes)))
    unit = bool(abs(mass - 1.0) <= 1e-8)
    flags = {"nonnegative": nonneg, "continuous": bool(continuous), "majorant": majorant, "unit_mass": unit}
    return ValidationReport(flags, {"mass": mass})


class _Posterior:
    """Posterior p(s) exp(A s - B s²/2) on S, with a fixed quadrature rule."""

    def __init__(self, stats: SufficientStats, prior: Prior):
        lo, hi = prior.support
        A, B = stats.A, stats.B
        if B < 0:
            raise ParameterError(message="B must be nonnegative")
        s_peak = min(max(A / B, lo), hi) if B > 0 else (hi if A > 0 else lo)
        self.shift = A * s_peak - 0.5 * B * s_peak ** 2
        self.A, self.B, self.prior = A, B, prior

        def unnorm(s):
            s = np.asarray(s, dtype=float)
            p = np.asarray(prior.density(s), dtype=float) * np.ones_like(s)
            return p * np.exp(A * s - 0.5 * B * s * s - self.shift)

        self.unnorm = unnorm
        self.nodes, self.weights, self.edges = adaptive_rule(
            unnorm, lo, hi, n_initial=128, rel_tol=1e-12, abs_tol=0.0, return_edges=True)
        self.values = unnorm(self.nodes)
        self.mass = float(self.weights @ self.values)
        if not (math.isfinite(self.mass) and self.mass > 0):
            raise ParameterError("posterior-degenerate", "prior vanishes wherever the likelihood is non-negligible")
        self.w = self.weights * self.values / self.mass

    def density(self, s):
        return self.unnorm(s) / self.mass

    def mean(self):
        return float(self.w @ self.nodes)

    def expected_loss(self, v, loss, T):
        return float(self.w @ np.asarray(loss.fn(math.sqrt(T) * (v - self.nodes)), dtype=float))

    def expected_loss_split(self, v, loss, T):
        """Adaptive version with a breakpoint at v, where the loss may have a kink."""
        edges = np.union1d(self.edges, [v]) if self.edges[0] < v < self.edges[-1] else self.edges
        rt = math.sqrt(T)
        vals, _, _ = _integrate_pieces(
            lambda s: np.asarray(loss.fn(rt * (v - s)), dtype=float) * self.unnorm(s),
            edges, 1e-12, 0.0, DEFAULT_MAX_EVALS)
        return float(vals.sum()) / self.mass


def posterior_density(stats: SufficientStats, prior: Prior, grid_size=513):
    """Normalized posterior density on a uniform grid over the closure of S."""
    post = _Posterior(stats, prior)
    grid = np.linspace(prior.support[0], prior.support[1], int(grid_size))
    return grid, post.density(grid)


def posterior_mean(stats: SufficientStats, prior: Prior):
    return _Posterior(stats, prior).mean()


def bayes_estimator(stats: SufficientStats, prior: Prior, loss: Loss, T, coarse=512,
                    validate=True) -> EstimationResult:
    """argmin_v ∫ loss(√T (v - s)) π(s | path) ds.

    A coarse grid (fixed quadrature rule) locates the basin, then bounded
    Brent (golden section with parabolic steps) refines to 1e-8 of the
    support width using quadrature split at v, so kinked losses stay exact.
    """
    if validate:
        lv = validate_loss(loss)
        if not lv.passed:
            raise ParameterError("invalid-loss", f"loss fails conditions {lv.flags}")
        pv = validate_prior(prior)
        if not pv.passed:
            raise ParameterError("invalid-prior", f"prior fails conditions {pv.flags}")
    post = _Posterior(stats, prior)
    lo, hi = prior.support
    grid = np.linspace(lo, hi, coarse)
    risk = np.array([post.expected_loss(v, loss, T) for v in grid])
    i = int(np.argmin(risk))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, coarse - 1)]
    res = minimize_scalar(lambda v: post.expected_loss_split(v, loss, T), bounds=(a, b), method="bounded",
                          options={"xatol": 1e-8 * (hi - lo)})
    best = float(res.x) if res.fun <= post.expected_loss_split(grid[i], loss, T) else float(grid[i])
    return EstimationResult(best, "bayes", stats, T)


# ---------------------------------------------------------------------------
# LAN statistics


def _lan_parts(x_prev, x_next, params: WFParams, dt):
    """Score increments (3, n) and information integrand entries at x_prev."""
    xc = clamp_unit(x_prev, dt)
    resid = (x_next - x_prev) - 0.5 * (params.s * x_prev * (1 - x_prev)
                                       - params.theta2 * x_prev + params.theta1 * (1 - x_prev)) * dt
    score = np.stack([0.5 * resid, resid / (2 * xc), -resid / (2 * (1 - xc))])
    var = x_prev * (1 - x_prev)
    info = 0.25 * np.stack([var, 1 - x_prev, -x_prev, (1 - xc) / xc, -np.ones_like(x_prev), xc / (1 - xc)])
    return score, info


def _info_matrix(entries):
    e = entries
    return np.array([[e[0], e[1], e[2]], [e[1], e[3], e[4]], [e[2], e[4], e[5]]])


def lan_statistic(path: SamplePath, params: WFParams):
    """Δ_T = T^{-1/2} Σ μ̇/σ² (X_{i-1}) (ΔX_i - μ(X_{i-1}) dt).

    Mutation components are NaN when θ < 1 (outside the LAN regime).
    """
    x = path.values
    score, _ = _lan_parts(x[:-1], x[1:], params, path.dt)
    delta = score.sum(axis=1) / math.sqrt(path.T)
    if not params.lan_regime:
        delta[1:] = np.nan
    return delta


def lan_remainder(path: SamplePath, params: WFParams, u):
    """r_T(u) = log ν-ratio + ½⟨I u, u⟩ - (1/2T) ∫ ⟨u, μ̇⟩²/σ² dt."""
    u = np.asarray(u, dtype=float)
    if u.shape != (3,):
        raise ParameterError(message="u must be a 3-vector")
    if np.any(u[1:] != 0) and not params.lan_regime:
        raise ParameterError("lan-regime-required", "mutation directions need theta1, theta2 >= 1")
    if not np.any(u):
        return 0.0
    x = path.values
    _, info = _lan_parts(x[:-1], x[1:], params, path.dt)
    emp = _info_matrix(info.sum(axis=1) * path.dt / path.T)
    fisher = fisher_matrix(params).matrix
    active = u != 0
    sub_f = fisher[np.ix_(active, active)]
    sub_e = emp[np.ix_(active, active)]
    ua = u[active]
    r = 0.5 * ua @ sub_f @ ua - 0.5 * ua @ sub_e @ ua
    if path.start_mode == "stationary":
        shifted = WFParams(*(np.array(params.as_tuple()) + u / math.sqrt(path.T)))
        r += stationary_log_density(shifted, x[0]) - stationary_log_density(params, x[0])
    return float(r)


# ---------------------------------------------------------------------------
# Streaming accumulation for batch experiments


class StatsAccumulator(Observer):
    """Running sums giving (A, B) and optionally LAN quantities per replicate."""

    def __init__(self, params: WFParams, dt, lan=False):
        self.params, self.dt, self.lan = params, dt, lan

    def start(self, x0):
        self.x0 = x0.copy()
        self.sum_x = x0.copy()
        self.sum_sel = x0 * (1 - x0)
        self.last = x0.copy()
        self.n = 0
        self.snapshots = {}
        if self.lan:
            self.score = np.zeros((3, x0.size))
            self.info = np.zeros((6, x0.size))

    def update(self, block):
        body = block[1:]
        self.sum_x = self.sum_x + body.sum(axis=0)
        self.sum_sel = self.sum_sel + (body * (1 - body)).sum(axis=0)
        self.last = block[-1].copy()
        self.n += body.shape[0]
        if self.lan:
            score, info = _lan_parts(block[:-1], block[1:], self.params, self.dt)
            self.score += score.sum(axis=1)
            self.info += info.sum(axis=1)

    def checkpoint(self, step):
        snap = copy.copy(self)
        snap.snapshots = {}
        if self.lan:
            snap.score, snap.info = self.score.copy(), self.info.copy()
        self.snapshots[step] = snap

    def integrals(self, rule="right"):
        """(delta_x, mut_integral, sel_integral) arrays."""
        end = self.x0 if rule == "right" else self.last
        sx = self.sum_x - end
        ss = self.sum_sel - end * (1 - end)
        t1, t2 = self.params.theta1, self.params.theta2
        mut = (t1 * self.n - (t1 + t2) * sx) * self.dt
        return self.last - self.x0, mut, ss * self.dt

    def stats_arrays(self, rule="right"):
        dx, mut, sel = self.integrals(rule)
        return {"delta_x": dx, "mut_integral": mut, "sel_integral": sel,
                "A": 0.5 * dx - 0.25 * mut, "B": 0.25 * sel}

    def stats(self, i, rule="right") -> SufficientStats:
        d = self.stats_arrays(rule)
        return SufficientStats(**{k: float(v[i]) for k, v in d.items()})

    def lan_delta(self, T):
        return self.score / math.sqrt(T)

    def empirical_info(self, T):
        """(6, R) entries of (1/T) ∫ μ̇ μ̇ᵀ / σ² dt."""
        return self.info * self.dt / T


def estimates_from_arrays(method, stats):
    """Vectorized mle_score / mle_riemann from ``stats_arrays`` output;
    NaN marks degenerate paths."""
    sel = stats["sel_integral"]
    with np.errstate(divide="ignore", invalid="ignore"):
        if method == "mle_score":
            est = stats["A"] / stats["B"]
        elif method == "mle_riemann":
            est = (stats["delta_x"] - stats["mut_integral"]) / sel
        else:
            raise ParameterError(message=f"unknown vectorized method {method!r}")
    return np.where(sel > 0, est, np.nan)
