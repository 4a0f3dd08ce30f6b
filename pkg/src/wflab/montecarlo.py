"""Replicated Monte Carlo experiments.

Replicate ``r`` always uses the generator seeded by ``mix(master_seed, r)``.
Replicates are grouped into blocks with boundaries that depend only on the
configuration, and blocks are collected in index order, so reports are
bit-identical for any number of worker threads.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .diffusion import hitting_moment, kappa_l, kappa_r
from .errors import ParameterError
from .estimation import (
    Loss,
    Prior,
    StatsAccumulator,
    SufficientStats,
    bayes_estimator,
    estimates_from_arrays,
    validate_loss,
    validate_prior,
)
from .model import WF_SPEC, WFParams, fisher_matrix, selection_information, stationary_expectation
from .simulate import (
    FunctionalSum,
    clamp_unit,
    first_hitting_times,
    n_steps,
    replicate_rng,
    simulate_batch,
)
from .stats import kde_gaussian, ks_distance, moment_convergence_table, normal_cdf

ESTIMATORS = ("mle_riemann", "mle_score", "bayes")
DEFAULT_BLOCK = 500


def default_replicates(T):
    return 10_000 if T <= 2 else 2_000


def resolve_threads(threads):
    if threads is None or threads <= 0:
        return os.cpu_count() or 1
    return int(threads)


def _run_blocks(fn, blocks, threads):
    threads = resolve_threads(threads)
    if threads == 1 or len(blocks) == 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, blocks))


def _blocks(n, block_size, cuts=()):
    edges = set(range(0, n, block_size)) | {c for c in cuts if 0 < c < n} | {0, n}
    edges = sorted(edges)
    return list(zip(edges[:-1], edges[1:]))


@dataclass
class ExperimentConfig:
    params: WFParams
    T_list: Sequence[float]
    dt: float = 1e-3
    replicates: Union[int, Sequence[int], None] = None
    master_seed: int = 0
    estimator: str = "mle_riemann"
    start: Union[float, str] = 0.25
    prior: Optional[Prior] = None
    loss: Optional[Loss] = None
    p_list: Sequence[float] = (1, 2)
    rule: str = "right"

    def __post_init__(self):
        self.T_list = [float(t) for t in self.T_list]
        if not self.T_list:
            raise ParameterError(message="T_list must not be empty")
        if any(t < self.dt for t in self.T_list):
            raise ParameterError(message="every T must be at least dt")
        if self.replicates is None:
            self.replicates = [default_replicates(t) for t in self.T_list]
        elif isinstance(self.replicates, (int, np.integer)):
            self.replicates = [int(self.replicates)] * len(self.T_list)
        else:
            self.replicates = [int(r) for r in self.replicates]
        if len(self.replicates) != len(self.T_list):
            raise ParameterError(message="replicates must match T_list")
        if min(self.replicates) < 2:
            raise ParameterError(message="need at least 2 replicates")
        if self.estimator not in ESTIMATORS:
            raise ParameterError(message=f"estimator must be one of {ESTIMATORS}")
        if self.estimator == "bayes" and (self.prior is None or self.loss is None):
            raise ParameterError(message="bayes estimator needs a prior and a loss")

    def describe(self):
        return {
            "s": self.params.s, "theta1": self.params.theta1, "theta2": self.params.theta2,
            "T": self.T_list, "dt": self.dt, "replicates": self.replicates,
            "master_seed": self.master_seed, "estimator": self.estimator,
            "start": self.start, "p_list": list(self.p_list), "rule": self.rule,
        }


@dataclass
class TSummary:
    T: float
    replicates: int
    excluded: int
    estimates: np.ndarray
    rescaled_errors: np.ndarray
    mean: float
    variance: float
    mean_abs_error: float
    ks_distance: float
    kde_grid: np.ndarray
    kde_density: np.ndarray
    moment_table: list

    @property
    def n(self):
        return int(self.rescaled_errors.size)

    def summary(self):
        return {
            "T": self.T, "replicates": self.replicates, "excluded": self.excluded,
            "n": self.n, "mean": self.mean, "variance": self.variance,
            "mean_abs_error": self.mean_abs_error, "ks_distance": self.ks_distance,
            "moment_table": self.moment_table,
        }


@dataclass
class ExperimentReport:
    config: dict
    fisher_information: float
    per_T: list = field(default_factory=list)

    def by_T(self, T):
        for item in self.per_T:
            if item.T == float(T):
                return item
        raise KeyError(T)

    def to_dict(self):
        return {
            "config": self.config,
            "fisher_information": self.fisher_information,
            "limit_variance": 1.0 / self.fisher_information,
            "results": [t.summary() for t in self.per_T],
        }


def _t_label(T):
    return f"{T:g}"


def write_report(report: ExperimentReport, out_dir):
    """report.json, errors_T<t>.csv and kde_T<t>.csv; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    path = os.path.join(out_dir, "report.json")
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(path)
    for t in report.per_T:
        label = _t_label(t.T)
        p = os.path.join(out_dir, f"errors_T{label}.csv")
        with open(p, "w") as fh:
            fh.write("replicate,estimate,rescaled_error\n")
            root = math.sqrt(t.T)
            s_true = report.config["s"]
            for r, est in enumerate(t.estimates):
                err = root * (est - s_true) if math.isfinite(est) else float("nan")
                fh.write(f"{r},{est:.17g},{err:.17g}\n")
        written.append(p)
        p = os.path.join(out_dir, f"kde_T{label}.csv")
        with open(p, "w") as fh:
            fh.write("x,density\n")
            for x, d in zip(t.kde_grid, t.kde_density):
                fh.write(f"{x:.17g},{d:.17g}\n")
        written.append(p)
    return written


def _experiment_block(config, lo, hi):
    """Simulate replicates [lo, hi) and return {T index: estimates}."""
    params = config.params
    wanted = [k for k, n in enumerate(config.replicates) if lo < n]
    steps = {k: n_steps(config.T_list[k], config.dt) for k in wanted}
    horizon = max(config.T_list[k] for k in wanted)
    rngs = [replicate_rng(config.master_seed, r) for r in range(lo, hi)]
    acc = StatsAccumulator(params, config.dt)
    simulate_batch(params, horizon, config.dt, rngs, config.start, [acc],
                   checkpoints=list(steps.values()))
    out = {}
    for k in wanted:
        snap = acc.snapshots[steps[k]]
        arrays = snap.stats_arrays(config.rule)
        if config.estimator == "bayes":
            est = np.array([
                bayes_estimator(SufficientStats(**{f: float(v[i]) for f, v in arrays.items()}),
                                config.prior, config.loss, config.T_list[k], validate=False).estimate
                if arrays["sel_integral"][i] > 0 else np.nan
                for i in range(hi - lo)
            ])
        else:
            est = estimates_from_arrays(config.estimator, arrays)
        out[k] = est
    return out


def _summarize(T, estimates, s_true, info, p_list):
    ok = np.isfinite(estimates)
    est = estimates[ok]
    resc = math.sqrt(T) * (est - s_true)
    var_limit = 1.0 / info
    grid, dens = kde_gaussian(resc)
    return TSummary(
        T=T, replicates=int(estimates.size), excluded=int((~ok).sum()),
        estimates=estimates, rescaled_errors=resc,
        mean=float(np.mean(resc)), variance=float(np.var(resc, ddof=1)),
        mean_abs_error=float(np.mean(np.abs(est - s_true))),
        ks_distance=ks_distance(resc, lambda x: normal_cdf(x, 0.0, var_limit)),
        kde_grid=grid, kde_density=dens,
        moment_table=moment_convergence_table(resc, config_p(p_list), info),
    )


def config_p(p_list):
    return [float(p) for p in p_list]


def run_normality_experiment(config: ExperimentConfig, threads=1, block_size=DEFAULT_BLOCK) -> ExperimentReport:
    """Replicated estimation of s at each horizon T, summarized against N(0, 1/I(s)).

    Replicate r serves every T whose replicate count exceeds r; its path at a
    shorter T is the prefix of its path at a longer one.
    """
    if config.estimator == "bayes":
        if not validate_loss(config.loss).passed or not validate_prior(config.prior).passed:
            raise ParameterError(message="prior or loss fails validation")
    total = max(config.replicates)
    blocks = _blocks(total, block_size, config.replicates)
    results = _run_blocks(lambda b: _experiment_block(config, *b), blocks, threads)
    info = selection_information(config.params)
    report = ExperimentReport(config=config.describe(), fisher_information=info)
    for k, T in enumerate(config.T_list):
        parts = [res[k] for res in results if k in res]
        est = np.concatenate(parts)[: config.replicates[k]]
        report.per_T.append(_summarize(T, est, config.params.s, info, config.p_list))
    return report


# ---------------------------------------------------------------------------
# Ergodic averages


def run_ergodic_check(params: WFParams, h, T, dt=1e-3, n_paths=10, start=0.25, master_seed=0,
                      clamp=True, threads=1):
    """Pooled time average of h along simulated paths vs E[h(ξ)].

    With ``clamp`` the functional is evaluated at max(x, dt) near 0 and
    min(x, 1 - dt) near 1, which keeps h finite for h unbounded at the ends.
    """
    hh = (lambda x: h(clamp_unit(x, dt))) if clamp else h
    # Centre on h(1/2): both sides are c + (average of h - c), so h ≡ c gives
    # a deviation of exactly 0.
    c = float(np.asarray(h(np.array([0.5])), dtype=float)[0])
    expectation = c + stationary_expectation(params, lambda x: np.asarray(h(x), dtype=float) - c)

    def block(b):
        lo, hi = b
        fs = FunctionalSum(lambda x: np.asarray(hh(x), dtype=float) * np.ones_like(x) - c)
        simulate_batch(params, T, dt, [replicate_rng(master_seed, r) for r in range(lo, hi)], start, [fs])
        return fs.riemann(dt, "left")

    sums = np.concatenate(_run_blocks(block, _blocks(n_paths, DEFAULT_BLOCK), threads))
    horizon = n_steps(T, dt) * dt
    per_path = c + sums / horizon
    average = c + float(np.mean(sums / horizon))
    dev = abs(average - expectation)
    return {
        "time_average": average,
        "expectation": expectation,
        "abs_deviation": dev,
        "rel_deviation": dev / abs(expectation) if expectation != 0 else math.inf,
        "per_path": per_path.tolist(),
        "T": T, "dt": dt, "n_paths": n_paths,
    }


# ---------------------------------------------------------------------------
# Likelihood-ratio diagnostics


def _stats_for_paths(params, T, dt, replicates, start, master_seed, threads, lan=False, checkpoints=()):
    def block(b):
        lo, hi = b
        acc = StatsAccumulator(params, dt, lan=lan)
        simulate_batch(params, T, dt, [replicate_rng(master_seed, r) for r in range(lo, hi)], start, [acc],
                       checkpoints=checkpoints)
        return acc

    return _run_blocks(block, _blocks(replicates, DEFAULT_BLOCK), threads)


def _log_z(arrays, s, u, T):
    s2 = s + u / math.sqrt(T)
    return arrays["A"] * (s2 - s) - 0.5 * arrays["B"] * (s2 ** 2 - s ** 2)


def _loglog_slope(x, y):
    lx, ly = np.log(x), np.log(y)
    return float(np.polyfit(lx, ly, 1)[0])


def run_martingale_and_hellinger(params: WFParams, u_list=(0, 1, 2, 4, 8), pairs=None, T=1.0,
                                 replicates=5000, dt=1e-3, start=0.25, master_seed=0, support=None,
                                 threads=1):
    """MC estimates of E[Z(u)], E[Z^{1/2}(u)] and E|Z^{1/2}(u) - Z^{1/2}(v)|².

    ``pairs`` defaults to (1 + d, 1) for d in {0.25, 0.5, 1, 2}; the log-log
    slope of the Hellinger moment against |u - v| is reported.
    """
    if start == "stationary":
        raise ParameterError(message="diagnostics use a fixed start (initial-law ratio 1)")
    s = params.s
    pairs = [(1 + d, 1.0) for d in (0.25, 0.5, 1.0, 2.0)] if pairs is None else list(pairs)
    for u in list(u_list) + [w for p in pairs for w in p]:
        if support is not None and not support[0] < s + u / math.sqrt(T) < support[1]:
            raise ParameterError("local-parameter-out-of-range", f"u={u} leaves the support")
    accs = _stats_for_paths(params, T, dt, replicates, start, master_seed, threads)
    arrays = {k: np.concatenate([a.stats_arrays()[k] for a in accs]) for k in ("A", "B")}
    horizon = n_steps(T, dt) * dt
    n = arrays["A"].size
    rows = []
    for u in u_list:
        if u == 0:
            z = np.ones(n)
        else:
            z = np.exp(_log_z(arrays, s, u, horizon))
        zh = np.sqrt(z)
        rows.append({
            "u": u,
            "mean_Z": float(np.mean(z)), "se_Z": float(np.std(z, ddof=1) / math.sqrt(n)),
            "mean_sqrtZ": float(np.mean(zh)), "se_sqrtZ": float(np.std(zh, ddof=1) / math.sqrt(n)),
        })
    hell = []
    for u, v in pairs:
        d = (np.exp(0.5 * _log_z(arrays, s, u, horizon)) - np.exp(0.5 * _log_z(arrays, s, v, horizon))) ** 2
        hell.append({"u": u, "v": v, "distance": abs(u - v), "mean": float(np.mean(d)),
                     "se": float(np.std(d, ddof=1) / math.sqrt(n))})
    slope = _loglog_slope([h["distance"] for h in hell], [h["mean"] for h in hell])
    sqrt_means = [r["mean_sqrtZ"] for r in rows if r["u"] > 0]
    return {
        "T": T, "replicates": n, "s": s,
        "likelihood_ratio": rows,
        "hellinger": hell,
        "hellinger_slope": slope,
        "sqrtZ_decreasing": bool(np.all(np.diff(sqrt_means) < 0)),
    }


# ---------------------------------------------------------------------------
# LAN checks


def run_lan_check(params: WFParams, T=10.0, replicates=2000, dt=1e-3, start="stationary", master_seed=0,
                  threads=1):
    """Sample covariance of Δ_T against the Fisher matrix."""
    accs = _stats_for_paths(params, T, dt, replicates, start, master_seed, threads, lan=True)
    horizon = n_steps(T, dt) * dt
    delta = np.concatenate([a.lan_delta(horizon) for a in accs], axis=1)
    cov = np.cov(delta)
    n = delta.shape[1]
    # Standard errors of the covariance entries from the fourth moments.
    centred = delta - delta.mean(axis=1, keepdims=True)
    se = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            prod = centred[i] * centred[j]
            se[i, j] = np.std(prod, ddof=1) / math.sqrt(n)
    fisher = fisher_matrix(params).matrix
    return {"T": T, "replicates": n, "covariance": cov, "covariance_se": se, "fisher": fisher,
            "mean": delta.mean(axis=1), "delta": delta}


def run_lan_remainder_trend(params: WFParams, u, T_list=(5.0, 20.0, 80.0), replicates=200, dt=1e-3,
                            start=0.25, master_seed=0, threads=1):
    """Median |r_T(u)| at each T (paths shared across T as prefixes)."""
    u = np.asarray(u, dtype=float)
    if np.any(u[1:] != 0) and not params.lan_regime:
        raise ParameterError("lan-regime-required", "mutation directions need theta >= 1")
    steps = [n_steps(T, dt) for T in T_list]
    accs = _stats_for_paths(params, max(T_list), dt, replicates, start, master_seed, threads,
                            lan=True, checkpoints=steps)
    fisher = fisher_matrix(params).matrix
    active = u != 0
    ua = u[active]
    quad_f = float(ua @ fisher[np.ix_(active, active)] @ ua)
    medians = []
    for T, n in zip(T_list, steps):
        horizon = n * dt
        ent = np.concatenate([a.snapshots[n].empirical_info(horizon) for a in accs], axis=1)
        idx = {(0, 0): 0, (0, 1): 1, (0, 2): 2, (1, 1): 3, (1, 2): 4, (2, 2): 5}
        quad_e = np.zeros(ent.shape[1])
        for i in range(3):
            for j in range(3):
                if u[i] and u[j]:
                    quad_e += u[i] * u[j] * ent[idx[(min(i, j), max(i, j))]]
        r = 0.5 * quad_f - 0.5 * quad_e
        medians.append(float(np.median(np.abs(r))))
    return {"T": list(T_list), "median_abs_remainder": medians,
            "decreasing": bool(np.all(np.diff(medians) < 0))}


# ---------------------------------------------------------------------------
# Hitting times


def run_hitting_check(params: WFParams, x, b, dt=1e-4, replicates=10_000, t_max=200.0, master_seed=0,
                      threads=1):
    """Quadrature E[T_b], E[T_b²] and the moment bound against MC hitting times."""
    m1 = hitting_moment(WF_SPEC, params, x, b, 1)
    m2 = hitting_moment(WF_SPEC, params, x, b, 2)
    if x < b:
        kappa = kappa_l(WF_SPEC, params, WF_SPEC.interval.l, b)
    else:
        kappa = kappa_r(WF_SPEC, params, b, WF_SPEC.interval.r)

    def block(bl):
        lo, hi = bl
        return first_hitting_times(params, x, b, dt, t_max, [replicate_rng(master_seed, r) for r in range(lo, hi)])

    times = np.concatenate(_run_blocks(block, _blocks(replicates, DEFAULT_BLOCK), threads))
    hit = times[np.isfinite(times)]
    n = hit.size
    return {
        "x": x, "b": b, "dt": dt,
        "quadrature_mean": m1, "quadrature_second_moment": m2,
        "bound_kappa": kappa, "bound_q1": kappa, "bound_q2": 2 * kappa ** 2,
        "mc_mean": float(np.mean(hit)) if n else math.nan,
        "mc_mean_se": float(np.std(hit, ddof=1) / math.sqrt(n)) if n > 1 else math.nan,
        "mc_second_moment": float(np.mean(hit ** 2)) if n else math.nan,
        "mc_second_moment_se": float(np.std(hit ** 2, ddof=1) / math.sqrt(n)) if n > 1 else math.nan,
        "not_hit": int(times.size - n), "replicates": int(times.size),
    }
