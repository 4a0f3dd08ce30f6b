"""Small statistical utilities: normal CDF, KS distance, Gaussian KDE, moment tables."""

from __future__ import annotations

import math

import numpy as np

from .errors import ParameterError

KDE_GRID_POINTS = 512
FALLBACK_BANDWIDTH = 1e-3


def normal_cdf(x, mean=0.0, variance=1.0):
    """Φ((x - mean)/sd) through erfc, accurate in both tails."""
    if not variance > 0:
        raise ParameterError(message="variance must be positive")
    z = (np.asarray(x, dtype=float) - mean) / math.sqrt(2.0 * variance)
    out = 0.5 * np.vectorize(math.erfc, otypes=[float])(-z) if z.ndim else 0.5 * math.erfc(-float(z))
    return out


def ks_distance(samples, cdf) -> float:
    """sup |F_n - F| evaluated at the jumps of the empirical CDF."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n == 0:
        raise ParameterError(message="need at least one sample")
    F = np.clip(np.asarray(cdf(x), dtype=float), 0.0, 1.0)
    i = np.arange(1, n + 1)
    d = max(np.max(i / n - F), np.max(F - (i - 1) / n))
    return float(min(max(d, 0.0), 1.0))


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=float)
    n = x.size
    sd = float(np.std(x, ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    iqr = (q75 - q25) / 1.34
    spread = min(sd, iqr) if iqr > 0 else sd
    h = 0.9 * spread * n ** (-0.2)
    return h if h > 0 else FALLBACK_BANDWIDTH


def kde_gaussian(samples, bandwidth="silverman", n_grid=KDE_GRID_POINTS):
    """Gaussian-kernel density on a grid spanning [min - 3h, max + 3h]."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ParameterError(message="need at least one sample")
    h = silverman_bandwidth(x) if bandwidth == "silverman" else float(bandwidth)
    if not h > 0:
        raise ParameterError(message="bandwidth must be positive")
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, n_grid)
    dens = np.zeros_like(grid)
    # Chunk over samples to bound memory.
    for start in range(0, x.size, 4096):
        z = (grid[:, None] - x[None, start:start + 4096]) / h
        dens += np.exp(-0.5 * z * z).sum(axis=1)
    dens /= x.size * h * math.sqrt(2 * math.pi)
    return grid, dens


def normal_abs_moment(p, variance=1.0):
    """E|N(0, variance)|^p."""
    return 2 ** (p / 2) * math.gamma((p + 1) / 2) / math.sqrt(math.pi) * variance ** (p / 2)


def moment_convergence_table(rescaled_errors, p_list, I_s):
    """Rows (p, empirical E|u|^p, limit E|I^{-1/2} ζ|^p, relative gap)."""
    if not I_s > 0:
        raise ParameterError(message="information must be positive")
    u = np.abs(np.asarray(rescaled_errors, dtype=float))
    rows = []
    for p in p_list:
        if not p > 0:
            raise ParameterError(message="moment order must be positive")
        emp = float(np.mean(u ** p))
        theo = normal_abs_moment(p, 1.0 / I_s)
        rows.append({"p": p, "empirical": emp, "theoretical": theo, "relative_gap": emp / theo - 1})
    return rows


def fsum_mean(values):
    """Mean via math.fsum, so the result does not depend on summation order."""
    v = np.asarray(values, dtype=float).ravel()
    return math.fsum(v) / v.size
