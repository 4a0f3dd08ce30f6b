"""Euler--Maruyama simulation of the Wright--Fisher SDE and path functionals.

Each replicate owns a Philox generator seeded with ``mix(master_seed, r)``,
so results never depend on how replicates are grouped or scheduled.  The
batch simulator steps all replicates of a block together and feeds time
chunks to observers, which keep running sums instead of storing paths.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ParameterError
from .model import WFParams, sample_stationary, wf_drift

_MASK64 = (1 << 64) - 1
DEFAULT_CHUNK = 2048


def mix(master_seed: int, index: int) -> int:
    """SplitMix64 finalizer applied to (master_seed, index)."""
    z = (int(master_seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & _MASK64))


def replicate_rng(master_seed: int, index: int) -> np.random.Generator:
    return make_rng(mix(master_seed, index))


def n_steps(T, dt):
    return int(math.floor(T / dt + 1e-9))


@dataclass(frozen=True)
class SimConfig:
    T: float
    dt: float = 1e-3
    start: Union[float, str] = 0.25  # a point in [0, 1] or "stationary"
    seed: int = 0

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ParameterError(message="dt must be positive")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ParameterError(message="T must be positive")
        if self.dt > self.T * (1 + 1e-12):
            raise ParameterError(message="dt must not exceed T")
        if self.start != "stationary":
            x0 = float(self.start)
            if not 0 <= x0 <= 1:
                raise ParameterError("state-out-of-range", "start must lie in [0, 1]")
        if not 0 <= int(self.seed) <= _MASK64:
            raise ParameterError(message="seed must be a 64-bit unsigned integer")

    @property
    def stationary(self):
        return self.start == "stationary"


@dataclass
class SamplePath:
    values: np.ndarray
    dt: float
    T: Optional[float] = None
    clamp_count: int = 0
    seed: Optional[int] = None
    start_mode: str = "fixed"
    t0: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.size < 2:
            raise ParameterError("degenerate-path", "a path needs at least two points")
        if np.any(~np.isfinite(self.values)) or np.any((self.values < 0) | (self.values > 1)):
            raise ParameterError("state-out-of-range", "path values must lie in [0, 1]")
        if not self.dt > 0:
            raise ParameterError(message="dt must be positive")
        if self.T is None:
            self.T = (self.values.size - 1) * self.dt

    @property
    def n_steps(self):
        return self.values.size - 1

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.values.size)

    def to_csv(self, fh=None):
        """Write ``t,x`` rows with 17 significant digits; returns text if no handle."""
        own = fh is None
        fh = io.StringIO() if own else fh
        fh.write("t,x\n")
        for t, x in zip(self.times, self.values):
            fh.write(f"{t:.17g},{x:.17g}\n")
        return fh.getvalue() if own else None

    @classmethod
    def from_csv(cls, source, start_mode="fixed"):
        """Read a ``t,x`` CSV; the time grid must be uniform."""
        text = source.read() if hasattr(source, "read") else str(source)
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or [c.strip() for c in rows[0]] != ["t", "x"]:
            raise ParameterError(message="path CSV must start with header 't,x'")
        try:
            data = np.array([[float(a), float(b)] for a, b in rows[1:] if (a or b)], dtype=float)
        except ValueError as exc:
            raise ParameterError(message=f"malformed path CSV: {exc}") from exc
        if data.shape[0] < 2:
            raise ParameterError("degenerate-path", "a path needs at least two points")
        t = data[:, 0]
        steps = np.diff(t)
        dt = (t[-1] - t[0]) / (t.size - 1)
        if not dt > 0 or np.max(np.abs(steps - dt)) > 1e-9 * max(1.0, abs(t[-1])):
            raise ParameterError(message="path times must form a uniform increasing grid")
        return cls(values=data[:, 1], dt=dt, T=t[-1] - t[0], t0=t[0], start_mode=start_mode)


# ---------------------------------------------------------------------------
# Batch simulation


class Observer:
    """Receives consecutive chunks of shape (k + 1, R); row 0 repeats the
    last row of the previous chunk (or the start values)."""

    def start(self, x0):
        pass

    def update(self, block):
        raise NotImplementedError

    def checkpoint(self, step):
        pass


class PathRecorder(Observer):
    def start(self, x0):
        self.parts = [x0[None, :].copy()]

    def update(self, block):
        self.parts.append(block[1:].copy())

    def paths(self):
        return np.concatenate(self.parts, axis=0).T


class FunctionalSum(Observer):
    """Running Σ h(X_i) over all grid points i = 0..N."""

    def __init__(self, h):
        self.h = h

    def start(self, x0):
        self.x0 = x0.copy()
        self.total = np.asarray(self.h(x0), dtype=float).copy()

    def update(self, block):
        self.total += np.sum(np.asarray(self.h(block[1:]), dtype=float), axis=0)
        self.last = block[-1].copy()

    def riemann(self, dt, rule="right"):
        end = self.last if rule == "left" else self.x0
        return (self.total - np.asarray(self.h(end), dtype=float)) * dt


def _euler_chunk(params, x, z, dt, clamps):
    """Advance ``x`` through the rows of ``z``; returns the (k+1, R) block."""
    k = z.shape[0]
    block = np.empty((k + 1, x.size))
    block[0] = x
    sqdt = math.sqrt(dt)
    s, t1, t2 = params.s, params.theta1, params.theta2
    for i in range(k):
        var = x * (1.0 - x)
        drift = 0.5 * (s * var - t2 * x + t1 * (1.0 - x))
        y = x + drift * dt + np.sqrt(np.maximum(var, 0.0)) * sqdt * z[i]
        out = (y < 0.0) | (y > 1.0)
        if out.any():
            clamps += out
            y = np.clip(y, 0.0, 1.0)
        block[i + 1] = y
        x = y
    return block


def _start_values(params, start, rngs):
    if start == "stationary":
        return np.array([sample_stationary(params, g) for g in rngs])
    return np.full(len(rngs), float(start))


def simulate_batch(params: WFParams, T, dt, rngs: Sequence[np.random.Generator], start=0.25,
                   observers: Sequence[Observer] = (), chunk=DEFAULT_CHUNK, checkpoints=()):
    """Simulate one path per generator; returns (final values, clamp counts).

    Each generator first supplies the stationary start (if requested), then
    standard normals in chunks of ``chunk`` steps.  Chunking does not change
    the draws, so a replicate's path depends only on its generator.
    ``checkpoints`` are step counts at which observers' ``checkpoint(step)``
    hook fires (chunks are cut there).
    """
    n = n_steps(T, dt)
    if n < 1:
        raise ParameterError(message="need at least one time step")
    rngs = list(rngs)
    x = _start_values(params, start, rngs)
    clamps = np.zeros(len(rngs), dtype=np.int64)
    for ob in observers:
        ob.start(x)
    stops = sorted({int(c) for c in checkpoints if 0 < int(c) <= n})
    done = 0
    while done < n:
        k = min(chunk, n - done)
        upcoming = [c for c in stops if c > done]
        if upcoming:
            k = min(k, upcoming[0] - done)
        z = np.empty((len(rngs), k))
        for j, g in enumerate(rngs):
            z[j] = g.standard_normal(k)
        block = _euler_chunk(params, x, np.ascontiguousarray(z.T), dt, clamps)
        for ob in observers:
            ob.update(block)
        x = block[-1]
        done += k
        if done in stops:
            for ob in observers:
                ob.checkpoint(done)
    return x, clamps


def simulate_path(params: WFParams, config: SimConfig, rng=None) -> SamplePath:
    """One Euler--Maruyama path with clamping to [0, 1]."""
    rng = make_rng(config.seed) if rng is None else rng
    rec = PathRecorder()
    _, clamps = simulate_batch(params, config.T, config.dt, [rng], config.start, [rec])
    return SamplePath(values=rec.paths()[0], dt=config.dt, T=n_steps(config.T, config.dt) * config.dt,
                      clamp_count=int(clamps[0]), seed=config.seed,
                      start_mode="stationary" if config.stationary else "fixed")


def simulate_paths(params: WFParams, config: SimConfig, n_paths, master_seed=None):
    """``n_paths`` independent paths seeded by ``mix(master_seed, r)``."""
    master = config.seed if master_seed is None else master_seed
    rngs = [replicate_rng(master, r) for r in range(n_paths)]
    rec = PathRecorder()
    _, clamps = simulate_batch(params, config.T, config.dt, rngs, config.start, [rec])
    mode = "stationary" if config.stationary else "fixed"
    Tn = n_steps(config.T, config.dt) * config.dt
    return [SamplePath(values=v, dt=config.dt, T=Tn, clamp_count=int(c), seed=mix(master, r),
                       start_mode=mode)
            for r, (v, c) in enumerate(zip(rec.paths(), clamps))]


# ---------------------------------------------------------------------------
# Path functionals


def riemann_functional(path: SamplePath, h, rule="right"):
    """Σ h(X_{t_i}) dt over i = 1..N (right) or i = 0..N-1 (left)."""
    if rule not in ("left", "right"):
        raise ParameterError(message="rule must be 'left' or 'right'")
    pts = path.values[1:] if rule == "right" else path.values[:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.asarray(h(pts), dtype=float)
    vals = np.broadcast_to(vals, pts.shape)
    if not np.all(np.isfinite(vals)):
        raise ParameterError("functional-singular", "h is not finite at an attained path value")
    return float(np.sum(vals) * path.dt)


def clamp_unit(x, dt):
    """max(x, dt) near 0 and min(x, 1 - dt) near 1, for h unbounded at the ends."""
    return np.clip(x, dt, 1.0 - dt)


def _crossing_time(t_prev, x_prev, x_next, b, dt):
    # Linear interpolation between straddling grid values.
    gap = x_next - x_prev
    frac = np.where(gap != 0, (b - x_prev) / np.where(gap != 0, gap, 1.0), 1.0)
    return t_prev + np.clip(frac, 0.0, 1.0) * dt


def first_hitting_times(params: WFParams, x0, b, dt, t_max, rngs, chunk=1024):
    """Vectorized first passage to ``b`` from ``x0``; NaN marks "not hit"."""
    if not (0 < x0 < 1 and 0 < b < 1):
        raise ParameterError("state-out-of-range", "x0 and b must lie in (0, 1)")
    rngs = list(rngs)
    out = np.full(len(rngs), np.nan)
    if x0 == b:
        out[:] = 0.0
        return out
    n_total = n_steps(t_max, dt) if t_max > 0 else 0
    up = b > x0
    active = np.arange(len(rngs))
    x = np.full(len(rngs), float(x0))
    clamps = np.zeros(len(rngs), dtype=np.int64)
    done = 0
    while done < n_total and active.size:
        k = min(chunk, n_total - done)
        z = np.empty((active.size, k))
        for j, r in enumerate(active):
            z[j] = rngs[r].standard_normal(k)
        block = _euler_chunk(params, x[active], np.ascontiguousarray(z.T), dt, clamps[active])
        hit = block[1:] >= b if up else block[1:] <= b
        any_hit = hit.any(axis=0)
        if any_hit.any():
            cols = np.nonzero(any_hit)[0]
            rows = np.argmax(hit[:, cols], axis=0)
            t_prev = (done + rows) * dt
            out[active[cols]] = _crossing_time(t_prev, block[rows, cols], block[rows + 1, cols], b, dt)
        x[active] = block[-1]
        active = active[~any_hit]
        done += k
    return out


def first_hitting_time(params: WFParams, x0, b, dt, t_max, rng) -> Optional[float]:
    """First passage time to ``b``, or ``None`` when not hit before ``t_max``."""
    t = first_hitting_times(params, x0, b, dt, t_max, [rng])[0]
    return None if math.isnan(t) else float(t)


def upcrossing_count(path: Union[SamplePath, np.ndarray], a, b) -> int:
    """Completed cycles: reach b, then return to a (counted on the grid)."""
    if not a < b:
        raise ParameterError("degenerate-cycle", "need a < b")
    values = path.values if isinstance(path, SamplePath) else np.asarray(path, dtype=float)
    count = 0
    seeking_b = True
    # Jump between level events rather than scanning point by point.
    above = np.nonzero(values >= b)[0]
    below = np.nonzero(values <= a)[0]
    pos = 0
    while True:
        if seeking_b:
            i = np.searchsorted(above, pos)
            if i == above.size:
                break
            pos = above[i]
        else:
            i = np.searchsorted(below, pos)
            if i == below.size:
                break
            pos = below[i]
            count += 1
        seeking_b = not seeking_b
    return count
