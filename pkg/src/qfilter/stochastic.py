"""Time grids, reproducible Wiener increments and ensemble reduction.

Every trajectory ``k`` owns an independent random stream whose key is
``stable_hash(master_seed, k)``.  Streams are Philox4x32-10 counters
(``numpy.random.Philox``); Gaussian variates come from a Box-Muller
transform of the raw 64-bit outputs, so a trajectory depends only on
``(master_seed, k)`` and never on scheduling or worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "WORKERS_ENV",
    "TimeGrid",
    "SeedPolicy",
    "NoisePath",
    "EnsembleResult",
    "TrajectoryError",
    "stable_hash",
    "standard_normals",
    "sample_wiener_path",
    "refine_path",
    "run_ensemble",
    "resolve_workers",
    "doleans_exponential",
]

#: Environment variable consulted for the worker count (``0`` means one
#: worker per available CPU).
WORKERS_ENV = "QFILTER_WORKERS"

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(z: int) -> int:
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stable_hash(master_seed: int, k: int) -> int:
    """64-bit stream key for trajectory ``k`` under ``master_seed``.

    Two rounds of the SplitMix64 finalizer; the value is fixed forever for a
    given pair so results can be reproduced in other languages.
    """
    if master_seed < 0 or k < 0:
        raise ValueError("seed and trajectory index must be non-negative")
    return _splitmix64(_splitmix64(master_seed & _MASK64) ^ (k & _MASK64))


def standard_normals(key: int, n: int) -> np.ndarray:
    """``n`` standard normal variates from the Philox stream keyed by ``key``."""
    if n == 0:
        return np.zeros(0)
    bitgen = np.random.Philox(key=key)
    raw = bitgen.random_raw(2 * ((n + 1) // 2))
    u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    u1 = 1.0 - u[0::2]  # in (0, 1]
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * r.size)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:n]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 < t0 + dt < ... < t1`` with ``n_steps`` intervals."""

    t0: float
    t1: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.t0) and math.isfinite(self.t1)):
            raise ValueError("grid end points must be finite")
        if self.n_steps < 1 or int(self.n_steps) != self.n_steps:
            raise ValueError("n_steps must be a positive integer")
        if not self.t1 > self.t0:
            raise ValueError("t1 must exceed t0")

    @classmethod
    def from_dt(cls, t0: float, t1: float, dt: float) -> "TimeGrid":
        if not dt > 0:
            raise ValueError("dt must be positive")
        n = (t1 - t0) / dt
        n_int = int(round(n))
        if n_int < 1 or abs(n - n_int) > 1e-9 * max(1.0, n):
            raise ValueError(f"interval [{t0}, {t1}] is not a whole number of steps of {dt}")
        return cls(t0, t1, n_int)

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Grid index of time ``t``; ``t`` must lie on the grid."""
        x = (t - self.t0) / self.dt
        i = int(round(x))
        if abs(x - i) > 1e-9 * max(1.0, abs(x)) or not 0 <= i <= self.n_steps:
            raise ValueError(f"time {t} is not a grid point")
        return i


@dataclass(frozen=True)
class SeedPolicy:
    master_seed: int = 0

    def key(self, k: int, level: int = 0) -> int:
        """Stream key of trajectory ``k``; ``level > 0`` selects refinement streams."""
        key = stable_hash(self.master_seed, k)
        return key if level == 0 else stable_hash(key, level)


@dataclass(frozen=True)
class NoisePath:
    """Independent Gaussian increments, one column per channel.

    Column ``j`` has variance ``dt * weights[j]`` per step.
    """

    increments: np.ndarray
    weights: np.ndarray
    dt: float

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    def cumulative(self) -> np.ndarray:
        """Path values ``W(t_i)`` including the initial zero row."""
        return np.vstack([np.zeros((1, self.increments.shape[1])),
                          np.cumsum(self.increments, axis=0)])


def sample_wiener_path(grid: TimeGrid, weights: Sequence[float],
                       seeds: SeedPolicy, k: int) -> NoisePath:
    """Draw the increments of trajectory ``k`` for channels with ``weights``."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise ValueError("channel weights must be finite and non-negative")
    m = w.size
    z = standard_normals(seeds.key(k), grid.n_steps * m).reshape(grid.n_steps, m)
    return NoisePath(z * np.sqrt(grid.dt * w), w, grid.dt)


def refine_path(path: NoisePath, seeds: SeedPolicy, k: int, level: int = 1) -> NoisePath:
    """Halve the step of ``path`` by Brownian-bridge interpolation.

    The refined increments sum pairwise to the original ones, so the coarse
    and fine paths are samples of the same Brownian motion.
    """
    n, m = path.increments.shape
    z = standard_normals(seeds.key(k, level), n * m).reshape(n, m)
    half = 0.5 * path.increments
    spread = z * np.sqrt(0.25 * path.dt * path.weights)
    fine = np.empty((2 * n, m))
    fine[0::2] = half + spread
    fine[1::2] = half - spread
    return NoisePath(fine, path.weights, path.dt / 2)


def doleans_exponential(increments: np.ndarray, g, weights, dt: float) -> np.ndarray:
    """``exp(sum g dW - g^2 w t / 2)`` along a path, one value per grid point.

    ``g`` is either one value per channel (constant in time) or an array of
    shape ``increments.shape``.
    """
    inc = np.asarray(increments, dtype=float)
    gg = np.broadcast_to(np.asarray(g, dtype=float), inc.shape)
    w = np.asarray(weights, dtype=float)
    expo = np.sum(gg * inc - 0.5 * gg**2 * w * dt, axis=1)
    return np.exp(np.concatenate([[0.0], np.cumsum(expo)]))


class TrajectoryError(RuntimeError):
    """A per-trajectory job failed; ``index`` names the trajectory."""

    def __init__(self, index: int, message: str):
        super().__init__(f"trajectory {index}: {message}")
        self.index = index


def resolve_workers(workers: int | None = None) -> int:
    """Worker count from the argument or ``QFILTER_WORKERS`` (0 = all CPUs)."""
    if workers is None:
        raw = os.environ.get(WORKERS_ENV, "1").strip() or "1"
        try:
            workers = int(raw)
        except ValueError as exc:
            raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if workers < 0:
        raise ValueError("worker count must be non-negative")
    if workers == 0:
        workers = os.cpu_count() or 1
    return workers


@dataclass
class EnsembleResult:
    """Per-key sample means and standard errors ``std / sqrt(n)``."""

    n: int
    mean: dict[str, np.ndarray]
    stderr: dict[str, np.ndarray]
    samples: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


BatchJob = Callable[[range], Mapping[str, np.ndarray]]


def run_ensemble(n_traj: int, job: BatchJob, *, workers: int | None = None,
                 chunk_size: int = 256, keep_samples: bool = False) -> EnsembleResult:
    """Run ``job`` over trajectories ``0..n_traj-1`` and reduce.

    ``job`` receives a ``range`` of trajectory indices and returns a mapping
    of arrays whose leading axis runs over that range.  Chunks are fixed by
    ``chunk_size`` alone and results are reassembled in index order before
    reduction, so the output is bit-identical for any worker count.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    if chunk_size < 1:
        raise ValueError("chunk_size must be positive")
    chunks = [range(a, min(a + chunk_size, n_traj)) for a in range(0, n_traj, chunk_size)]
    n_workers = min(resolve_workers(workers), len(chunks))

    def run_chunk(ks: range):
        try:
            out = job(ks)
        except TrajectoryError:
            raise
        except Exception as exc:  # attach the first index of the failing chunk
            raise TrajectoryError(ks.start, f"{type(exc).__name__}: {exc}") from exc
        for key, arr in out.items():
            if np.shape(arr)[0] != len(ks):
                raise TrajectoryError(ks.start, f"output {key!r} has wrong leading length")
        return out

    if n_workers <= 1:
        parts = [run_chunk(ks) for ks in chunks]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(run_chunk, chunks))

    samples = {key: np.concatenate([np.asarray(p[key]) for p in parts], axis=0)
               for key in parts[0]}
    mean = {key: np.mean(val, axis=0) for key, val in samples.items()}
    if n_traj > 1:
        stderr = {key: np.std(val, axis=0, ddof=1) / math.sqrt(n_traj)
                  for key, val in samples.items()}
    else:
        stderr = {key: np.full(np.shape(val)[1:], np.nan) for key, val in samples.items()}
    return EnsembleResult(n_traj, mean, stderr, samples if keep_samples else {})
