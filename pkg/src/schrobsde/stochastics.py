"""Seeded Brownian paths, the Euler forward process and stochastic-integral estimators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidInputError

VectorField = Callable[[float, np.ndarray], np.ndarray]


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for the stream identified by ``(seed, *keys)``.

    Distinct key tuples give statistically independent, non-overlapping streams,
    so any worker can regenerate exactly the draws it owns.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class TimeGrid:
    M: int
    horizon: float

    def __post_init__(self):
        if self.M < 1:
            raise InvalidInputError(f"M must be >= 1, got {self.M}")
        if not self.horizon > 0:
            raise InvalidInputError(f"horizon must be positive, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.M

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.M + 1) * self.dt
        t[-1] = self.horizon
        return t


@dataclass
class PathBatch:
    increments: np.ndarray  # (B, M, d)
    states: np.ndarray  # (B, M+1, d)
    x0: np.ndarray
    nu: float
    grid: TimeGrid | None = None

    @property
    def batch(self) -> int:
        return self.increments.shape[0]

    @property
    def d(self) -> int:
        return self.increments.shape[2]


def brownian_increments(seed: int, B: int, grid: TimeGrid, d: int) -> np.ndarray:
    """i.i.d. ``N(0, dt)`` increments of shape ``(B, M, d)``."""
    if B < 1 or d < 1:
        raise InvalidInputError("batch and dimension must be positive")
    rng = make_rng(seed)
    return rng.standard_normal((B, grid.M, d)) * np.sqrt(grid.dt)


def euler_forward(x0, increments: np.ndarray, nu: float, grid: TimeGrid | None = None) -> PathBatch:
    """``X_{j+1} = X_j + sqrt(nu) dW_j`` from ``X_0 = x0``."""
    if not nu > 0:
        raise InvalidInputError(f"nu must be positive, got {nu}")
    increments = np.asarray(increments, dtype=float)
    if increments.ndim != 3:
        raise InvalidInputError("increments must have shape (B, M, d)")
    B, M, d = increments.shape
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (d,)).copy()
    steps = np.empty((B, M + 1, d))
    steps[:, 0, :] = x0
    steps[:, 1:, :] = np.sqrt(nu) * increments
    # sequential accumulation keeps X_{j+1} == X_j + sqrt(nu) dW_j bit for bit
    states = np.cumsum(steps, axis=1)
    return PathBatch(increments=increments, states=states, x0=x0, nu=float(nu), grid=grid)


def simulate_paths(seed: int, B: int, grid: TimeGrid, x0, nu: float) -> PathBatch:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    inc = brownian_increments(seed, B, grid, x0.shape[0])
    return euler_forward(x0, inc, nu, grid)


def coarsen(paths: PathBatch, factor: int) -> PathBatch:
    """Aggregate increments over blocks of ``factor`` steps (same Brownian path, coarser grid)."""
    B, M, d = paths.increments.shape
    if factor < 1 or M % factor:
        raise InvalidInputError(f"cannot coarsen {M} steps by {factor}")
    inc = paths.increments.reshape(B, M // factor, factor, d).sum(axis=2)
    grid = None
    if paths.grid is not None:
        grid = TimeGrid(M // factor, paths.grid.horizon)
    return euler_forward(paths.x0, inc, paths.nu, grid)


def _times(paths: PathBatch) -> np.ndarray:
    if paths.grid is None:
        raise InvalidInputError("path batch carries no time grid")
    return paths.grid.times


def _field_values(g: VectorField, paths: PathBatch) -> np.ndarray:
    t = _times(paths)
    vals = np.stack([np.asarray(g(t[j], paths.states[:, j, :]), dtype=float) for j in range(len(t))], axis=1)
    return np.broadcast_to(vals, paths.states.shape)


def ito_integral(g: VectorField, paths: PathBatch) -> np.ndarray:
    """Left-point sum ``sum_j g(t_j, X_j) . dW_j`` per path."""
    vals = _field_values(g, paths)
    return np.einsum("bjk,bjk->b", vals[:, :-1, :], paths.increments)


def strat_integral(g: VectorField, paths: PathBatch) -> np.ndarray:
    """Trapezoid sum ``sum_j (g_j + g_{j+1})/2 . dW_j`` per path."""
    vals = _field_values(g, paths)
    mid = 0.5 * (vals[:, :-1, :] + vals[:, 1:, :])
    return np.einsum("bjk,bjk->b", mid, paths.increments)


def star_integral(g: VectorField, paths: PathBatch) -> np.ndarray:
    """Stratonovich minus Itô, i.e. ``sum_j (g_{j+1} - g_j)/2 . dW_j``."""
    vals = _field_values(g, paths)
    return 0.5 * np.einsum("bjk,bjk->b", vals[:, 1:, :] - vals[:, :-1, :], paths.increments)


@dataclass(frozen=True)
class DivergenceCheck:
    mean: float
    stderr: float
    rms: float
    star_mean: float
    star_stderr: float


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def divergence_check(g: VectorField, div_g: Callable[[float, np.ndarray], np.ndarray], paths: PathBatch) -> DivergenceCheck:
    """Compare ``int g *dW`` with ``(sqrt(nu)/2) int div g dt`` path by path.

    The time integral uses the trapezoid rule on the path nodes. Returns the
    mean, standard error and RMS of the per-path defect, plus the star-integral
    statistics themselves.
    """
    star = star_integral(g, paths)
    t = _times(paths)
    div = np.stack([np.broadcast_to(np.asarray(div_g(t[j], paths.states[:, j, :]), dtype=float), (paths.batch,))
                    for j in range(len(t))], axis=1)
    quad = np.sum(0.5 * (div[:, :-1] + div[:, 1:]) * np.diff(t), axis=1)
    defect = star - 0.5 * np.sqrt(paths.nu) * quad
    mean, se = _mean_se(defect)
    smean, sse = _mean_se(star)
    return DivergenceCheck(mean=mean, stderr=se, rms=float(np.sqrt(np.mean(defect**2))),
                           star_mean=smean, star_stderr=sse)
