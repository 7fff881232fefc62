"""Network-free reference computations for the learning scheme.

* :func:`fk_residual` plugs the exact solution into the one-step maps and
  reports the defect per step.
* :func:`aux_solve` runs the idealised backward recursion with conditional
  expectations estimated by least-squares Monte Carlo and the implicit
  nonlinearity resolved by fixed-point iteration.
* :func:`l2_projection_zbar` estimates the per-step time average of the exact
  gradient process.
* :func:`compare_solver_to_oracle` and :func:`convergence_probe` relate a
  trained solver to those references.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .deepbsde import SolverState, TrainConfig, evaluate_point, f_i_step, f_r_step, solve
from .errors import (ContractionFailureError, InvalidInputError, RegressionDegenerateError,
                     UnsupportedOperationError)
from .problems import ComplexValue, SchrodingerProblem, relative_l2_error
from .stochastics import PathBatch, TimeGrid, coarsen, simulate_paths

logger = logging.getLogger(__name__)

MAX_GRAM_CONDITION = 1e13
TAIL_QUANTILE = 1e-3


# regression -------------------------------------------------------------------


def _feature(x: np.ndarray, statistic: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if statistic == "auto":
        statistic = "first" if x.shape[1] == 1 else "mean"
    if statistic == "first":
        return x[:, 0]
    if statistic == "mean":
        return x.mean(axis=1)
    raise InvalidInputError(f"unknown regression statistic {statistic!r}")


def _robust_bounds(s: np.ndarray, tail: float) -> tuple[float, float]:
    # a handful of extreme samples would otherwise pin the polynomial's edges
    lo, hi = np.quantile(s, [tail, 1.0 - tail])
    if not hi > lo:
        lo, hi = float(s.min()), float(s.max())
    return float(lo), float(hi)


@dataclass(frozen=True)
class RegressionBasis:
    """Basis of functions of a scalar statistic of the state.

    ``kind="polynomial"`` uses Legendre polynomials up to ``degree`` on the
    rescaled domain; ``kind="piecewise-local"`` uses ``cells`` piecewise-linear
    hat functions. Without explicit ``bounds`` the domain spans the
    ``tail_quantile`` to ``1 - tail_quantile`` quantiles of the fitted sample and
    states outside it are clamped to the edge. The statistic is the state itself in one dimension and the
    coordinate mean otherwise, which is exact in structure for solutions that
    depend on ``x`` only through ``sum(x)``.
    """

    kind: str = "polynomial"
    degree: int = 6
    cells: int = 32
    bounds: Optional[tuple[float, float]] = None
    statistic: str = "auto"
    tail_quantile: float = TAIL_QUANTILE

    def __post_init__(self):
        if self.kind not in ("polynomial", "piecewise-local"):
            raise InvalidInputError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0 or self.cells < 1:
            raise InvalidInputError("degree must be >= 0 and cells >= 1")
        if self.bounds is not None and not self.bounds[1] > self.bounds[0]:
            raise InvalidInputError(f"invalid bounds {self.bounds}")
        if not 0.0 <= self.tail_quantile < 0.5:
            raise InvalidInputError(f"tail_quantile must lie in [0, 0.5), got {self.tail_quantile}")

    @property
    def size(self) -> int:
        return self.degree + 1 if self.kind == "polynomial" else self.cells + 1

    def design(self, s: np.ndarray, bounds: tuple[float, float]) -> np.ndarray:
        lo, hi = bounds
        z = np.clip((2.0 * s - (lo + hi)) / (hi - lo), -1.0, 1.0)
        if self.kind == "polynomial":
            return np.polynomial.legendre.legvander(z, self.degree)
        nodes = np.linspace(-1.0, 1.0, self.cells + 1)
        width = nodes[1] - nodes[0]
        return np.maximum(0.0, 1.0 - np.abs(z[:, None] - nodes[None, :]) / width)

    def fit(self, x: np.ndarray, targets: np.ndarray) -> "Regression":
        """Least-squares fit of each target column on the basis evaluated at ``x``.

        A sample with no spread (every state identical) is fitted by its mean.
        """
        s = _feature(x, self.statistic)
        y = np.asarray(targets, dtype=float)
        squeeze = y.ndim == 1
        y2 = y.reshape(y.shape[0], -1)
        spread = float(np.ptp(s)) if s.size else 0.0
        if spread == 0.0:
            coef = y2.mean(axis=0, keepdims=True)
            return Regression(replace(self, kind="polynomial", degree=0), (s[0] - 1.0, s[0] + 1.0),
                              coef, 1.0, float(np.sqrt(np.mean((y2 - coef) ** 2))), squeeze, y.shape[1:])
        bounds = self.bounds or _robust_bounds(s, self.tail_quantile)
        A = self.design(s, bounds)
        sv = np.linalg.svd(A, compute_uv=False)
        cond = float((sv[0] / sv[-1]) ** 2) if sv[-1] > 0 else math.inf
        if not cond < MAX_GRAM_CONDITION:
            raise RegressionDegenerateError(f"Gram matrix condition number {cond:.3e} exceeds {MAX_GRAM_CONDITION:.0e}")
        coef, *_ = np.linalg.lstsq(A, y2, rcond=None)
        resid = float(np.sqrt(np.mean((A @ coef - y2) ** 2)))
        return Regression(self, bounds, coef, cond, resid, squeeze, y.shape[1:])


@dataclass
class Regression:
    """A fitted conditional-expectation estimate; call it on states."""

    basis: RegressionBasis
    bounds: tuple[float, float]
    coef: np.ndarray  # (n_basis, n_targets)
    gram_condition: float
    residual_rms: float
    scalar: bool
    target_shape: tuple

    def __call__(self, x: np.ndarray) -> np.ndarray:
        s = _feature(x, self.basis.statistic)
        out = self.basis.design(s, self.bounds) @ self.coef
        if self.scalar:
            return out[:, 0]
        return out.reshape((s.shape[0],) + tuple(self.target_shape))


# Feynman-Kac residual ------------------------------------------------------------


def _require_exact(p: SchrodingerProblem) -> None:
    if p.exact is None or p.exact_grad is None:
        raise UnsupportedOperationError(f"problem {p.name} has no closed-form solution")


@dataclass
class ResidualTable:
    j: np.ndarray
    t: np.ndarray
    rms_re: np.ndarray
    rms_im: np.ndarray
    aggregate: float

    def rows(self) -> list[tuple]:
        return [(int(a), float(b), float(c), float(d)) for a, b, c, d in zip(self.j, self.t, self.rms_re, self.rms_im)]


RESIDUAL_COLUMNS = ("j", "t", "rms_residual_re", "rms_residual_im")


def fk_residual(p: SchrodingerProblem, grid: TimeGrid, paths: PathBatch) -> ResidualTable:
    """One-step defect of the exact solution under ``F^R``/``F^I``, RMS over the batch.

    ``aggregate`` is the RMS of the complex defect over all steps and paths.
    """
    _require_exact(p)
    if paths.increments.shape[1] != grid.M:
        raise InvalidInputError(f"paths have {paths.increments.shape[1]} steps, grid has {grid.M}")
    t = grid.times
    X = paths.states
    ur, ui = p.exact(t[0], X[:, 0, :])
    zr, zi = p.exact_grad(t[0], X[:, 0, :])
    rms_re = np.empty(grid.M)
    rms_im = np.empty(grid.M)
    for j in range(grid.M):
        ur_n, ui_n = p.exact(t[j + 1], X[:, j + 1, :])
        zr_n, zi_n = p.exact_grad(t[j + 1], X[:, j + 1, :])
        dw = paths.increments[:, j, :]
        args = (t[j], X[:, j, :], ur, ui, zr_n, zi_n, zr, zi, grid.dt, dw, p.nu, p.f)
        res_r = ur_n - f_r_step(*args)
        res_i = ui_n - f_i_step(*args)
        rms_re[j] = np.sqrt(np.mean(res_r**2))
        rms_im[j] = np.sqrt(np.mean(res_i**2))
        ur, ui, zr, zi = ur_n, ui_n, zr_n, zi_n
    agg = float(np.sqrt(np.mean(rms_re**2 + rms_im**2)))
    return ResidualTable(np.arange(grid.M), t[:-1].copy(), rms_re, rms_im, agg)


def loglog_slope(dts: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of ``log(values)`` against ``log(dts)``."""
    return float(np.polyfit(np.log(np.asarray(dts, float)), np.log(np.asarray(values, float)), 1)[0])


def residual_order(p: SchrodingerProblem, Ms: Sequence[int], batch: int, seed: int = 0,
                   x0=None) -> tuple[list[float], float]:
    """Aggregate residuals over nested grids sharing one Brownian sample, and their slope."""
    Ms = sorted(int(m) for m in Ms)
    finest = Ms[-1]
    if any(finest % m for m in Ms):
        raise InvalidInputError(f"grid sizes {Ms} must divide {finest}")
    x0 = np.zeros(p.d) if x0 is None else np.broadcast_to(np.asarray(x0, float), (p.d,))
    fine = simulate_paths(seed, batch, TimeGrid(finest, p.horizon), x0, p.nu)
    aggs = []
    for m in Ms:
        pb = coarsen(fine, finest // m)
        aggs.append(fk_residual(p, TimeGrid(m, p.horizon), pb).aggregate)
    slope = loglog_slope([p.horizon / m for m in Ms], aggs) if len(Ms) > 1 else math.nan
    return aggs, slope


# auxiliary system ----------------------------------------------------------------


@dataclass
class AuxStep:
    """Handles at one time node.

    ``a_r``/``a_i`` are the explicit parts of the value equations; the values
    themselves solve ``v = a + dt * (-f^I(v), f^R(v))`` and are obtained by
    fixed-point iteration at the query points.
    """

    t: float
    dt: float
    a_r: Regression
    a_i: Regression
    w_r: Regression
    w_i: Regression
    iterations: int = 0
    contraction: float = 0.0


@dataclass
class AuxSolution:
    problem: SchrodingerProblem
    grid: TimeGrid
    steps: list  # j -> AuxStep, None at j = M
    fp_tol: float
    fp_max: int
    diagnostics: dict = field(default_factory=dict)

    def _check_j(self, j: int) -> None:
        if not 0 <= j <= self.grid.M:
            raise InvalidInputError(f"step {j} outside 0..{self.grid.M}")

    def values(self, j: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(v^R_j(x), v^I_j(x))``."""
        self._check_j(j)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if j == self.grid.M:
            return self.problem.g(x)
        st = self.steps[j]
        vr, vi, _, _ = _fixed_point(self.problem, st.t, x, st.a_r(x), st.a_i(x), st.dt,
                                    self.fp_tol, self.fp_max, j)
        return vr, vi

    def gradients(self, j: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(w^R_j(x), w^I_j(x))``, each of shape ``(N, d)``."""
        self._check_j(j)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if j == self.grid.M:
            return self.problem.grad_g(x)
        st = self.steps[j]
        return st.w_r(x), st.w_i(x)

    def evaluate(self, j: int, x: np.ndarray):
        vr, vi = self.values(j, x)
        wr, wi = self.gradients(j, x)
        return vr, vi, wr, wi


def _fixed_point(p: SchrodingerProblem, t: float, x, a_r, a_i, dt: float, tol: float, max_iter: int, j: int):
    """Solve ``v^R = a_r - f^I(v) dt``, ``v^I = a_i + f^R(v) dt`` pointwise.

    Returns ``(v_r, v_i, iterations, contraction_ratio)``. Linear problems
    need no iteration.
    """
    if p.linear:
        return a_r, a_i, 0, 0.0
    vr, vi = a_r.copy(), a_i.copy()
    prev = None
    ratio = 0.0
    for it in range(1, max_iter + 1):
        fr, fi = p.f(t, x, vr, vi)
        nr, ni = a_r - fi * dt, a_i + fr * dt
        dist = float(np.max(np.abs(nr - vr) + np.abs(ni - vi))) if nr.size else 0.0
        vr, vi = nr, ni
        if prev is not None and prev > 0:
            ratio = max(ratio, dist / prev)
            if ratio >= 1.0 and dist > tol:
                raise ContractionFailureError(j, it, ratio)
        if dist <= tol:
            return vr, vi, it, ratio
        prev = dist
    raise ContractionFailureError(j, max_iter, ratio)


def aux_solve(p: SchrodingerProblem, grid: TimeGrid, basis: RegressionBasis, B: int,
              fp_tol: float = 1e-10, fp_max: int = 100, seed: int = 0, x0=None) -> AuxSolution:
    """Backward sweep of the auxiliary conditional-expectation system.

    At each step the already computed handles at ``t_{j+1}`` (``G`` and its
    gradient at the last node) stand in for the trained networks. ``E_j`` is
    estimated by regressing path samples on functions of ``X_{t_j}``. For
    ``d > 1`` the gradient equations are applied coordinatewise, with the
    squared increment of the matching coordinate.
    """
    if B < 2:
        raise InvalidInputError("need at least two paths")
    if abs(grid.horizon - p.horizon) > 1e-12:
        raise InvalidInputError("grid and problem horizons differ")
    x0 = np.zeros(p.d) if x0 is None else np.broadcast_to(np.asarray(x0, float), (p.d,)).copy()
    paths = simulate_paths(seed, B, grid, x0, p.nu)
    dt, c, sq = grid.dt, 0.5 * math.sqrt(p.nu), math.sqrt(p.nu)
    sol = AuxSolution(p, grid, [None] * (grid.M + 1), fp_tol, fp_max)
    iters, conds, resids, ratios = {}, {}, {}, {}
    for j in range(grid.M - 1, -1, -1):
        x = paths.states[:, j, :]
        xn = paths.states[:, j + 1, :]
        dw = paths.increments[:, j, :]
        ur, ui, zr, zi = sol.evaluate(j + 1, xn)
        exp_r = ur - c * np.sum((zr + zi) * dw, axis=1)
        exp_i = ui + c * np.sum((zr - zi) * dw, axis=1)
        wr_t = ((ur + ui)[:, None] * dw) / (dt * sq) - zi * dw**2 / dt
        wi_t = ((ui - ur)[:, None] * dw) / (dt * sq) + zr * dw**2 / dt
        fits = [basis.fit(x, y) for y in (exp_r, exp_i, wr_t, wi_t)]
        st = AuxStep(grid.times[j], dt, *fits)
        _, _, st.iterations, st.contraction = _fixed_point(p, st.t, x, fits[0](x), fits[1](x), dt, fp_tol, fp_max, j)
        sol.steps[j] = st
        iters[j] = st.iterations
        ratios[j] = st.contraction
        conds[j] = max(f.gram_condition for f in fits)
        resids[j] = [f.residual_rms for f in fits]
    lip = p.meta.get("lipschitz")
    sol.diagnostics = {
        "fixed_point_iterations": iters,
        "contraction_ratio": ratios,
        "lipschitz_dt": None if lip is None else lip * dt,
        "gram_condition": conds,
        "regression_residual_rms": resids,
        "batch": B,
        "seed": seed,
    }
    return sol


# L2 projection of the gradient process -----------------------------------------


@dataclass
class ZbarTable:
    j: np.ndarray
    t: np.ndarray
    zbar_r: list  # j -> Regression
    zbar_i: list
    gap_rms: np.ndarray  # empirical L2 distance between Zbar_j and Z_{t_j}


def l2_projection_zbar(p: SchrodingerProblem, grid: TimeGrid, paths: PathBatch, substeps: int,
                       basis: Optional[RegressionBasis] = None) -> ZbarTable:
    """``(1/dt) E_j int_{t_j}^{t_{j+1}} Z_s ds`` by a left-point rule on a refined path.

    ``paths`` must live on the refined grid with ``grid.M * substeps`` steps; the
    integral over step ``j`` averages the exact gradient at its ``substeps``
    interior nodes and is regressed on ``X_{t_j}``. The default basis spans the
    full sample range since a single projection has no recursion to destabilise.
    """
    if substeps < 1:
        raise InvalidInputError(f"substeps must be >= 1, got {substeps}")
    _require_exact(p)
    n = grid.M * substeps
    if paths.increments.shape[1] != n:
        raise InvalidInputError(f"need paths with {n} steps, got {paths.increments.shape[1]}")
    basis = basis or RegressionBasis(tail_quantile=0.0)
    fine_t = TimeGrid(n, grid.horizon).times
    zb_r, zb_i, gaps = [], [], np.empty(grid.M)
    for j in range(grid.M):
        k0 = j * substeps
        acc_r = acc_i = 0.0
        for k in range(k0, k0 + substeps):
            gr, gi = p.exact_grad(fine_t[k], paths.states[:, k, :])
            acc_r = acc_r + gr
            acc_i = acc_i + gi
        x = paths.states[:, k0, :]
        fr = basis.fit(x, acc_r / substeps)
        fi = basis.fit(x, acc_i / substeps)
        zr, zi = p.exact_grad(grid.times[j], x)
        gaps[j] = np.sqrt(np.mean(np.sum((fr(x) - zr) ** 2 + (fi(x) - zi) ** 2, axis=1)))
        zb_r.append(fr)
        zb_i.append(fi)
    return ZbarTable(np.arange(grid.M), grid.times[:-1].copy(), zb_r, zb_i, gaps)


# solver versus oracle ---------------------------------------------------------


@dataclass
class GapReport:
    j: np.ndarray
    value_gap: np.ndarray  # mean |U_j - V_j|^2
    grad_gap: np.ndarray  # dt * mean |Z_j - W_j|^2
    max_value_gap: float
    max_grad_gap: float


def compare_solver_to_oracle(state: SolverState, aux: AuxSolution, sample_points) -> GapReport:
    """Mean-square gaps between trained networks and the auxiliary handles per step.

    ``sample_points`` is either an ``(N, d)`` array used at every step or a
    :class:`PathBatch` on the same grid, whose states at ``t_j`` are used.
    """
    if state.grid != aux.grid:
        raise InvalidInputError(f"grid mismatch: solver {state.grid}, oracle {aux.grid}")
    M = state.grid.M
    if isinstance(sample_points, PathBatch):
        if sample_points.increments.shape[1] != M:
            raise InvalidInputError("sample paths do not match the grid")
        pts = lambda j: sample_points.states[:, j, :]  # noqa: E731
    else:
        arr = np.atleast_2d(np.asarray(sample_points, dtype=float))
        if arr.shape[1] != state.problem.d:
            raise InvalidInputError("sample points have the wrong dimension")
        pts = lambda j: arr  # noqa: E731
    vg = np.empty(M + 1)
    zg = np.empty(M + 1)
    for j in range(M + 1):
        x = pts(j)
        ur, ui, zr, zi = state.steps[j].evaluate(x)
        vr, vi, wr, wi = aux.evaluate(j, x)
        vg[j] = np.mean((ur - vr) ** 2 + (ui - vi) ** 2)
        zg[j] = state.grid.dt * np.mean(np.sum((zr - wr) ** 2 + (zi - wi) ** 2, axis=-1))
    return GapReport(np.arange(M + 1), vg, zg, float(vg.max()), float(zg.max()))


# convergence probe ---------------------------------------------------------------


PROBE_COLUMNS = ("M", "dt", "rel_l2_error", "residual_rms")


@dataclass
class ProbeTable:
    Ms: list[int]
    dts: list[float]
    rel_errors: list[float]
    residuals: list[float]
    error_slope: Optional[float]
    residual_slope: Optional[float]
    run_errors: dict = field(default_factory=dict)

    def rows(self) -> list[tuple]:
        return list(zip(self.Ms, self.dts, self.rel_errors, self.residuals))


def convergence_probe(p: SchrodingerProblem, Ms: Sequence[int], config: TrainConfig, runs: int = 1,
                      residual_batch: int = 10_000) -> ProbeTable:
    """Solve on each grid, record the error at ``(0, x0)`` and the residual of the exact solution.

    With ``runs > 1`` the reported error per grid is the median over seeds
    ``config.seed, config.seed + 1, ...``. Slopes are fitted in log-log
    coordinates against ``dt`` when more than one grid is given.
    """
    _require_exact(p)
    Ms = [int(m) for m in Ms]
    if not Ms or any(m < 1 for m in Ms) or any(b <= a for a, b in zip(Ms, Ms[1:])):
        raise InvalidInputError(f"Ms must be positive and strictly increasing, got {Ms}")
    if runs < 1:
        raise InvalidInputError("runs must be >= 1")
    x0 = config.start_point(p.d)
    tr, ti = p.exact(0.0, x0)
    truth = ComplexValue(float(tr), float(ti))
    errs, resids, dts, run_errors = [], [], [], {}
    for m in Ms:
        grid = TimeGrid(m, p.horizon)
        per_run = []
        for r in range(runs):
            st = solve(p, grid, replace(config, seed=config.seed + r))
            per_run.append(relative_l2_error(truth, evaluate_point(st)))
        run_errors[m] = per_run
        errs.append(float(np.median(per_run)))
        pb = simulate_paths(config.seed, residual_batch, grid, x0, p.nu)
        resids.append(fk_residual(p, grid, pb).aggregate)
        dts.append(grid.dt)
        logger.info("probe M=%d: rel error %.4e, residual %.4e", m, errs[-1], resids[-1])
    es = rs = None
    if len(Ms) > 1:
        es = loglog_slope(dts, errs)
        rs = loglog_slope(dts, resids)
    return ProbeTable(Ms, dts, errs, resids, es, rs, run_errors)


# exact-solution loss --------------------------------------------------------------


def exact_step_loss(p: SchrodingerProblem, grid: TimeGrid, paths: PathBatch, j: int) -> float:
    """Per-sample ``L_j`` with exact ``(u, grad u)`` standing in for both steps."""
    _require_exact(p)
    t = grid.times
    x, xn = paths.states[:, j, :], paths.states[:, j + 1, :]
    ur, ui = p.exact(t[j], x)
    zr, zi = p.exact_grad(t[j], x)
    ur_n, ui_n = p.exact(t[j + 1], xn)
    zr_n, zi_n = p.exact_grad(t[j + 1], xn)
    args = (t[j], x, ur, ui, zr_n, zi_n, zr, zi, grid.dt, paths.increments[:, j, :], p.nu, p.f)
    return float(np.mean((ur_n - f_r_step(*args)) ** 2 + (ui_n - f_i_step(*args)) ** 2))


def exact_loss_order(p: SchrodingerProblem, Ms: Sequence[int], batch: int, seed: int = 0) -> tuple[list[float], float]:
    """Exact-solution loss averaged over steps on nested grids, with its log-log slope in ``dt``."""
    Ms = sorted(int(m) for m in Ms)
    finest = Ms[-1]
    if any(finest % m for m in Ms):
        raise InvalidInputError(f"grid sizes {Ms} must divide {finest}")
    fine = simulate_paths(seed, batch, TimeGrid(finest, p.horizon), np.zeros(p.d), p.nu)
    losses = []
    for m in Ms:
        g = TimeGrid(m, p.horizon)
        pb = coarsen(fine, finest // m)
        losses.append(float(np.mean([exact_step_loss(p, g, pb, j) for j in range(m)])))
    slope = loglog_slope([p.horizon / m for m in Ms], losses) if len(Ms) > 1 else math.nan
    return losses, slope
