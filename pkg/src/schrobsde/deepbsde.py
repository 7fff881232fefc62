"""Backward-in-time learning scheme for the split Schrödinger BSDE.

For ``j = M-1, ..., 0`` four networks ``(U^R, U^I, Z^R, Z^I)`` at ``t_j`` are
fitted so that the one-step maps ``F^R``/``F^I`` reproduce the already trained
values at ``t_{j+1}``. Step ``M`` is the analytic terminal condition.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from ._alloc import tune_allocator
from .errors import InvalidInputError, TrainingDivergenceError
from .netcore import AdamState, GatedNetConfig, GatedNetParams, adam_step, net_backward, net_forward, net_init
from .problems import ComplexValue, SchrodingerProblem, relative_l2_error
from .stochastics import PathBatch, TimeGrid, make_rng

logger = logging.getLogger(__name__)

NET_NAMES = ("u_r", "u_i", "z_r", "z_i")
DIVERGENCE_LOSS = 1e6
DIVERGENCE_PATIENCE = 10


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 4096
    epochs: int = 30
    steps_per_epoch: int = 100
    lr: float = 1e-3
    # multiplicative factor applied to the learning rate after every epoch
    lr_decay: float = 1.0
    seed: int = 0
    x0: Optional[tuple[float, ...]] = None
    warm_start: bool = True
    # regression steps fitting the first trained step to (G, grad G) before its loss training
    terminal_fit_steps: int = 500
    h: int = 10
    dtype: str = "float32"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch < 1:
            raise InvalidInputError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise InvalidInputError("epochs and steps_per_epoch must be >= 1")
        if not self.lr > 0:
            raise InvalidInputError(f"lr must be positive, got {self.lr}")
        if self.terminal_fit_steps < 0:
            raise InvalidInputError("terminal_fit_steps must be >= 0")
        if self.h < 1:
            raise InvalidInputError(f"h must be >= 1, got {self.h}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidInputError(f"dtype must be float32 or float64, got {self.dtype}")

    def start_point(self, d: int) -> np.ndarray:
        if self.x0 is None:
            return np.zeros(d)
        x0 = np.asarray(self.x0, dtype=float).ravel()
        if x0.size == 1 and d > 1:
            x0 = np.full(d, x0[0])
        if x0.size != d:
            raise InvalidInputError(f"x0 has length {x0.size}, problem dimension is {d}")
        return x0


# per-step function quadruples ------------------------------------------------


class TerminalStep:
    """``(G^R, G^I, grad G^R, grad G^I)`` wrapped to look like a trained step."""

    def __init__(self, problem: SchrodingerProblem):
        self.problem = problem

    def evaluate(self, x: np.ndarray):
        x = np.asarray(x)
        ur, ui = self.problem.g(x)
        zr, zi = self.problem.grad_g(x)
        return ur, ui, zr, zi


@dataclass
class NetStep:
    u_r: GatedNetParams
    u_i: GatedNetParams
    z_r: GatedNetParams
    z_i: GatedNetParams

    def nets(self) -> dict[str, GatedNetParams]:
        return {"u_r": self.u_r, "u_i": self.u_i, "z_r": self.z_r, "z_i": self.z_i}

    def evaluate(self, x: np.ndarray):
        x = np.asarray(x)
        return (
            net_forward(self.u_r, x)[:, 0],
            net_forward(self.u_i, x)[:, 0],
            net_forward(self.z_r, x),
            net_forward(self.z_i, x),
        )

    def copy(self) -> "NetStep":
        return NetStep(*(n.copy() for n in (self.u_r, self.u_i, self.z_r, self.z_i)))


StepNets = TerminalStep | NetStep


def init_step(d: int, h: int, seed: int, j: int, dtype="float32") -> NetStep:
    vcfg = GatedNetConfig.value_net(d, h)
    zcfg = GatedNetConfig.gradient_net(d, h)
    nets = []
    for k, cfg in enumerate((vcfg, vcfg, zcfg, zcfg)):
        ss = np.random.SeedSequence(seed, spawn_key=(j, 1000 + k))
        nets.append(net_init(cfg, ss, dtype=np.dtype(dtype)))
    return NetStep(*nets)


@dataclass
class SolverState:
    problem: SchrodingerProblem
    grid: TimeGrid
    config: TrainConfig
    steps: list  # index j -> StepNets, steps[M] is terminal
    training_log: dict[int, list[float]] = field(default_factory=dict)

    @property
    def x0(self) -> np.ndarray:
        return self.config.start_point(self.problem.d)


# one-step iteration functions ------------------------------------------------


def f_r_step(t, x, u_r, u_i, zr_next, zi_next, zr_cur, zi_cur, dt, dw, nu, f):
    """``F^R``: ``u^R + sqrt(nu)/2 (z^R_+ + z^I_+).dw + sqrt(nu)/2 (z^R - z^I).dw + f^I dt``.

    ``f(t, x, ur, ui) -> (fr, fi)``. ``z*`` and ``dw`` share their trailing axis.
    """
    c = 0.5 * math.sqrt(nu)
    _, fi = f(t, x, u_r, u_i)
    return (
        u_r
        + c * np.sum((np.asarray(zr_next) + zi_next) * dw, axis=-1)
        + c * np.sum((np.asarray(zr_cur) - zi_cur) * dw, axis=-1)
        + fi * dt
    )


def f_i_step(t, x, u_r, u_i, zr_next, zi_next, zr_cur, zi_cur, dt, dw, nu, f):
    """``F^I``: ``u^I - sqrt(nu)/2 (z^R_+ - z^I_+).dw + sqrt(nu)/2 (z^R + z^I).dw - f^R dt``."""
    c = 0.5 * math.sqrt(nu)
    fr, _ = f(t, x, u_r, u_i)
    return (
        u_i
        - c * np.sum((np.asarray(zr_next) - zi_next) * dw, axis=-1)
        + c * np.sum((np.asarray(zr_cur) + zi_cur) * dw, axis=-1)
        - fr * dt
    )


@dataclass
class StepTargets:
    """Frozen part of the loss: everything that depends only on step ``j+1``.

    ``y_r = U^R_{j+1}(X_{j+1}) - sqrt(nu)/2 (Z^R_{j+1} + Z^I_{j+1}).dW`` and
    ``y_i = U^I_{j+1}(X_{j+1}) + sqrt(nu)/2 (Z^R_{j+1} - Z^I_{j+1}).dW``.
    """

    x: np.ndarray
    dw: np.ndarray
    y_r: np.ndarray
    y_i: np.ndarray
    t: float
    dt: float
    collapsed: bool = False


def make_targets(nxt: StepNets, x: np.ndarray, dw: np.ndarray, x_next: np.ndarray,
                 t: float, dt: float, nu: float, collapsed: bool = False) -> StepTargets:
    ur, ui, zr, zi = nxt.evaluate(x_next)
    c = 0.5 * math.sqrt(nu)
    y_r = ur - c * np.sum((zr + zi) * dw, axis=-1)
    y_i = ui + c * np.sum((zr - zi) * dw, axis=-1)
    return StepTargets(x=x, dw=dw, y_r=y_r, y_i=y_i, t=t, dt=dt, collapsed=collapsed)


def loss_and_grads(cur: NetStep, tg: StepTargets, problem: SchrodingerProblem, need_grads: bool = True):
    """Empirical ``L_j`` and its gradients with respect to the current networks only.

    With ``tg.collapsed`` all samples share one starting point, so the current
    networks are evaluated once and the per-sample sensitivities are summed.
    """
    nu = problem.nu
    c = 0.5 * math.sqrt(nu)
    dt = tg.dt
    x_eval = tg.x[:1] if tg.collapsed else tg.x
    if need_grads:
        out_ur, tape_ur = net_forward(cur.u_r, x_eval, record=True)
        out_ui, tape_ui = net_forward(cur.u_i, x_eval, record=True)
        zr, tape_zr = net_forward(cur.z_r, x_eval, record=True)
        zi, tape_zi = net_forward(cur.z_i, x_eval, record=True)
    else:
        out_ur, out_ui = net_forward(cur.u_r, x_eval), net_forward(cur.u_i, x_eval)
        zr, zi = net_forward(cur.z_r, x_eval), net_forward(cur.z_i, x_eval)
    ur, ui = out_ur[:, 0], out_ui[:, 0]
    fr, fi = problem.f(tg.t, x_eval, ur, ui)
    dw = tg.dw
    zd = np.sum((zr - zi) * dw, axis=-1)
    zs = np.sum((zr + zi) * dw, axis=-1)
    e_r = tg.y_r - (ur + c * zd + fi * dt)
    e_i = tg.y_i - (ui + c * zs - fr * dt)
    B = e_r.shape[0]
    loss = float(np.mean(e_r * e_r + e_i * e_i, dtype=np.float64))
    if not need_grads:
        return loss, None

    g_r = (-2.0 / B) * e_r  # dL/dF^R
    g_i = (-2.0 / B) * e_i  # dL/dF^I
    dfr_dur, dfr_dui, dfi_dur, dfi_dui = problem.f_du(tg.t, x_eval, ur, ui)
    up_ur = g_r * (1.0 + dfi_dur * dt) - g_i * dfr_dur * dt
    up_ui = g_r * dfi_dui * dt + g_i * (1.0 - dfr_dui * dt)
    up_zr = c * (g_r + g_i)[:, None] * dw
    up_zi = c * (g_i - g_r)[:, None] * dw
    if tg.collapsed:
        up_ur = np.sum(up_ur, keepdims=True)
        up_ui = np.sum(up_ui, keepdims=True)
        up_zr = np.sum(up_zr, axis=0, keepdims=True)
        up_zi = np.sum(up_zi, axis=0, keepdims=True)
    dtype = cur.u_r.dtype
    grads = {
        "u_r": net_backward(tape_ur, np.asarray(up_ur, dtype=dtype).reshape(-1, 1)),
        "u_i": net_backward(tape_ui, np.asarray(up_ui, dtype=dtype).reshape(-1, 1)),
        "z_r": net_backward(tape_zr, np.asarray(up_zr, dtype=dtype)),
        "z_i": net_backward(tape_zi, np.asarray(up_zi, dtype=dtype)),
    }
    return loss, grads


def step_loss(j: int, nxt: StepNets, cur: NetStep, paths: PathBatch, problem: SchrodingerProblem,
              grid: TimeGrid, need_grads: bool = True):
    """``L_j`` on a stored path batch; returns ``(loss, grads)``."""
    if not 0 <= j < paths.increments.shape[1]:
        raise InvalidInputError(f"path batch does not cover step {j}")
    dtype = cur.u_r.dtype
    x = paths.states[:, j, :].astype(dtype)
    x_next = paths.states[:, j + 1, :].astype(dtype)
    dw = paths.increments[:, j, :].astype(dtype)
    tg = make_targets(nxt, x, dw, x_next, grid.times[j], grid.dt, problem.nu)
    loss, grads = loss_and_grads(cur, tg, problem, need_grads)
    if not np.isfinite(loss):
        raise TrainingDivergenceError(j, 0, loss)
    return loss, grads


def sample_step(rng: np.random.Generator, j: int, grid: TimeGrid, x0: np.ndarray, nu: float,
                batch: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw ``(X_{t_j}, dW_j, X_{t_{j+1}})`` for a fresh batch of Euler paths.

    Only the two marginals touched by step ``j`` are simulated; ``W_{t_j}`` is
    drawn directly as ``N(0, t_j)``, which has the law of the summed increments.
    """
    d = x0.shape[0]
    t_j = grid.times[j]
    w = rng.standard_normal((batch, d)) * math.sqrt(t_j)
    dw = rng.standard_normal((batch, d)) * math.sqrt(grid.dt)
    x = x0 + math.sqrt(nu) * w
    x_next = x + math.sqrt(nu) * dw
    return x.astype(dtype), dw.astype(dtype), x_next.astype(dtype)


def fit_terminal(cur: NetStep, terminal: TerminalStep, config: TrainConfig, grid: TimeGrid,
                 rng: np.random.Generator) -> float:
    """Regress the networks on ``(G, grad G)`` at samples of ``X_{t_{M-1}}``.

    This is the warm start of the first trained step: every later step starts
    from its trained neighbour, and this one starts from the terminal data.
    Returns the last regression loss.
    """
    problem = terminal.problem
    dtype = np.dtype(config.dtype)
    x0 = config.start_point(problem.d)
    states = {name: AdamState() for name in NET_NAMES}
    nets = cur.nets()
    loss = math.nan
    for _ in range(config.terminal_fit_steps):
        x, _, _ = sample_step(rng, grid.M - 1, grid, x0, problem.nu, config.batch, dtype)
        targets = dict(zip(NET_NAMES, terminal.evaluate(x)))
        targets["u_r"] = targets["u_r"][:, None]
        targets["u_i"] = targets["u_i"][:, None]
        loss = 0.0
        grads = {}
        for name in NET_NAMES:
            out, tape = net_forward(nets[name], x, record=True)
            err = out - targets[name].astype(dtype, copy=False)
            loss += float(np.mean(np.sum(err * err, axis=1), dtype=np.float64))
            grads[name] = net_backward(tape, err * (2.0 / x.shape[0]))
        for name in NET_NAMES:
            adam_step(nets[name], grads[name], states[name], config.lr, config.beta1, config.beta2, config.eps)
    return loss


def initial_step(j: int, nxt: StepNets, config: TrainConfig, problem: SchrodingerProblem,
                 grid: TimeGrid) -> NetStep:
    """Starting parameters for step ``j``: a copy of step ``j+1`` under warm start,
    otherwise a fresh seeded draw (fitted to the terminal data when ``j = M-1``)."""
    if config.warm_start and isinstance(nxt, NetStep):
        return nxt.copy()
    cur = init_step(problem.d, config.h, config.seed, j, np.dtype(config.dtype))
    if config.warm_start and isinstance(nxt, TerminalStep) and config.terminal_fit_steps:
        fit_terminal(cur, nxt, config, grid, make_rng(config.seed, j, 1))
    return cur


def train_step(j: int, nxt: StepNets, config: TrainConfig, problem: SchrodingerProblem, grid: TimeGrid,
               log: Optional[list] = None) -> NetStep:
    """Fit the four networks at ``t_j`` against the frozen step ``j+1``."""
    dtype = np.dtype(config.dtype)
    x0 = config.start_point(problem.d)
    cur = initial_step(j, nxt, config, problem, grid)
    states = {name: AdamState() for name in NET_NAMES}
    rng = make_rng(config.seed, j, 0)
    collapsed = j == 0
    t_j = grid.times[j]
    lr = config.lr
    streak = 0
    epoch_losses = []
    for epoch in range(config.epochs):
        total = 0.0
        for _ in range(config.steps_per_epoch):
            x, dw, x_next = sample_step(rng, j, grid, x0, problem.nu, config.batch, dtype)
            tg = make_targets(nxt, x, dw, x_next, t_j, grid.dt, problem.nu, collapsed)
            tg.y_r = tg.y_r.astype(dtype, copy=False)
            tg.y_i = tg.y_i.astype(dtype, copy=False)
            loss, grads = loss_and_grads(cur, tg, problem)
            if not math.isfinite(loss):
                raise TrainingDivergenceError(j, epoch, loss)
            streak = streak + 1 if loss > DIVERGENCE_LOSS else 0
            if streak >= DIVERGENCE_PATIENCE:
                raise TrainingDivergenceError(j, epoch, loss)
            nets = cur.nets()
            for name in NET_NAMES:
                adam_step(nets[name], grads[name], states[name], lr, config.beta1, config.beta2, config.eps)
            total += loss
        epoch_losses.append(total / config.steps_per_epoch)
        lr *= config.lr_decay
    if log is not None:
        log.extend(epoch_losses)
    return cur


def solve(problem: SchrodingerProblem, grid: TimeGrid, config: TrainConfig,
          progress: Optional[Callable[[int, list[float]], None]] = None) -> SolverState:
    """Train steps ``M-1, ..., 0`` in order and return every step's networks."""
    if abs(grid.horizon - problem.horizon) > 1e-12:
        raise InvalidInputError(f"grid horizon {grid.horizon} != problem horizon {problem.horizon}")
    tune_allocator()
    steps: list = [None] * (grid.M + 1)
    steps[grid.M] = TerminalStep(problem)
    state = SolverState(problem, grid, config, steps)
    for j in range(grid.M - 1, -1, -1):
        t0 = time.perf_counter()
        log: list[float] = []
        steps[j] = train_step(j, steps[j + 1], config, problem, grid, log)
        state.training_log[j] = log
        logger.info("step j=%d trained: loss %.3e -> %.3e (%.1fs)", j, log[0], log[-1], time.perf_counter() - t0)
        if progress is not None:
            progress(j, log)
    return state


# evaluation -------------------------------------------------------------------


def evaluate_point(state: SolverState, x0=None) -> ComplexValue:
    x = state.x0 if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    ur, ui, _, _ = state.steps[0].evaluate(x[None, :])
    return ComplexValue(float(ur[0]), float(ui[0]))


SLICE_AXES = ("e1", "diag")
SLICE_COLUMNS = ("x1", "true_re", "true_im", "est_re", "est_im")


def slice_points(axis: str, grid_1d, d: int) -> np.ndarray:
    x1 = np.asarray(grid_1d, dtype=float)
    if axis == "e1":
        pts = np.zeros((x1.size, d))
        pts[:, 0] = x1
    elif axis == "diag":
        pts = np.repeat(x1[:, None], d, axis=1)
    else:
        raise InvalidInputError(f"slice axis must be one of {SLICE_AXES}, got {axis!r}")
    return pts


def evaluate_slice(state: SolverState, axis: str, grid_1d) -> np.ndarray:
    """Rows ``(x1, true_re, true_im, est_re, est_im)`` along ``(x1,0,..,0)`` or ``(x1,..,x1)``.

    True columns are NaN when the problem has no closed-form solution.
    """
    pts = slice_points(axis, grid_1d, state.problem.d)
    ur, ui, _, _ = state.steps[0].evaluate(pts)
    if state.problem.exact is not None:
        tr, ti = state.problem.exact(0.0, pts)
    else:
        tr = ti = np.full(pts.shape[0], np.nan)
    return np.column_stack([pts[:, 0], tr, ti, ur, ui]).astype(np.float64)


@dataclass
class BenchResult:
    seeds: list[int]
    values: list[ComplexValue]
    mean: ComplexValue
    std: ComplexValue
    truth: Optional[ComplexValue]
    rel_error: Optional[float]


def bench_runs(problem: SchrodingerProblem, grid: TimeGrid, config: TrainConfig, runs: int,
               seeds: Optional[Sequence[int]] = None) -> BenchResult:
    """Independent solves; mean, sample std and relative error of the mean at ``(0, x0)``."""
    if runs < 2:
        raise InvalidInputError("bench needs at least 2 runs")
    if seeds is None:
        seeds = [config.seed + r for r in range(runs)]
    if len(seeds) != runs:
        raise InvalidInputError("need one seed per run")
    values = []
    for r, s in enumerate(seeds):
        st = solve(problem, grid, replace(config, seed=int(s)))
        values.append(evaluate_point(st))
        logger.info("bench run %d/%d (seed %d): %s", r + 1, runs, s, values[-1])
    arr = np.array([[v.re, v.im] for v in values])
    mean = ComplexValue(*arr.mean(axis=0))
    std = ComplexValue(*arr.std(axis=0, ddof=1))
    truth = rel = None
    if problem.exact is not None:
        x0 = config.start_point(problem.d)
        tr, ti = problem.exact(0.0, x0)
        truth = ComplexValue(float(tr), float(ti))
        rel = relative_l2_error(truth, mean)
    return BenchResult(list(map(int, seeds)), values, mean, std, truth, rel)
