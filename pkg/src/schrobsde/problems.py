"""Backward Schrödinger problems ``i u_t = (nu/2) Lap u + f(t, x, u)``, ``u(T, .) = G``.

Complex quantities are always carried as separate real and imaginary parts.
Vectorised callables take ``x`` with trailing axis of length ``d`` and return
``(re, im)`` array pairs; the scalar helpers (``eval_*``) wrap them into
:class:`ComplexValue`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidInputError, UnsupportedOperationError

Pair = tuple[np.ndarray, np.ndarray]
Nonlinearity = Callable[[object, np.ndarray, np.ndarray, np.ndarray], Pair]
NonlinearityJac = Callable[
    [object, np.ndarray, np.ndarray, np.ndarray],
    tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
]
SpaceFn = Callable[[np.ndarray], Pair]
SpaceTimeFn = Callable[[object, np.ndarray], Pair]

DEFAULT_HD_DIM = 8


@dataclass(frozen=True)
class ComplexValue:
    re: float
    im: float

    @classmethod
    def from_complex(cls, z: complex) -> "ComplexValue":
        return cls(float(z.real), float(z.imag))

    def __complex__(self) -> complex:
        return complex(self.re, self.im)

    def conj(self) -> "ComplexValue":
        return ComplexValue(self.re, -self.im)

    def __iter__(self):
        yield self.re
        yield self.im


def c_modsq(u: ComplexValue) -> float:
    return u.re * u.re + u.im * u.im


@dataclass(frozen=True)
class SchrodingerProblem:
    """One instance of the backward (non)linear Schrödinger Cauchy problem.

    ``nonlinearity(t, x, ur, ui) -> (fr, fi)``; ``nonlinearity_du`` returns the
    partials ``(dfr/dur, dfr/dui, dfi/dur, dfi/dui)`` used when training
    back-propagates through ``f``. Both ``terminal_grad`` and
    ``nonlinearity_du`` fall back to central differences when omitted, which is
    only meant for user-supplied problems.
    """

    name: str
    d: int
    nu: float
    horizon: float
    nonlinearity: Nonlinearity
    terminal: SpaceFn
    terminal_grad: Optional[Callable[[np.ndarray], Pair]] = None
    nonlinearity_du: Optional[NonlinearityJac] = None
    exact: Optional[SpaceTimeFn] = None
    exact_grad: Optional[SpaceTimeFn] = None
    linear: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.d < 1:
            raise InvalidInputError(f"dimension must be >= 1, got {self.d}")
        if not self.nu > 0:
            raise InvalidInputError(f"nu must be positive, got {self.nu}")
        if not self.horizon > 0:
            raise InvalidInputError(f"horizon must be positive, got {self.horizon}")

    # vectorised accessors -------------------------------------------------

    def f(self, t, x, ur, ui) -> Pair:
        return self.nonlinearity(t, x, ur, ui)

    def f_du(self, t, x, ur, ui):
        if self.nonlinearity_du is not None:
            return self.nonlinearity_du(t, x, ur, ui)
        h = 1e-6
        fr_p, fi_p = self.nonlinearity(t, x, ur + h, ui)
        fr_m, fi_m = self.nonlinearity(t, x, ur - h, ui)
        dfr_dur, dfi_dur = (fr_p - fr_m) / (2 * h), (fi_p - fi_m) / (2 * h)
        fr_p, fi_p = self.nonlinearity(t, x, ur, ui + h)
        fr_m, fi_m = self.nonlinearity(t, x, ur, ui - h)
        dfr_dui, dfi_dui = (fr_p - fr_m) / (2 * h), (fi_p - fi_m) / (2 * h)
        return dfr_dur, dfr_dui, dfi_dur, dfi_dui

    def g(self, x) -> Pair:
        return self.terminal(x)

    def grad_g(self, x) -> Pair:
        if self.terminal_grad is not None:
            return self.terminal_grad(x)
        return _fd_gradient(self.terminal, np.asarray(x, dtype=float))

    @property
    def has_exact(self) -> bool:
        return self.exact is not None


def _fd_gradient(fn: SpaceFn, x: np.ndarray, step: float = 1e-6) -> Pair:
    d = x.shape[-1]
    gr = np.empty(x.shape)
    gi = np.empty(x.shape)
    for k in range(d):
        e = np.zeros(d)
        e[k] = step
        pr, pi = fn(x + e)
        mr, mi = fn(x - e)
        gr[..., k] = (pr - mr) / (2 * step)
        gi[..., k] = (pi - mi) / (2 * step)
    return gr, gi


def _check_point(p: SchrodingerProblem, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1 or x.shape[0] != p.d:
        raise InvalidInputError(f"{p.name}: expected a point of length {p.d}, got shape {x.shape}")
    return x


# scalar helpers ------------------------------------------------------------


def eval_f(p: SchrodingerProblem, t: float, x, u: ComplexValue) -> ComplexValue:
    x = _check_point(p, x)
    fr, fi = p.f(t, x, np.float64(u.re), np.float64(u.im))
    return ComplexValue(float(fr), float(fi))


def eval_terminal(p: SchrodingerProblem, x) -> ComplexValue:
    x = _check_point(p, x)
    gr, gi = p.g(x)
    return ComplexValue(float(gr), float(gi))


def eval_terminal_grad(p: SchrodingerProblem, x) -> list[ComplexValue]:
    x = _check_point(p, x)
    gr, gi = p.grad_g(x)
    return [ComplexValue(float(a), float(b)) for a, b in zip(gr, gi)]


def eval_exact(p: SchrodingerProblem, t: float, x) -> ComplexValue:
    if p.exact is None:
        raise UnsupportedOperationError(f"{p.name} has no closed-form solution")
    x = _check_point(p, x)
    ur, ui = p.exact(t, x)
    return ComplexValue(float(ur), float(ui))


def pde_residual(p: SchrodingerProblem, t: float, x, fd_step: float) -> ComplexValue:
    """Central-difference value of ``i u_t - (nu/2) Lap u - f(t, x, u)`` at the exact solution."""
    if p.exact is None:
        raise UnsupportedOperationError(f"{p.name} has no closed-form solution")
    x = _check_point(p, x)
    h = float(fd_step)
    if not h > 0:
        raise InvalidInputError("fd_step must be positive")
    if t - h < 0 or t + h > p.horizon:
        raise InvalidInputError(f"t +/- fd_step must lie in [0, {p.horizon}]")
    u0r, u0i = p.exact(t, x)
    upr, upi = p.exact(t + h, x)
    umr, umi = p.exact(t - h, x)
    dt_r = (upr - umr) / (2 * h)
    dt_i = (upi - umi) / (2 * h)
    lap_r = 0.0
    lap_i = 0.0
    for k in range(p.d):
        e = np.zeros(p.d)
        e[k] = h
        pr, pi = p.exact(t, x + e)
        mr, mi = p.exact(t, x - e)
        lap_r += (pr - 2 * u0r + mr) / (h * h)
        lap_i += (pi - 2 * u0i + mi) / (h * h)
    fr, fi = p.f(t, x, u0r, u0i)
    # i * (dt_r + i dt_i) = -dt_i + i dt_r
    res_r = -dt_i - 0.5 * p.nu * lap_r - fr
    res_i = dt_r - 0.5 * p.nu * lap_i - fi
    return ComplexValue(float(res_r), float(res_i))


def relative_l2_error(truth: ComplexValue, estimate: ComplexValue) -> float:
    norm2 = c_modsq(truth)
    if norm2 == 0.0:
        raise ZeroDivisionError("relative error against a zero reference value")
    dr = estimate.re - truth.re
    di = estimate.im - truth.im
    return math.sqrt((dr * dr + di * di) / norm2)


# benchmarks ----------------------------------------------------------------


def _zero_f(t, x, ur, ui):
    z = np.zeros_like(np.asarray(ur, dtype=float))
    return z, z.copy()


def _zero_f_du(t, x, ur, ui):
    z = np.zeros_like(np.asarray(ur, dtype=float))
    return z, z, z, z


def _cubic(t, x, ur, ui):
    m = ur * ur + ui * ui
    return m * ur, m * ui


def _cubic_du(t, x, ur, ui):
    # f = |u|^2 u split into real parts
    dfr_dur = 3 * ur * ur + ui * ui
    dfr_dui = 2 * ur * ui
    dfi_dur = 2 * ur * ui
    dfi_dui = ur * ur + 3 * ui * ui
    return dfr_dur, dfr_dui, dfi_dur, dfi_dui


def _sech(z):
    return 1.0 / np.cosh(z)


def plane_wave_problem(d: int, horizon: float = 0.5, name: Optional[str] = None) -> SchrodingerProblem:
    """Linear problem with ``G(x) = exp(i k sum(x))``, ``k = sqrt(2/d)``."""
    k = math.sqrt(2.0 / d)
    T = horizon

    def terminal(x):
        s = np.sum(x, axis=-1)
        return np.cos(k * s), np.sin(k * s)

    def terminal_grad(x):
        gr, gi = terminal(x)
        ones = np.ones(x.shape)
        # grad e^{iks} = i k e^{iks} in every coordinate
        return -k * gi[..., None] * ones, k * gr[..., None] * ones

    def exact(t, x):
        phase = k * np.sum(x, axis=-1) - (T - np.asarray(t))
        return np.cos(phase), np.sin(phase)

    def exact_grad(t, x):
        ur, ui = exact(t, x)
        ones = np.ones(x.shape)
        return -k * ui[..., None] * ones, k * ur[..., None] * ones

    return SchrodingerProblem(
        name=name or ("lin1d" if d == 1 else "lin-hd"),
        d=d, nu=1.0, horizon=T,
        nonlinearity=_zero_f, nonlinearity_du=_zero_f_du,
        terminal=terminal, terminal_grad=terminal_grad,
        exact=exact, exact_grad=exact_grad, linear=True,
        meta={"lipschitz": 0.0},
    )


def soliton_problem(horizon: float = 0.5) -> SchrodingerProblem:
    """Cubic NLS in 1D with the travelling soliton ``sech(x - (T - t)) e^{ix}``."""
    T = horizon

    def profile(xi, x):
        s = _sech(xi)
        return s * np.cos(x), s * np.sin(x)

    def profile_grad(xi, x):
        s = _sech(xi)
        th = np.tanh(xi)
        c, sn = np.cos(x), np.sin(x)
        # e^{ix} (i s - s tanh)
        a_r = -s * th
        a_i = s
        return a_r * c - a_i * sn, a_r * sn + a_i * c

    def terminal(x):
        x1 = x[..., 0]
        return profile(x1, x1)

    def terminal_grad(x):
        x1 = x[..., 0]
        gr, gi = profile_grad(x1, x1)
        return gr[..., None], gi[..., None]

    def exact(t, x):
        x1 = x[..., 0]
        return profile(x1 - (T - np.asarray(t)), x1)

    def exact_grad(t, x):
        x1 = x[..., 0]
        gr, gi = profile_grad(x1 - (T - np.asarray(t)), x1)
        return gr[..., None], gi[..., None]

    return SchrodingerProblem(
        name="nls1d", d=1, nu=1.0, horizon=T,
        nonlinearity=_cubic, nonlinearity_du=_cubic_du,
        terminal=terminal, terminal_grad=terminal_grad,
        exact=exact, exact_grad=exact_grad,
        meta={"lipschitz": 3.0},
    )


def manufactured_nls_problem(d: int, horizon: float = 0.5) -> SchrodingerProblem:
    """Cubic NLS with forcing chosen so ``u = e^{i(T - t + S)} sech(S)``, ``S = mean(x)``."""
    T = horizon

    def _solution(t, S):
        theta = T - np.asarray(t) + S
        s = _sech(S)
        return s * np.cos(theta), s * np.sin(theta)

    def forcing(t, x):
        S = np.mean(x, axis=-1)
        s = _sech(S)
        th = np.tanh(S)
        wr, wi = _solution(t, S)
        # (1 + s^2/d + i tanh/d) * w - s^2 * w, with w = e^{i theta} sech(S)
        cr = 1.0 + s * s / d - s * s
        ci = th / d
        return cr * wr - ci * wi, cr * wi + ci * wr

    def nonlinearity(t, x, ur, ui):
        fr, fi = _cubic(t, x, ur, ui)
        gr, gi = forcing(t, x)
        return fr + gr, fi + gi

    def exact(t, x):
        return _solution(t, np.mean(x, axis=-1))

    def exact_grad(t, x):
        S = np.mean(x, axis=-1)
        wr, wi = _solution(t, S)
        th = np.tanh(S)
        # d/dS [e^{i theta} sech S] = (i - tanh S) w, each coordinate carries 1/d
        gr = (-th * wr - wi) / d
        gi = (-th * wi + wr) / d
        ones = np.ones(np.shape(x))
        return gr[..., None] * ones, gi[..., None] * ones

    def terminal(x):
        return exact(T, x)

    def terminal_grad(x):
        return exact_grad(T, x)

    return SchrodingerProblem(
        name="nls-manufactured", d=d, nu=1.0, horizon=T,
        nonlinearity=nonlinearity, nonlinearity_du=_cubic_du,
        terminal=terminal, terminal_grad=terminal_grad,
        exact=exact, exact_grad=exact_grad,
        meta={"lipschitz": 3.0},
    )


REGISTRY = ("lin1d", "nls1d", "lin-hd", "nls-manufactured")
_PARAMETRIC = ("lin-hd", "nls-manufactured")


def get_problem(name: str, dim: Optional[int] = None, horizon: float = 0.5) -> SchrodingerProblem:
    """Look up a built-in benchmark; ``dim`` only applies to the parametric ones."""
    if name not in REGISTRY:
        raise InvalidInputError(f"unknown problem {name!r}; available: {', '.join(REGISTRY)}")
    if dim is not None and dim < 1:
        raise InvalidInputError(f"--dim must be >= 1, got {dim}")
    if name not in _PARAMETRIC and dim not in (None, 1):
        raise InvalidInputError(f"{name} is one-dimensional; --dim does not apply")
    if name == "lin1d":
        return plane_wave_problem(1, horizon, name="lin1d")
    if name == "nls1d":
        return soliton_problem(horizon)
    d = DEFAULT_HD_DIM if dim is None else dim
    if name == "lin-hd":
        return plane_wave_problem(d, horizon, name="lin-hd")
    return manufactured_nls_problem(d, horizon)
