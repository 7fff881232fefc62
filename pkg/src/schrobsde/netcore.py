"""Gated dual-branch network with a hand-written reverse pass, and Adam.

Architecture (per sample ``x`` in R^d)::

    a = tanh(A2 softplus(A1 x))          # smooth branch
    b = sin (B2 softplus(B1 x))          # oscillatory branch
    alpha = sigmoid(g . x + g0)          # scalar gate from the raw input
    out = F (alpha a + (1 - alpha) b) + f0

Value networks use hidden width ``d + h`` and a scalar output; gradient
networks use ``d * h`` and output a vector in R^d.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, StaleTapeError

PARAM_NAMES = (
    "a1_w", "a1_b", "a2_w", "a2_b",
    "b1_w", "b1_b", "b2_w", "b2_b",
    "gate_w", "gate_b",
    "fuse_w", "fuse_b",
)

_version_counter = itertools.count(1)


@dataclass(frozen=True)
class GatedNetConfig:
    in_dim: int
    out_dim: int
    hidden: int
    h: int

    def __post_init__(self):
        if self.in_dim < 1 or self.hidden < 1 or self.h < 1:
            raise InvalidInputError(f"invalid network config {self}")
        if self.out_dim not in (1, self.in_dim):
            raise InvalidInputError(f"out_dim must be 1 or {self.in_dim}, got {self.out_dim}")

    @classmethod
    def value_net(cls, d: int, h: int) -> "GatedNetConfig":
        return cls(in_dim=d, out_dim=1, hidden=d + h, h=h)

    @classmethod
    def gradient_net(cls, d: int, h: int) -> "GatedNetConfig":
        return cls(in_dim=d, out_dim=d, hidden=d * h, h=h)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, H, o = self.in_dim, self.hidden, self.out_dim
        return {
            "a1_w": (d, H), "a1_b": (H,), "a2_w": (H, H), "a2_b": (H,),
            "b1_w": (d, H), "b1_b": (H,), "b2_w": (H, H), "b2_b": (H,),
            "gate_w": (d, 1), "gate_b": (1,),
            "fuse_w": (H, o), "fuse_b": (o,),
        }

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())


@dataclass
class GatedNetParams:
    """Weights of one network. ``version`` changes whenever the arrays are updated."""

    config: GatedNetConfig
    arrays: dict[str, np.ndarray]
    version: int = field(default_factory=lambda: next(_version_counter))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def touch(self) -> None:
        self.version = next(_version_counter)

    def copy(self) -> "GatedNetParams":
        return GatedNetParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "GatedNetParams":
        return GatedNetParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    @property
    def dtype(self):
        return self.arrays["fuse_w"].dtype

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_NAMES])


def net_init(config: GatedNetConfig, seed, dtype=np.float64) -> GatedNetParams:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``.

    The first layer of the sine branch is drawn from ``U(-sqrt(3/fan_in), sqrt(3/fan_in))``
    instead, so its pre-activations have roughly unit variance for unit-scale inputs.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in config.shapes().items():
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape)
            continue
        fan_in, fan_out = shape
        if name == "b1_w":
            lim = np.sqrt(3.0 / fan_in)
        else:
            lim = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[name] = rng.uniform(-lim, lim, size=shape)
    return GatedNetParams(config, {k: v.astype(dtype) for k, v in arrays.items()})


def zero_params(config: GatedNetConfig, dtype=np.float64) -> GatedNetParams:
    return GatedNetParams(config, {k: np.zeros(s, dtype=dtype) for k, s in config.shapes().items()})


def softplus(z: np.ndarray) -> np.ndarray:
    # |z| capped at 80 so exp(-|z|) stays a normal float32; the tail it drops is < 2e-35
    return np.maximum(z, 0) + np.log1p(np.exp(-np.minimum(np.abs(z), 80.0)))


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _gate(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # (alpha, 1 - alpha), each accurate in its own tail
    e = np.exp(-np.minimum(np.abs(z), 80.0))
    small = np.maximum(e / (1.0 + e), np.finfo(e.dtype).tiny)
    big = 1.0 / (1.0 + e)
    pos = z >= 0
    return np.where(pos, big, small), np.where(pos, small, big)


@dataclass
class Tape:
    """Forward intermediates, stored feature-major: ``(features, batch)``."""

    params: GatedNetParams
    version: int
    x: np.ndarray
    za1: np.ndarray
    sa1: np.ndarray
    a: np.ndarray
    zb1: np.ndarray
    sb1: np.ndarray
    zb2: np.ndarray
    b: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    blend: np.ndarray


def _affine_in(w: np.ndarray, bias: np.ndarray, x: np.ndarray) -> np.ndarray:
    # w: (in, out), x: (in, B) -> (out, B)
    z = w.T * x if w.shape[0] == 1 else w.T @ x
    z += bias[:, None]
    return z


def net_forward(params: GatedNetParams, x: np.ndarray, record: bool = False):
    """Evaluate on a batch ``x`` of shape ``(B, d)`` (or a single point ``(d,)``).

    Returns ``out`` of shape ``(B, out_dim)``; with ``record=True`` returns
    ``(out, tape)`` for :func:`net_backward`.
    """
    p = params.arrays
    cfg = params.config
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != cfg.in_dim:
        raise InvalidInputError(f"expected input of width {cfg.in_dim}, got shape {x.shape}")
    # internal layout is (features, batch): long contiguous inner loops
    xt = np.ascontiguousarray(x.T, dtype=params.dtype)

    za1 = _affine_in(p["a1_w"], p["a1_b"], xt)
    sa1 = softplus(za1)
    za2 = p["a2_w"].T @ sa1
    za2 += p["a2_b"][:, None]
    a = np.tanh(za2, out=za2)

    zb1 = _affine_in(p["b1_w"], p["b1_b"], xt)
    sb1 = softplus(zb1)
    zb2 = p["b2_w"].T @ sb1
    zb2 += p["b2_b"][:, None]
    b = np.sin(zb2)

    alpha, beta = _gate(_affine_in(p["gate_w"], p["gate_b"], xt))
    blend = a - b
    blend *= alpha
    blend += b
    out = p["fuse_w"].T @ blend
    out += p["fuse_b"][:, None]
    if not record:
        return out.T
    tape = Tape(params, params.version, xt, za1, sa1, a, zb1, sb1, zb2, b, alpha, beta, blend)
    return out.T, tape


def gate_value(params: GatedNetParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(alpha, 1 - alpha)`` per sample, each of shape ``(B,)``."""
    xt = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=params.dtype)).T)
    alpha, beta = _gate(_affine_in(params["gate_w"], params["gate_b"], xt))
    return alpha[0], beta[0]


def net_backward(tape: Tape, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum_b <upstream_b, out_b>`` with respect to every parameter."""
    params = tape.params
    if tape.version != params.version:
        raise StaleTapeError("tape was recorded before the last parameter update")
    p = params.arrays
    n = tape.x.shape[1]
    g = np.asarray(upstream, dtype=params.dtype)
    if g.ndim == 1:
        g = g.reshape(n, -1)
    if g.shape != (n, params.config.out_dim):
        raise InvalidInputError(f"upstream shape {g.shape} does not match output")
    g = np.ascontiguousarray(g.T)
    xt = tape.x
    # batch sums as matvecs
    ones = np.ones(n, dtype=params.dtype)
    grads = {}
    grads["fuse_w"] = tape.blend @ g.T
    grads["fuse_b"] = g @ ones
    dblend = p["fuse_w"] @ g

    dalpha = np.sum(dblend * (tape.a - tape.b), axis=0, keepdims=True)
    dzg = dalpha * tape.alpha * tape.beta
    grads["gate_w"] = xt @ dzg.T
    grads["gate_b"] = dzg @ ones

    dza2 = dblend * tape.alpha
    dza2 *= 1.0 - tape.a * tape.a
    grads["a2_w"] = tape.sa1 @ dza2.T
    grads["a2_b"] = dza2 @ ones
    dza1 = p["a2_w"] @ dza2
    dza1 *= sigmoid(tape.za1)
    grads["a1_w"] = xt @ dza1.T
    grads["a1_b"] = dza1 @ ones

    dzb2 = dblend * tape.beta
    dzb2 *= np.cos(tape.zb2)
    grads["b2_w"] = tape.sb1 @ dzb2.T
    grads["b2_b"] = dzb2 @ ones
    dzb1 = p["b2_w"] @ dzb2
    dzb1 *= sigmoid(tape.zb1)
    grads["b1_w"] = xt @ dzb1.T
    grads["b1_b"] = dzb1 @ ones
    return grads


# optimiser ------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: GatedNetParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[GatedNetParams, AdamState]:
    """One bias-corrected Adam update, applied in place."""
    if not lr > 0:
        raise InvalidInputError(f"learning rate must be positive, got {lr}")
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for k, g in grads.items():
        w = params.arrays[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(w)
            state.v[k] = np.zeros_like(w)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        w -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    params.touch()
    return params, state
