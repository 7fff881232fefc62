"""Run configuration: defaults, INI-style files, and command-line flags.

Files are flat ``key = value`` lists grouped in sections. ``[run]`` applies to
every command and a section named after the command overrides it; flags
override both. Unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import InvalidInputError
from .problems import DEFAULT_HD_DIM, REGISTRY, get_problem

COMMANDS = ("train", "eval", "slice", "bench", "verify", "probe")
OUT_ENV = "SCHROBSDE_OUT"
DEFAULT_OUT_ROOT = "runs"

# per-problem grid, batch, epochs and width parameter
PROBLEM_DEFAULTS = {
    "lin1d": {"M": 25, "batch": 4096, "epochs": 30, "h": 10},
    "nls1d": {"M": 64, "batch": 4096, "epochs": 10, "h": 10},
    "lin-hd": {"M": 25, "batch": 16384, "epochs": 30, "h": 2},
    "nls-manufactured": {"M": 50, "batch": 16384, "epochs": 30, "h": 2},
}


@dataclass(frozen=True)
class RunConfig:
    problem: str = "lin1d"
    dim: Optional[int] = None
    horizon: float = 0.5
    M: Optional[int] = None
    batch: Optional[int] = None
    epochs: Optional[int] = None
    steps_per_epoch: int = 100
    lr: float = 1e-3
    lr_decay: float = 1.0
    warm_start: bool = True
    terminal_fit_steps: int = 500
    h: Optional[int] = None
    dtype: str = "float32"
    seed: int = 0
    x0: Optional[tuple[float, ...]] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    runs: int = 10
    Ms: tuple[int, ...] = (8, 16, 32, 64)
    slice_axis: str = "e1"
    slice_min: float = -3.0
    slice_max: float = 3.0
    slice_points: int = 61
    basis_kind: str = "polynomial"
    basis_degree: int = 6
    oracle_batch: int = 100_000
    residual_batch: int = 100_000
    fp_tol: float = 1e-10
    fp_max: int = 100
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def effective_dim(self) -> int:
        if self.problem in ("lin1d", "nls1d"):
            return 1
        return DEFAULT_HD_DIM if self.dim is None else self.dim


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _optional(parse):
    def inner(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)
    return inner


PARSERS: dict[str, Any] = {
    "problem": str, "dim": _optional(int), "horizon": float, "M": _optional(int),
    "batch": _optional(int), "epochs": _optional(int), "steps_per_epoch": int,
    "lr": float, "lr_decay": float, "warm_start": _parse_bool, "terminal_fit_steps": int,
    "h": _optional(int), "dtype": str, "seed": int, "x0": _optional(_parse_floats),
    "out": _optional(str), "checkpoint": _optional(str), "runs": int, "Ms": _parse_ints,
    "slice_axis": str, "slice_min": float, "slice_max": float, "slice_points": int,
    "basis_kind": str, "basis_degree": int, "oracle_batch": int, "residual_batch": int,
    "fp_tol": float, "fp_max": int,
}


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def read_config_file(path: Path, command: Optional[str] = None) -> dict[str, Any]:
    """Parsed values from ``[run]`` and the command's section of an INI file."""
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep "M" and "Ms" distinct
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise InvalidInputError(f"malformed config file {path}: {exc}") from exc
    for section in cp.sections():
        if section != "run" and section not in COMMANDS:
            raise InvalidInputError(f"unknown config section [{section}] in {path}")
    values: dict[str, Any] = {}
    for section in ("run", command):
        if section is None or not cp.has_section(section):
            continue
        for key, text in cp.items(section):
            if key not in PARSERS:
                raise InvalidInputError(f"unknown config key {key!r} in [{section}] of {path}")
            try:
                values[key] = PARSERS[key](text)
            except ValueError as exc:
                raise InvalidInputError(f"bad value for {key!r}: {exc}") from exc
    return values


def build_config(values: dict[str, Any]) -> RunConfig:
    """Validate and fill problem-dependent defaults."""
    unknown = set(values) - set(PARSERS)
    if unknown:
        raise InvalidInputError(f"unknown config keys: {', '.join(sorted(unknown))}")
    problem = values.get("problem", "lin1d")
    if problem not in REGISTRY:
        raise InvalidInputError(f"unknown problem {problem!r}; available: {', '.join(REGISTRY)}")
    get_problem(problem, dim=values.get("dim"))  # validates the dimension override
    merged = dict(values)
    for key, default in PROBLEM_DEFAULTS[problem].items():
        if merged.get(key) is None:
            merged[key] = default
    cfg = RunConfig(**merged)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    checks = [
        (cfg.M >= 1, f"M must be >= 1, got {cfg.M}"),
        (cfg.batch >= 1, f"batch must be >= 1, got {cfg.batch}"),
        (cfg.epochs >= 1, f"epochs must be >= 1, got {cfg.epochs}"),
        (cfg.steps_per_epoch >= 1, f"steps_per_epoch must be >= 1, got {cfg.steps_per_epoch}"),
        (cfg.lr > 0, f"lr must be positive, got {cfg.lr}"),
        (cfg.lr_decay > 0, f"lr_decay must be positive, got {cfg.lr_decay}"),
        (cfg.h >= 1, f"h must be >= 1, got {cfg.h}"),
        (cfg.horizon > 0, f"horizon must be positive, got {cfg.horizon}"),
        (cfg.runs >= 1, f"runs must be >= 1, got {cfg.runs}"),
        (len(cfg.Ms) >= 1 and all(m >= 1 for m in cfg.Ms), f"Ms must be positive, got {cfg.Ms}"),
        (all(b > a for a, b in zip(cfg.Ms, cfg.Ms[1:])), f"Ms must be strictly increasing, got {cfg.Ms}"),
        (cfg.slice_axis in ("e1", "diag"), f"slice_axis must be e1 or diag, got {cfg.slice_axis!r}"),
        (cfg.slice_max > cfg.slice_min, "slice_max must exceed slice_min"),
        (cfg.slice_points >= 2, "slice_points must be >= 2"),
        (cfg.basis_kind in ("polynomial", "piecewise-local"), f"unknown basis kind {cfg.basis_kind!r}"),
        (cfg.basis_degree >= 0, "basis_degree must be >= 0"),
        (cfg.oracle_batch >= 2 and cfg.residual_batch >= 2, "oracle batches must be >= 2"),
        (cfg.fp_tol > 0 and cfg.fp_max >= 1, "fp_tol must be positive and fp_max >= 1"),
        (cfg.dtype in ("float32", "float64"), f"dtype must be float32 or float64, got {cfg.dtype!r}"),
        (cfg.terminal_fit_steps >= 0, "terminal_fit_steps must be >= 0"),
        (cfg.x0 is None or len(cfg.x0) in (1, cfg.effective_dim),
         f"x0 must have 1 or {cfg.effective_dim} entries"),
    ]
    for ok, message in checks:
        if not ok:
            raise InvalidInputError(message)


def config_to_ini(cfg: RunConfig) -> str:
    """Every field under ``[run]``; reading it back gives the same config."""
    lines = ["[run]"]
    for f in dataclasses.fields(cfg):
        if f.name in PARSERS:
            lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def config_echo(cfg: RunConfig) -> dict[str, Any]:
    """JSON-friendly view of the config without the seed and output locations."""
    out = {}
    for f in dataclasses.fields(cfg):
        if f.name in PARSERS and f.name not in ("seed", "out", "checkpoint"):
            v = getattr(cfg, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV) or DEFAULT_OUT_ROOT)


def run_label(cfg: RunConfig) -> str:
    if cfg.problem in ("lin-hd", "nls-manufactured"):
        return f"{cfg.problem}-d{cfg.effective_dim}"
    return cfg.problem
