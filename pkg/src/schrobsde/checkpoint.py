"""Binary checkpoints: one file per trained step plus a JSON manifest.

Step file layout (all integers little-endian)::

    8 bytes   magic b"SBSDECKP"
    uint32    format version
    uint32    header length n
    n bytes   UTF-8 JSON header (sorted keys): j, seed, dtype, per-network config
    ...       raw array bytes, networks in (u_r, u_i, z_r, z_i) order and
              parameters in declaration order within each network

Nothing time- or host-dependent is written, so identical training runs give
identical bytes.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .deepbsde import NET_NAMES, NetStep, SolverState, TerminalStep, TrainConfig
from .errors import CheckpointMissingError, InvalidInputError, OutputUnwritableError
from .netcore import PARAM_NAMES, GatedNetConfig, GatedNetParams
from .problems import SchrodingerProblem, get_problem
from .stochastics import TimeGrid

MAGIC = b"SBSDECKP"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def step_filename(j: int) -> str:
    return f"step_{j:04d}.ckpt"


def encode_step(step: NetStep, j: int, seed: int) -> bytes:
    nets = step.nets()
    dtype = step.u_r.dtype
    header = {
        "j": int(j),
        "seed": int(seed),
        "dtype": dtype.name,
        "nets": {name: dataclasses.asdict(nets[name].config) for name in NET_NAMES},
        "params": list(PARAM_NAMES),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes]
    le = dtype.newbyteorder("<")
    for name in NET_NAMES:
        for pname in PARAM_NAMES:
            chunks.append(np.ascontiguousarray(nets[name][pname], dtype=le).tobytes())
    return b"".join(chunks)


def decode_step(blob: bytes) -> tuple[NetStep, dict]:
    if blob[:8] != MAGIC:
        raise InvalidInputError("not a step checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint format version {version}")
    header = json.loads(blob[16:16 + hlen])
    if header["params"] != list(PARAM_NAMES):
        raise InvalidInputError("checkpoint parameter layout does not match this version")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    offset = 16 + hlen
    nets = []
    for name in NET_NAMES:
        cfg = GatedNetConfig(**header["nets"][name])
        arrays = {}
        for pname, shape in cfg.shapes().items():
            n = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype=dtype, count=n, offset=offset)
            arrays[pname] = arr.reshape(shape).astype(dtype.newbyteorder("="))
            offset += n * dtype.itemsize
        nets.append(GatedNetParams(cfg, arrays))
    if offset != len(blob):
        raise InvalidInputError("checkpoint has trailing or missing bytes")
    return NetStep(*nets), header


def config_to_dict(config: TrainConfig) -> dict:
    out = dataclasses.asdict(config)
    if out["x0"] is not None:
        out["x0"] = [float(v) for v in out["x0"]]
    return out


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    if data.get("x0") is not None:
        data["x0"] = tuple(float(v) for v in data["x0"])
    return TrainConfig(**data)


def save_state(state: SolverState, directory: Path) -> list[Path]:
    """Write every trained step and the manifest; returns the files written."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for j in range(state.grid.M):
            path = directory / step_filename(j)
            path.write_bytes(encode_step(state.steps[j], j, state.config.seed))
            written.append(path)
        manifest = {
            "format_version": FORMAT_VERSION,
            "problem": state.problem.name,
            "dim": state.problem.d,
            "nu": state.problem.nu,
            "horizon": state.problem.horizon,
            "M": state.grid.M,
            "config": config_to_dict(state.config),
            "seed": state.config.seed,
            "steps": [step_filename(j) for j in range(state.grid.M)],
            "final_losses": {str(j): (log[-1] if log else None) for j, log in sorted(state.training_log.items())},
        }
        path = directory / MANIFEST_NAME
        path.write_text(canonical_json(manifest))
        written.append(path)
    except OSError as exc:
        raise OutputUnwritableError(f"cannot write checkpoint to {directory}: {exc}") from exc
    return written


def load_state(directory: Path, problem: Optional[SchrodingerProblem] = None) -> SolverState:
    """Rebuild a solver state; ``problem`` is required for problems outside the registry."""
    directory = Path(directory)
    mpath = directory / MANIFEST_NAME
    if not mpath.is_file():
        raise CheckpointMissingError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported manifest version {manifest.get('format_version')}")
    if problem is None:
        dim = manifest["dim"] if manifest["problem"] in ("lin-hd", "nls-manufactured") else None
        problem = get_problem(manifest["problem"], dim=dim, horizon=manifest["horizon"])
    grid = TimeGrid(int(manifest["M"]), float(manifest["horizon"]))
    config = config_from_dict(manifest["config"])
    steps: list = [None] * (grid.M + 1)
    steps[grid.M] = TerminalStep(problem)
    for j, name in enumerate(manifest["steps"]):
        path = directory / name
        if not path.is_file():
            raise CheckpointMissingError(f"missing step file {path}")
        step, header = decode_step(path.read_bytes())
        if header["j"] != j:
            raise InvalidInputError(f"{path} holds step {header['j']}, expected {j}")
        steps[j] = step
    state = SolverState(problem, grid, config, steps)
    state.training_log = {int(k): ([v] if v is not None else []) for k, v in manifest["final_losses"].items()}
    return state
