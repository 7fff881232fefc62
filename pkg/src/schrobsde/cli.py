"""Command-line entry point: ``schrobsde {train,eval,slice,bench,verify,probe}``.

Exit codes: 0 success, 1 invalid input or unsupported operation, 2 missing
checkpoint, 3 training divergence, 4 unwritable output, 5 oracle failure
(fixed point did not contract or regression was degenerate).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import canonical_json, load_state, save_state
from .config import (COMMANDS, PARSERS, RunConfig, build_config, config_echo, config_to_ini,
                     default_out_root, read_config_file, run_label)
from .deepbsde import TrainConfig, bench_runs, evaluate_point, evaluate_slice, solve
from .errors import InvalidInputError, OutputUnwritableError, SchroBsdeError
from .oracles import (PROBE_COLUMNS, RESIDUAL_COLUMNS, RegressionBasis, aux_solve, compare_solver_to_oracle,
                      convergence_probe, fk_residual, loglog_slope)
from .problems import ComplexValue, SchrodingerProblem, get_problem, relative_l2_error
from .stochastics import TimeGrid, coarsen, divergence_check, simulate_paths

logger = logging.getLogger("schrobsde")

REPORT_NAME = "report.json"


# output helpers -----------------------------------------------------------------


def format_number(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return "" if v is None else str(v)


def write_csv(path: Path, header: Sequence[str], rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_number(v) for v in row])
    try:
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise OutputUnwritableError(f"cannot write {path}: {exc}") from exc
    return path


def write_text(path: Path, text: str) -> Path:
    try:
        path.write_text(text)
    except OSError as exc:
        raise OutputUnwritableError(f"cannot write {path}: {exc}") from exc
    return path


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def emit_report(out: Path, command: str, cfg: RunConfig, files: Sequence[Path], seeds: Sequence[int],
                summary: Optional[dict] = None) -> Path:
    """Write ``report.json``: config echo, seeds, version and a SHA-256 per emitted file."""
    entries = {}
    for f in sorted(set(Path(p) for p in files)):
        entries[f.relative_to(out).as_posix()] = sha256_file(f)
    report = {
        "command": command,
        "version": f"v{__version__}",
        "config": config_echo(cfg),
        "seeds": [int(s) for s in seeds],
        "files": entries,
        "summary": summary or {},
    }
    return write_text(out / REPORT_NAME, canonical_json(report))


def verify_report(out: Path) -> bool:
    """True when every file listed in the report still has its recorded hash."""
    report = json.loads((Path(out) / REPORT_NAME).read_text())
    return all(sha256_file(Path(out) / name) == digest for name, digest in report["files"].items())


# config plumbing ----------------------------------------------------------------


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        batch=cfg.batch, epochs=cfg.epochs, steps_per_epoch=cfg.steps_per_epoch, lr=cfg.lr,
        lr_decay=cfg.lr_decay, seed=cfg.seed, x0=cfg.x0, warm_start=cfg.warm_start,
        terminal_fit_steps=cfg.terminal_fit_steps, h=cfg.h, dtype=cfg.dtype,
    )


def problem_of(cfg: RunConfig) -> SchrodingerProblem:
    dim = cfg.dim if cfg.problem in ("lin-hd", "nls-manufactured") else None
    return get_problem(cfg.problem, dim=dim, horizon=cfg.horizon)


def out_dir(cfg: RunConfig, command: str) -> Path:
    path = Path(cfg.out) if cfg.out else default_out_root() / f"{command}-{run_label(cfg)}"
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputUnwritableError(f"cannot create output directory {path}: {exc}") from exc
    return path


def checkpoint_dir(cfg: RunConfig) -> Path:
    if cfg.checkpoint:
        return Path(cfg.checkpoint)
    return default_out_root() / f"train-{run_label(cfg)}" / "checkpoint"


def _truth(p: SchrodingerProblem, x0: np.ndarray) -> Optional[ComplexValue]:
    if p.exact is None:
        return None
    tr, ti = p.exact(0.0, x0)
    return ComplexValue(float(tr), float(ti))


# commands ------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> dict:
    p = problem_of(cfg)
    out = out_dir(cfg, "train")
    tc = train_config(cfg)
    grid = TimeGrid(cfg.M, cfg.horizon)
    state = solve(p, grid, tc)
    files = save_state(state, out / "checkpoint")
    rows = [(j, e, loss) for j in sorted(state.training_log) for e, loss in enumerate(state.training_log[j])]
    files.append(write_csv(out / "training_log.csv", ("j", "epoch", "loss"), rows))
    files.append(write_text(out / "config.ini", config_to_ini(replace(cfg, out=None, checkpoint=None))))
    v = evaluate_point(state)
    summary = {"estimate": [v.re, v.im]}
    truth = _truth(p, tc.start_point(p.d))
    if truth is not None:
        summary["rel_l2_error"] = relative_l2_error(truth, v)
    emit_report(out, "train", cfg, files, [cfg.seed], summary)
    print(f"u(0, x0) ~ {v.re:.6f} {v.im:+.6f}i" + (f"  rel. L2 error {summary['rel_l2_error']:.4%}" if truth else ""))
    return summary


def cmd_eval(cfg: RunConfig) -> dict:
    ckpt = checkpoint_dir(cfg)
    p = problem_of(cfg)
    state = load_state(ckpt, problem=p)
    x0 = np.asarray(cfg.x0, float) if cfg.x0 is not None else state.x0
    if x0.size == 1 and p.d > 1:
        x0 = np.full(p.d, x0[0])
    v = evaluate_point(state, x0)
    truth = _truth(p, x0)
    out = out_dir(cfg, "eval")
    row = [v.re, v.im]
    header = ["est_re", "est_im"]
    summary: dict[str, Any] = {"estimate": row, "checkpoint": str(ckpt)}
    if truth is not None:
        err = relative_l2_error(truth, v)
        row += [truth.re, truth.im, err]
        header += ["true_re", "true_im", "rel_l2_error"]
        summary["rel_l2_error"] = err
    files = [write_csv(out / "eval.csv", header, [row])]
    emit_report(out, "eval", cfg, files, [state.config.seed], summary)
    line = f"u(0, x0) ~ {v.re:.6f} {v.im:+.6f}i"
    if truth is not None:
        line += f"  (exact {truth.re:.6f} {truth.im:+.6f}i, rel. L2 error {summary['rel_l2_error']:.4%})"
    print(line)
    return summary


def cmd_slice(cfg: RunConfig) -> dict:
    p = problem_of(cfg)
    state = load_state(checkpoint_dir(cfg), problem=p)
    grid_1d = np.linspace(cfg.slice_min, cfg.slice_max, cfg.slice_points)
    table = evaluate_slice(state, cfg.slice_axis, grid_1d)
    out = out_dir(cfg, "slice")
    files = [write_csv(out / f"slice_{cfg.slice_axis}.csv", ("x1", "true_re", "true_im", "est_re", "est_im"), table)]
    emit_report(out, "slice", cfg, files, [state.config.seed], {"axis": cfg.slice_axis})
    print(f"wrote {files[0]}")
    return {}


def cmd_bench(cfg: RunConfig) -> dict:
    p = problem_of(cfg)
    if cfg.runs < 2:
        raise InvalidInputError("bench needs --runs >= 2")
    res = bench_runs(p, TimeGrid(cfg.M, cfg.horizon), train_config(cfg), cfg.runs)
    rows: list[list] = [[r, v.re, v.im] for r, v in enumerate(res.values)]
    rows += [["mean", res.mean.re, res.mean.im], ["std", res.std.re, res.std.im]]
    if res.truth is not None:
        rows += [["true", res.truth.re, res.truth.im], ["rel_l2_error", res.rel_error, ""]]
    out = out_dir(cfg, "bench")
    files = [write_csv(out / "bench.csv", ("run", "re", "im"), rows),
             write_text(out / "config.ini", config_to_ini(replace(cfg, out=None, checkpoint=None)))]
    summary = {"mean": [res.mean.re, res.mean.im], "std": [res.std.re, res.std.im], "rel_l2_error": res.rel_error}
    emit_report(out, "bench", cfg, files, res.seeds, summary)
    print(f"mean {res.mean.re:.6f} {res.mean.im:+.6f}i  std ({res.std.re:.4f}, {res.std.im:.4f})"
          + (f"  rel. L2 error {res.rel_error:.4%}" if res.rel_error is not None else ""))
    return summary


def cmd_verify(cfg: RunConfig) -> dict:
    """Residual order, divergence identities and the auxiliary-system comparison."""
    p = problem_of(cfg)
    out = out_dir(cfg, "verify")
    files: list[Path] = []
    summary: dict[str, Any] = {}
    x0 = train_config(cfg).start_point(p.d)

    Ms = sorted(cfg.Ms)
    finest = Ms[-1]
    if any(finest % m for m in Ms):
        raise InvalidInputError(f"--Ms values must divide the largest one, got {Ms}")
    fine = simulate_paths(cfg.seed, cfg.residual_batch, TimeGrid(finest, cfg.horizon), x0, p.nu)
    order_rows = []
    for m in Ms:
        grid = TimeGrid(m, cfg.horizon)
        tab = fk_residual(p, grid, coarsen(fine, finest // m))
        files.append(write_csv(out / f"residual_M{m}.csv", RESIDUAL_COLUMNS, tab.rows()))
        order_rows.append((m, grid.dt, tab.aggregate))
    slope = loglog_slope([r[1] for r in order_rows], [r[2] for r in order_rows]) if len(Ms) > 1 else None
    files.append(write_csv(out / "residual_order.csv", ("M", "dt", "residual_rms"), order_rows))
    summary["residual_slope"] = slope

    # divergence form of the star integral along the problem's forward paths
    dgrid = TimeGrid(64, cfg.horizon)
    dpaths = simulate_paths(cfg.seed + 1, 10_000, dgrid, x0, p.nu)
    checks = {
        "x": (lambda t, x: x, lambda t, x: np.full(x.shape[0], float(x.shape[1]))),
        "x^2": (lambda t, x: x**2, lambda t, x: 2.0 * x.sum(axis=1)),
    }
    div_rows = []
    for name, (g, div) in checks.items():
        dc = divergence_check(g, div, dpaths)
        div_rows.append((name, dc.mean, dc.stderr, dc.rms, dc.star_mean, dc.star_stderr))
    files.append(write_csv(out / "divergence.csv", ("field", "defect_mean", "defect_stderr", "defect_rms",
                                                    "star_mean", "star_stderr"), div_rows))

    grid = TimeGrid(cfg.M, cfg.horizon)
    basis = RegressionBasis(kind=cfg.basis_kind, degree=cfg.basis_degree)
    aux = aux_solve(p, grid, basis, cfg.oracle_batch, cfg.fp_tol, cfg.fp_max, seed=cfg.seed, x0=x0)
    vr, vi = aux.values(0, x0[None, :])
    summary["aux_value"] = [float(vr[0]), float(vi[0])]
    truth = _truth(p, x0)
    if truth is not None:
        summary["aux_abs_error"] = float(np.hypot(vr[0] - truth.re, vi[0] - truth.im))
    ckpt = checkpoint_dir(cfg)
    if (ckpt / "manifest.json").is_file():
        state = load_state(ckpt, problem=p)
        if state.grid == grid:
            pts = simulate_paths(cfg.seed + 2, 4096, grid, x0, p.nu)
            gap = compare_solver_to_oracle(state, aux, pts)
            files.append(write_csv(out / "oracle_gap.csv", ("j", "value_gap", "grad_gap"),
                                   zip(gap.j, gap.value_gap, gap.grad_gap)))
            summary["max_value_gap"] = gap.max_value_gap
            summary["value_gap_last_step"] = float(gap.value_gap[grid.M - 1])
    diag = {k: ({str(j): v for j, v in d.items()} if isinstance(d, dict) else d)
            for k, d in aux.diagnostics.items()}
    files.append(write_text(out / "diagnostics.json", canonical_json(diag)))
    emit_report(out, "verify", cfg, files, [cfg.seed], summary)
    print(f"residual slope {slope if slope is None else format(slope, '.3f')}; "
          f"aux u(0,x0) ~ {vr[0]:.6f} {vi[0]:+.6f}i")
    return summary


def cmd_probe(cfg: RunConfig) -> dict:
    p = problem_of(cfg)
    tab = convergence_probe(p, cfg.Ms, train_config(cfg), runs=max(1, min(cfg.runs, 3)),
                            residual_batch=cfg.residual_batch)
    out = out_dir(cfg, "probe")
    files = [write_csv(out / "probe.csv", PROBE_COLUMNS, tab.rows())]
    summary = {"error_slope": tab.error_slope, "residual_slope": tab.residual_slope}
    emit_report(out, "probe", cfg, files, [cfg.seed + r for r in range(max(1, min(cfg.runs, 3)))], summary)
    print(f"error slope {tab.error_slope}, residual slope {tab.residual_slope}")
    return summary


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "slice": cmd_slice, "bench": cmd_bench,
            "verify": cmd_verify, "probe": cmd_probe}


# argument parsing ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidInputError(message)


FLAG_KEYS = {
    "problem": "problem", "dim": "dim", "M": "M", "batch": "batch", "epochs": "epochs",
    "steps_per_epoch": "steps-per-epoch", "lr": "lr", "seed": "seed", "x0": "x0", "out": "out",
    "runs": "runs", "Ms": "Ms", "checkpoint": "checkpoint", "slice_axis": "slice-axis",
}


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="schrobsde", description="BSDE solver for backward Schrödinger equations")
    ap.add_argument("--version", action="version", version=f"schrobsde {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI file with [run] and per-command sections")
        sp.add_argument("--problem")
        sp.add_argument("--dim", type=int)
        sp.add_argument("--M", type=int)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--steps-per-epoch", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--x0", help="comma-separated start point (one value is broadcast)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--runs", type=int)
        sp.add_argument("--Ms", help="comma-separated grid sizes")
        sp.add_argument("--checkpoint", help="checkpoint directory")
        sp.add_argument("--slice-axis", choices=("e1", "diag"))
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="any other config key")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def parse_config(argv: Sequence[str]) -> tuple[str, RunConfig]:
    """``(command, config)`` from flags, with an optional ``--config`` file underneath."""
    ns = build_parser().parse_args(list(argv))
    values: dict[str, Any] = {}
    if ns.config:
        values.update(read_config_file(Path(ns.config), ns.command))
    for item in ns.set:
        key, sep, text = item.partition("=")
        key = key.strip()
        if not sep or key not in PARSERS:
            raise InvalidInputError(f"bad --set entry {item!r}")
        try:
            values[key] = PARSERS[key](text)
        except ValueError as exc:
            raise InvalidInputError(f"bad value for {key!r}: {exc}") from exc
    for key, flag in FLAG_KEYS.items():
        raw = getattr(ns, flag.replace("-", "_"))
        if raw is None:
            continue
        try:
            values[key] = PARSERS[key](raw) if isinstance(raw, str) and key in ("x0", "Ms") else raw
        except ValueError as exc:
            raise InvalidInputError(f"bad value for --{flag}: {exc}") from exc
    cfg = build_config(values)
    return ns.command, replace(cfg, extra={"verbose": ns.verbose})


def run_command(command: str, cfg: RunConfig) -> int:
    try:
        HANDLERS[command](cfg)
    except SchroBsdeError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        command, cfg = parse_config(argv)
    except SchroBsdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if cfg.extra.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run_command(command, cfg)


if __name__ == "__main__":
    sys.exit(main())
