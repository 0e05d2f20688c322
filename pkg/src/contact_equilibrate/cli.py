"""Command-line entry point.

Usage::

    contact-equilibrate <mode> --config PATH [--threads N] [--out DIR] [--budget K]

with ``mode`` one of ``adaptive``, ``uniform-study``, ``single-solve`` and
``verify``.  On failure a single line

    error module=<module> key=<key> message="<text>"

is written to stderr and the exit status is nonzero (2 for configuration
problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import io
from .adaptive import RunLog, StepRecord, run, solve_on_mesh, spread_ratio
from .config import MODES, ConfigError, RunConfig, load_config
from .equilibration import Reconstructor
from .estimators import guaranteed_bound
from .nitsche import NitscheSystem
from .verification import (DegenerateDiagnostics, contact_interval, convergence_rate, diagnostics,
                           error_norms, lift_residual, reference_solution)

log = logging.getLogger("contact_equilibrate")

DIAGNOSTIC_COLUMNS = ["strategy", "step", "ndofs", "n_cells", "h1_error", "energy_error", "L", "U",
                      "eta_tot", "i_eff_low", "i_eff_up", "lifted", "bound", "bound_ok"]


# ------------------------------------------------------------- artifacts
def _vertex_displacement(u) -> np.ndarray:
    return u.coeffs.reshape(-1, 2)[: u.mesh.n_vertices]


def write_step(out: Path, rec: StepRecord, cfg: RunConfig, prefix: str = "") -> None:
    """Mesh, VTK field and estimator table of one step."""
    tag = f"{prefix}step{rec.step:02d}"
    if cfg["output.meshes"]:
        io.write_mesh(out / f"mesh_{tag}.txt", rec.mesh)
    if cfg["output.estimators"]:
        rec.report.write_csv(out / f"estimators_{tag}.csv")
    if cfg["output.fields"]:
        marked = np.zeros(rec.mesh.n_cells)
        if rec.marked is not None:
            marked[rec.marked] = 1.0
        cells = {f"eta_{k}": v for k, v in rec.report.local.items()}
        cells["marked"] = marked
        io.write_vtk(out / f"solution_{tag}.vtk", rec.mesh, {"displacement": _vertex_displacement(rec.u)}, cells)


def _run_logged(problem, acfg, strategy, out, cfg, prefix=""):
    def progress(rec: StepRecord):
        g = rec.report.globals_
        log.info("%s step %d: %d cells, N_reg=%d, N_lin=%d, eta_tot=%.4e, spread=%.3f", strategy, rec.step,
                 rec.n_cells, rec.n_reg, rec.n_lin, g["tot"], spread_ratio(rec.report))
        write_step(out, rec, cfg, prefix)

    return run(problem, acfg, strategy, progress)


def _write_runlog(path: Path, runlog: RunLog) -> None:
    io.write_table(path, runlog.rows())


# ----------------------------------------------------------------- modes
def mode_adaptive(cfg: RunConfig, out: Path, threads: int, base: Path) -> dict:
    runlog = _run_logged(cfg.problem(base), cfg.adaptive_config(threads), "adaptive", out, cfg)
    _write_runlog(out / "runlog.csv", runlog)
    return {"steps": len(runlog), "stop_reason": runlog.stop_reason}


def mode_uniform(cfg: RunConfig, out: Path, threads: int, base: Path) -> dict:
    acfg = cfg.with_overrides(adaptive__max_steps=cfg["verify.uniform_steps"]).adaptive_config(threads)
    runlog = _run_logged(cfg.problem(base), acfg, "uniform", out, cfg)
    _write_runlog(out / "runlog.csv", runlog)
    return {"steps": len(runlog), "stop_reason": runlog.stop_reason}


def mode_single(cfg: RunConfig, out: Path, threads: int, base: Path) -> dict:
    problem = cfg.problem(base)
    acfg = cfg.adaptive_config(threads)
    system = NitscheSystem(problem, acfg.gamma0)
    u, delta, rounds, _history, ok = solve_on_mesh(system, system.space.zero(), acfg.delta_init, acfg,
                                                   Reconstructor(system, threads))
    last = rounds[-1]
    rec = StepRecord(step=0, mesh=problem.mesh, system=system, u=u, report=last.report, stress=last.stress,
                     delta=delta, n_reg=len(rounds) - 1, n_lin=sum(r.newton_iterations for r in rounds),
                     rounds=rounds, converged=ok)
    write_step(out, rec, cfg)
    _write_runlog(out / "runlog.csv", RunLog([rec], "single"))
    if not ok:
        raise RuntimeError("iteration budget exhausted before the stopping criteria were met")
    return {"eta_tot": last.report["tot"]}


def _diagnose(runlog: RunLog, ref, lifting: str) -> list[dict]:
    rows = []
    for rec in runlog.steps:
        norms = error_norms(rec.u, ref.u, rec.system.coeff)
        lifted = lift_residual(rec.system, rec.u, lifting).value
        bound = guaranteed_bound(rec.report)
        row = {"strategy": runlog.strategy, "step": rec.step, "ndofs": rec.ndofs, "n_cells": rec.n_cells,
               "h1_error": norms.h1, "energy_error": norms.energy, "eta_tot": rec.report["tot"],
               "lifted": lifted, "bound": bound, "bound_ok": lifted <= bound}
        try:
            d = diagnostics(rec.system, rec.u, ref, rec.report["tot"], norms)
            row.update(L=d.lower, U=d.upper, i_eff_low=d.i_eff_low, i_eff_up=d.i_eff_up)
        except DegenerateDiagnostics:
            row.update(L=0.0, U=0.0, i_eff_low=float("inf"), i_eff_up=float("inf"))
        rec.errors = {"h1_error": norms.h1, "energy_error": norms.energy}
        log.info("%s step %d: H1=%.4e energy=%.4e lifted=%.4e bound=%.4e", runlog.strategy, rec.step,
                 norms.h1, norms.energy, lifted, bound)
        rows.append(row)
    return rows


def mode_verify(cfg: RunConfig, out: Path, threads: int, base: Path) -> dict:
    problem = cfg.problem(base)
    adaptive = _run_logged(problem, cfg.adaptive_config(threads), "adaptive", out, cfg, "adaptive_")
    ucfg = cfg.with_overrides(adaptive__max_steps=cfg["verify.uniform_steps"]).adaptive_config(threads)
    uniform = _run_logged(problem, ucfg, "uniform", out, cfg, "uniform_")
    log.info("computing the reference solution")
    ref = reference_solution(problem, levels=cfg["verify.reference_levels"],
                             degree=cfg["verify.reference_degree"], gamma0=cfg["nitsche.gamma0"] / problem.young)
    rows = _diagnose(adaptive, ref, cfg["verify.lifting"]) + _diagnose(uniform, ref, cfg["verify.lifting"])
    io.write_table(out / "diagnostics.csv", rows, DIAGNOSTIC_COLUMNS)
    _write_runlog(out / "runlog_adaptive.csv", adaptive)
    _write_runlog(out / "runlog_uniform.csv", uniform)

    summary = {"reference_cells": ref.mesh.n_cells, "reference_ndofs": ref.system.space.ndofs}
    for name, runlog in (("adaptive", adaptive), ("uniform", uniform)):
        ndofs = [r.ndofs for r in runlog.steps]
        for err in ("h1_error", "energy_error"):
            vals = [r.errors[err] for r in runlog.steps]
            summary[f"{name}_rate_{err}"] = convergence_rate(ndofs, vals) if len(vals) >= 4 else float("nan")
        summary[f"{name}_spread_initial"] = spread_ratio(runlog.steps[0].report)
        summary[f"{name}_spread_final"] = spread_ratio(runlog.steps[-1].report)
    interval = contact_interval(ref, deformed=True)
    summary["contact_start"], summary["contact_end"] = interval if interval else (float("nan"),) * 2
    io.write_table(out / "verify_summary.csv", [{"quantity": k, "value": v} for k, v in summary.items()],
                   ["quantity", "value"])
    summary["bound_ok"] = all(r["bound_ok"] for r in rows)
    return summary


HANDLERS = {"adaptive": mode_adaptive, "uniform-study": mode_uniform, "single-solve": mode_single,
            "verify": mode_verify}


# ------------------------------------------------------------------ main
def _error_line(module: str, message: str, key: str | None = None) -> str:
    return f"error module={module} key={key or '-'} message={json.dumps(message)}"


def _origin(exc: BaseException) -> str:
    """Name of the innermost package module in the traceback."""
    pkg = Path(__file__).parent
    name = "cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        path = Path(frame.filename)
        if path.parent == pkg:
            name = path.stem
    return name


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="contact-equilibrate",
                                 description="Nitsche contact solver with equilibrated-stress estimators.")
    ap.add_argument("mode", choices=MODES)
    ap.add_argument("--config", required=True, type=Path, help="configuration file")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for patch solves")
    ap.add_argument("--out", type=Path, default=None, help="output directory (overrides output.directory)")
    ap.add_argument("--budget", type=int, default=None,
                    help="number of refinement steps (adaptive.max_steps, or verify.uniform_steps "
                         "for uniform-study)")
    ap.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1", "threads")
        cfg = load_config(args.config).with_overrides(run__mode=args.mode)
        if args.budget is not None:
            key = "verify__uniform_steps" if args.mode == "uniform-study" else "adaptive__max_steps"
            cfg = cfg.with_overrides(**{key: args.budget})
        out = args.out if args.out is not None else Path(cfg["output.directory"])
        out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        print(_error_line("config", str(exc), exc.key), file=sys.stderr)
        return 2
    except OSError as exc:
        print(_error_line("config", str(exc)), file=sys.stderr)
        return 2
    try:
        summary = HANDLERS[args.mode](cfg, out, args.threads, args.config.resolve().parent)
    except ConfigError as exc:
        print(_error_line("config", str(exc), exc.key), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        print(_error_line(_origin(exc), f"{type(exc).__name__}: {exc}"), file=sys.stderr)
        return 1
    log.info("done: %s", json.dumps(summary, default=float))
    if args.mode == "verify" and not summary["bound_ok"]:
        print(_error_line("verification", "lifted dual norm exceeds the guaranteed bound"), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
