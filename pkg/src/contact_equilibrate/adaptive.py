"""Fully adaptive loop: Newton inside regularization inside mesh refinement.

On each mesh, Newton iterations on the regularized problem run until the
linearization estimator is small relative to the discretization ones; the
regularization width is then halved and Newton restarted until the
regularization estimator is small as well.  The width that last passed the
Newton criterion is kept, the elements with the largest total estimators
are refined, and the iterate is carried over to the new mesh.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .equilibration import EquilibratedStress, Reconstructor
from .estimators import EstimatorReport, compute_report
from .femcore import DisplacementField, transfer
from .mesh import TriMesh, refine
from .nitsche import NitscheSystem
from .problem import ContactProblem


@dataclass(frozen=True)
class AdaptiveConfig:
    """Parameters of the adaptive loop.

    ``gamma_reg`` and ``gamma_lin`` weigh the regularization and
    linearization estimators against the discretization ones.  In local
    stopping mode the per-element weights ``gamma_reg_local`` and
    ``gamma_lin_local`` (scalars, defaulting to the global values) are used
    on every element.  ``abs_floor`` declares estimators at or below it
    negligible, so that round-off cannot keep the loops running on
    problems whose exact discrete solution is reached.
    """

    gamma0: float = 100.0
    delta_init: float = 1.0
    delta_shrink: float = 0.5
    gamma_reg: float = 0.04
    gamma_lin: float = 0.08
    fraction: float = 0.06
    max_steps: int = 11
    stopping: str = "global"
    gamma_reg_local: float | None = None
    gamma_lin_local: float | None = None
    evenness_ratio: float = 3.0
    newton_max_iters: int = 50
    max_reg_rounds: int = 40
    trace_constant: float | None = None
    threads: int = 1
    abs_floor: float = 1e-12

    def __post_init__(self):
        for name in ("gamma_reg", "gamma_lin"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        for name in ("gamma_reg_local", "gamma_lin_local"):
            v = getattr(self, name)
            if v is not None and not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not 0 < self.fraction <= 1:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if not 0 < self.delta_shrink < 1:
            raise ValueError("delta_shrink must lie in (0, 1)")
        if self.gamma0 <= 0 or self.delta_init <= 0:
            raise ValueError("gamma0 and delta_init must be positive")
        if self.stopping not in ("global", "local"):
            raise ValueError(f"unknown stopping mode {self.stopping!r}")
        if self.max_steps < 0 or self.newton_max_iters < 1 or self.max_reg_rounds < 1:
            raise ValueError("step and iteration budgets must be positive")
        if self.abs_floor < 0:
            raise ValueError("abs_floor must be non-negative")
        if self.evenness_ratio <= 1:
            raise ValueError("evenness_ratio must exceed 1")


# ----------------------------------------------------------- criteria
def stop_newton(report: EstimatorReport, cfg: AdaptiveConfig) -> bool:
    """Linearization estimator small against the discretization estimators."""
    if cfg.stopping == "global":
        g = report.globals_
        return g["lin"] <= max(cfg.gamma_lin * (g["osc"] + g["str"] + g["Neu"] + g["cnt"]), cfg.abs_floor)
    gam = cfg.gamma_lin if cfg.gamma_lin_local is None else cfg.gamma_lin_local
    loc = report.local
    rhs = np.maximum(gam * (loc["osc"] + loc["str"] + loc["Neu"] + loc["cnt"]), cfg.abs_floor)
    return bool(np.all(loc["lin"] <= rhs))


def stop_regularization(report: EstimatorReport, cfg: AdaptiveConfig) -> bool:
    """Regularization estimator small against the other estimators."""
    if cfg.stopping == "global":
        g = report.globals_
        rest = g["osc"] + g["str"] + g["Neu"] + g["cnt"] + g["lin"]
        return g["reg"] <= max(cfg.gamma_reg * rest, cfg.abs_floor)
    gam = cfg.gamma_reg if cfg.gamma_reg_local is None else cfg.gamma_reg_local
    loc = report.local
    rest = loc["osc"] + loc["str"] + loc["Neu"] + loc["cnt"] + loc["lin"]
    return bool(np.all(loc["reg"] <= np.maximum(gam * rest, cfg.abs_floor)))


def mark(report: EstimatorReport, fraction: float) -> np.ndarray:
    """Indices of the ``ceil(fraction * N)`` largest local totals.

    Equal values are ordered by element index.  The result is sorted.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    eta = report.local["tot"]
    count = math.ceil(fraction * len(eta) - 1e-12)
    order = np.argsort(-eta, kind="stable")
    return np.sort(order[:count])


def spread_ratio(report: EstimatorReport) -> float:
    """``max_T eta_tot,T / median_T eta_tot,T`` (inf for a zero median)."""
    eta = report.local["tot"]
    med = float(np.median(eta))
    top = float(eta.max())
    if med == 0.0:
        return 0.0 if top == 0.0 else math.inf
    return top / med


def is_even(report: EstimatorReport, ratio: float) -> bool:
    return spread_ratio(report) <= ratio


# ------------------------------------------------------------ records
@dataclass
class RoundState:
    """Iterate that closed one regularization round."""

    delta: float
    newton_iterations: int
    u: DisplacementField
    report: EstimatorReport
    stress: EquilibratedStress


@dataclass
class StepRecord:
    """Everything produced on one mesh of the adaptive loop."""

    step: int
    mesh: TriMesh
    system: NitscheSystem
    u: DisplacementField
    report: EstimatorReport
    stress: EquilibratedStress
    delta: float
    n_reg: int
    n_lin: int
    rounds: list
    converged: bool
    marked: np.ndarray | None = None
    newton_history: list = field(default_factory=list)
    wall_time: float = 0.0
    errors: dict = field(default_factory=dict)

    @property
    def n_cells(self) -> int:
        return self.mesh.n_cells

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    @property
    def ndofs(self) -> int:
        return self.system.space.ndofs


@dataclass
class RunLog:
    steps: list = field(default_factory=list)
    strategy: str = "adaptive"
    stop_reason: str = ""

    def __len__(self) -> int:
        return len(self.steps)

    def __getitem__(self, i) -> StepRecord:
        return self.steps[i]

    def rows(self) -> list[dict]:
        """One summary row per step, without timing information."""
        out = []
        for s in self.steps:
            row = {"step": s.step, "n_cells": s.n_cells, "n_vertices": s.n_vertices, "ndofs": s.ndofs,
                   "n_reg": s.n_reg, "n_lin": s.n_lin, "delta": s.delta, "converged": int(s.converged),
                   "spread": spread_ratio(s.report)}
            row.update({f"eta_{k}": v for k, v in s.report.globals_.items()})
            row.update(s.errors)
            out.append(row)
        return out


# ---------------------------------------------------------- the loops
def solve_on_mesh(system: NitscheSystem, u0: DisplacementField, delta: float, cfg: AdaptiveConfig,
                  reconstructor: Reconstructor | None = None):
    """Regularization and Newton loops on a fixed mesh.

    Returns
    -------
    u : DisplacementField
        Last Newton iterate.
    delta : float
        The width restored after the regularization loop.
    rounds : list of RoundState
    history : list of dict
        Global estimators after every Newton iterate.
    converged : bool
        False when an iteration budget ran out.
    """
    rec = reconstructor or Reconstructor(system, cfg.threads)
    u_prev = u0
    rounds: list[RoundState] = []
    history = []
    converged = True
    for _round in range(cfg.max_reg_rounds):
        k = 0
        while True:
            k += 1
            u_k = system.solve_linearized(u_prev, delta)
            stress = rec.reconstruct(u_k, u_prev, delta)
            report = compute_report(system, u_k, stress, cfg.trace_constant)
            history.append({"delta": delta, "k": k, **report.globals_})
            u_prev = u_k
            if stop_newton(report, cfg):
                break
            if k >= cfg.newton_max_iters:
                converged = False
                break
        rounds.append(RoundState(delta, k, u_k, report, stress))
        delta *= cfg.delta_shrink
        if stop_regularization(report, cfg):
            break
    else:
        converged = False
    delta /= cfg.delta_shrink
    return u_k, delta, rounds, history, converged


def run(problem: ContactProblem, cfg: AdaptiveConfig, strategy: str = "adaptive",
        progress=None) -> RunLog:
    """Execute the adaptive algorithm or its uniform-refinement counterpart.

    Parameters
    ----------
    strategy : {"adaptive", "uniform"}
        Uniform refinement splits every element and skips the evenness test.
    progress : callable, optional
        Called with each finished :class:`StepRecord`.
    """
    if strategy not in ("adaptive", "uniform"):
        raise ValueError(f"unknown strategy {strategy!r}")
    log = RunLog(strategy=strategy)
    mesh = problem.mesh
    u = None
    delta = cfg.delta_init
    for step in range(cfg.max_steps + 1):
        t0 = time.perf_counter()
        system = NitscheSystem(problem, cfg.gamma0, mesh)
        u0 = system.space.zero() if u is None else transfer(u, system.space)
        rec = Reconstructor(system, cfg.threads)
        u, delta, rounds, history, ok = solve_on_mesh(system, u0, delta, cfg, rec)
        last = rounds[-1]
        record = StepRecord(step=step, mesh=mesh, system=system, u=u, report=last.report,
                            stress=last.stress, delta=delta, n_reg=len(rounds) - 1,
                            n_lin=sum(r.newton_iterations for r in rounds), rounds=rounds,
                            converged=ok, newton_history=history)
        log.steps.append(record)
        if strategy == "adaptive" and (last.report["tot"] <= cfg.abs_floor
                                       or is_even(last.report, cfg.evenness_ratio)):
            # A negligible estimator has no meaningful distribution to refine.
            record.wall_time = time.perf_counter() - t0
            log.stop_reason = "negligible" if last.report["tot"] <= cfg.abs_floor else "even"
            if progress:
                progress(record)
            break
        if step == cfg.max_steps:
            record.wall_time = time.perf_counter() - t0
            log.stop_reason = "budget"
            if progress:
                progress(record)
            break
        if strategy == "adaptive":
            record.marked = mark(last.report, cfg.fraction)
        else:
            record.marked = np.arange(mesh.n_cells)
        mesh = refine(mesh, record.marked)
        record.wall_time = time.perf_counter() - t0
        if progress:
            progress(record)
    return log
