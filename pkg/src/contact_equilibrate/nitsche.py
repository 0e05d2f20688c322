"""Nitsche discretization of frictionless unilateral contact and its Newton solver.

The discrete problem reads: find ``u`` with

    a(u, v) - ([P(u)]_-, v.n)_C = L(v)     for all v,

where ``P(u) = sigma_n(u) - gamma u.n`` and ``gamma = gamma0 / h_T`` of the
cell owning the contact face.  The kink of ``[x]_- = min(x, 0)`` is smoothed
by a C1 regularization of width ``delta`` and the resulting equation is
linearized by Newton's method.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .femcore import (DisplacementField, FaceData, LagrangeSpace, assemble_elastic_stiffness,
                      assemble_load, face_bary, lagrange_values, physical_grads)
from .mesh import Tag, TriMesh
from .problem import ContactProblem


def proj_neg(x):
    """Projection onto the non-positive reals."""
    return np.minimum(x, 0.0)


def reg_proj(x, delta: float):
    """C1 regularization of ``min(x, 0)`` and its derivative.

    The two coincide with ``min(x, 0)`` and its derivative for
    ``|x| >= delta``; inside the band a quadratic joins them.

    Returns
    -------
    value, derivative : ndarray or float
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    x = np.asarray(x, dtype=float)
    band = np.abs(x) < delta
    value = np.where(x <= -delta, x, 0.0)
    deriv = np.where(x <= -delta, 1.0, 0.0)
    xb = x[band]
    value = np.asarray(value)
    deriv = np.asarray(deriv)
    value[band] = -xb * xb / (4 * delta) + xb / 2 - delta / 4
    deriv[band] = -xb / (2 * delta) + 0.5
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


@dataclass(frozen=True)
class NitscheConfig:
    """Nitsche and Newton parameters.

    Attributes
    ----------
    gamma0 : float
        Nitsche parameter; the face penalty is ``gamma0 / h_T``.
    delta : float
        Width of the regularization band.
    newton_tol : float
        Relative increment below which Newton stops regardless of any
        estimator-based criterion.
    newton_max_iters : int
    """

    gamma0: float
    delta: float
    newton_tol: float = 1e-10
    newton_max_iters: int = 60

    def __post_init__(self):
        if not self.gamma0 > 0:
            raise ValueError("gamma0 must be positive")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not self.newton_tol > 0 or self.newton_max_iters < 1:
            raise ValueError("invalid Newton controls")

    def with_delta(self, delta: float) -> "NitscheConfig":
        return NitscheConfig(self.gamma0, delta, self.newton_tol, self.newton_max_iters)


class NitscheSystem:
    """Assembled operators of the contact problem on one mesh.

    Parameters
    ----------
    problem : ContactProblem
    mesh : TriMesh, optional
        Mesh to discretize on (defaults to ``problem.mesh``).
    gamma0 : float
    """

    def __init__(self, problem: ContactProblem, gamma0: float, mesh: TriMesh | None = None):
        self.problem = problem
        self.mesh = problem.mesh if mesh is None else mesh
        self.coeff = problem.coeff
        self.gamma0 = float(gamma0)
        self.space = LagrangeSpace(self.mesh, problem.degree)
        self.stiffness = assemble_elastic_stiffness(self.space, self.coeff).tocsr()
        self.load = assemble_load(self.space, problem.body_force, problem.traction)
        self.contact = FaceData(self.space, self.mesh.faces_with_tag(Tag.CONTACT))
        self.gamma = self.gamma0 / self.contact.h_T
        self._build_contact_rows()

    def _build_contact_rows(self) -> None:
        c = self.contact
        lam, mu = self.coeff.lam, self.coeff.mu
        n = c.normals[:, None, None, :]  # (F,1,1,2)
        G = c.dphi  # (F,q,b,2)
        Gn = np.einsum("fqbd,fd->fqb", G, c.normals)
        nf = len(c)
        nq = c.phi.shape[1]
        nb = c.phi.shape[2]
        # sigma_n of the vector basis function phi_b e_c
        sn = lam * G + 2 * mu * Gn[..., None] * n
        un = c.phi[..., None] * n
        self.sn_rows = sn.reshape(nf, nq, 2 * nb)
        self.un_rows = un.reshape(nf, nq, 2 * nb)
        self.p_rows = self.sn_rows - self.gamma[:, None, None] * self.un_rows
        self.contact_dofs = self.space.cell_dofs[c.cells]

    # -------------------------------------------------------------- traces
    def _local(self, u) -> np.ndarray:
        coeffs = u.coeffs if isinstance(u, DisplacementField) else np.asarray(u)
        return coeffs[self.contact_dofs]

    def p_values(self, u) -> np.ndarray:
        """``P(u)`` at the contact quadrature points, shape ``(nF, nq)``."""
        return np.einsum("fqi,fi->fq", self.p_rows, self._local(u))

    def normal_stress(self, u) -> np.ndarray:
        return np.einsum("fqi,fi->fq", self.sn_rows, self._local(u))

    def normal_displacement(self, u) -> np.ndarray:
        return np.einsum("fqi,fi->fq", self.un_rows, self._local(u))

    def plin_values(self, u_k, u_prev, delta: float) -> np.ndarray:
        """Linearized projection ``r + d (P(u_k) - P(u_prev))`` at contact points."""
        p_prev = self.p_values(u_prev)
        r, d = reg_proj(p_prev, delta)
        return r + d * (self.p_values(u_k) - p_prev)

    # ----------------------------------------------------------- assembly
    def _face_matrix(self, local: np.ndarray) -> sp.csr_matrix:
        dofs = self.contact_dofs
        n = dofs.shape[1]
        rows = np.repeat(dofs, n, axis=1).ravel()
        cols = np.tile(dofs, (1, n)).ravel()
        return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(self.space.ndofs,) * 2)

    def newton_system(self, u_prev, delta: float) -> tuple[sp.csr_matrix, np.ndarray]:
        """Matrix and right-hand side of the problem linearized at ``u_prev``."""
        F = self.load.copy()
        if len(self.contact) == 0:
            return self.stiffness.copy(), F
        p_prev = self.p_values(u_prev)
        r, d = reg_proj(p_prev, delta)
        w = self.contact.weights
        local = -np.einsum("fq,fqi,fqj->fij", w * d, self.un_rows, self.p_rows)
        A = self.stiffness + self._face_matrix(local)
        rhs_local = np.einsum("fq,fqi->fi", w * (r - d * p_prev), self.un_rows)
        np.add.at(F, self.contact_dofs, rhs_local)
        return A.tocsr(), F

    def solve_linearized(self, u_prev: DisplacementField, delta: float) -> DisplacementField:
        A, F = self.newton_system(u_prev, delta)
        return DisplacementField(self.space, self.solve(A, F))

    def solve(self, A: sp.spmatrix, F: np.ndarray) -> np.ndarray:
        free = self.space.free_dofs
        u = np.zeros(self.space.ndofs)
        Aff = sp.csc_matrix(A)[free][:, free]
        u[free] = spsolve(Aff, F[free])
        return u

    def residual(self, u, delta: float | None = None) -> np.ndarray:
        """Residual vector ``L(v) - a(u, v) + ([P(u)], v.n)`` on free dofs.

        Uses the exact projection when ``delta`` is None and the regularized
        one otherwise.  Constrained entries are zero.
        """
        coeffs = u.coeffs if isinstance(u, DisplacementField) else np.asarray(u)
        res = self.load - self.stiffness @ coeffs
        if len(self.contact):
            p = self.p_values(coeffs)
            proj = proj_neg(p) if delta is None else reg_proj(p, delta)[0]
            loc = np.einsum("fq,fqi->fi", self.contact.weights * proj, self.un_rows)
            np.add.at(res, self.contact_dofs, loc)
        res[self.space.constrained_dofs] = 0.0
        return res

    def active_set_size(self, u, delta: float) -> int:
        """Contact quadrature points where ``P(u) < delta``."""
        if len(self.contact) == 0:
            return 0
        return int(np.count_nonzero(self.p_values(u) < delta))


def p1gamma(system: NitscheSystem, u: DisplacementField, face: int, x) -> float:
    """``sigma_n(u) - gamma0/h_T u.n`` at a point ``x`` of a contact face."""
    mesh = system.mesh
    if mesh.face_tags[face] != Tag.CONTACT:
        raise ValueError(f"face {face} is not a contact face")
    a, b = mesh.vertices[mesh.faces[face]]
    d = b - a
    t = float((np.asarray(x, dtype=float) - a) @ d / (d @ d))
    cell = mesh.face_cells[face, 0]
    bary = face_bary(mesh, [cell], [mesh.face_local[face, 0]], np.array([t]))
    n = mesh.face_normals[face]
    s = u.stress_at(system.coeff, bary, np.array([cell]))[0, 0]
    disp = u.values_at(bary, np.array([cell]))[0, 0]
    gamma = system.gamma0 / mesh.h_T[cell]
    return float(n @ s @ n - gamma * disp @ n)


@dataclass
class NewtonTrace:
    """Per-iterate record of a Newton run."""

    increments: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    active_points: list = field(default_factory=list)
    converged: bool = False
    stopped_by_callback: bool = False

    @property
    def iterations(self) -> int:
        return len(self.increments)


StopCallback = Callable[[DisplacementField, DisplacementField, int], bool]


def newton_solve(system: NitscheSystem, u0: DisplacementField, cfg: NitscheConfig,
                 stop: StopCallback | None = None) -> tuple[DisplacementField, NewtonTrace]:
    """Newton iterations on the regularized problem.

    Each iterate solves the problem linearized at the previous one.  The
    loop ends when ``stop(u_k, u_prev, k)`` returns True, when the relative
    increment drops below ``cfg.newton_tol``, or after
    ``cfg.newton_max_iters`` iterations (``trace.converged`` is then False).
    """
    trace = NewtonTrace()
    u_prev = u0
    load_scale = max(np.linalg.norm(system.load), np.finfo(float).tiny)
    for k in range(1, cfg.newton_max_iters + 1):
        u_k = system.solve_linearized(u_prev, cfg.delta)
        inc = np.linalg.norm(u_k.coeffs - u_prev.coeffs)
        scale = max(np.linalg.norm(u_k.coeffs), np.finfo(float).tiny)
        trace.increments.append(inc / scale if np.linalg.norm(u_k.coeffs) > 0 else inc)
        trace.residuals.append(np.linalg.norm(system.residual(u_k, cfg.delta)) / load_scale)
        trace.active_points.append(system.active_set_size(u_k, cfg.delta))
        small = inc <= cfg.newton_tol * scale
        if stop is not None and stop(u_k, u_prev, k):
            trace.stopped_by_callback = True
            trace.converged = True
            return u_k, trace
        if small:
            trace.converged = True
            return u_k, trace
        u_prev = u_k
    return u_k, trace
