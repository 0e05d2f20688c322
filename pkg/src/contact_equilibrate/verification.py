"""Independent checks: residual lifting, reference solutions, error norms.

Nothing here feeds back into the adaptive loop.  The functions compare
a computed state against quantities obtained by other routes: an elliptic
lifting of the residual (a computable lower approximation of its dual
norm), a fine quadratic reference solution, and mesh-overlay error norms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .femcore import (DisplacementField, FaceData, LagrangeSpace, assemble_load, lagrange_values,
                      map_points, physical_grads, solve_constrained, transfer)
from .mesh import Tag, TriMesh, refine_uniform
from .nitsche import NitscheConfig, NitscheSystem, newton_solve, proj_neg
from .problem import ContactProblem
from .quadrature import KINK_FACE_DEGREE, interval_rule, triangle_rule

ERROR_QUAD_DEGREE = 4


# ------------------------------------------------------------ helpers
def _parents(coarse: TriMesh, fine: TriMesh) -> np.ndarray:
    if fine is coarse:
        return np.arange(coarse.n_cells)
    cells, _ = coarse.locate(fine.centroids)
    if np.any(cells < 0):
        raise ValueError("meshes cover different domains")
    return cells


def contact_projection_at(system: NitscheSystem, u: DisplacementField, cells: np.ndarray,
                          points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """``[sigma_n(u) - gamma u.n]_-`` at points of the contact boundary.

    ``cells`` are the cells of ``system.mesh`` owning the points;
    ``normals`` the outward normals there, one per point.
    """
    mesh = system.mesh
    cells = np.asarray(cells).ravel()
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = np.asarray(normals, dtype=float).reshape(-1, 2)
    bary = mesh.barycentric(cells, pts)[:, None, :]
    s = u.stress_at(system.coeff, bary, cells)[:, 0]
    v = u.values_at(bary, cells)[:, 0]
    gamma = system.gamma0 / mesh.h_T[cells]
    p = np.einsum("ni,nij,nj->n", n, s, n) - gamma * np.einsum("ni,ni->n", v, n)
    return proj_neg(p)


# ------------------------------------------------------------ lifting
@dataclass
class LiftingResult:
    """Riesz representative of the residual in an enriched space.

    ``value`` is the mesh-dependent norm of ``z``; it equals the supremum of
    the residual over the unit ball of the enriched space, hence bounds the
    true dual norm from below.
    """

    z: DisplacementField
    value: float
    enrichment: str


def _vector_laplacian(space: LagrangeSpace) -> sp.csr_matrix:
    mesh = space.mesh
    rule = triangle_rule(max(2 * space.degree - 2, 1))
    G = physical_grads(mesh, space.degree, rule.points)
    w = rule.weights[None, :] * (2.0 * mesh.areas)[:, None]
    gg = np.einsum("mq,mqbd,mqed->mbe", w, G, G)
    nb = gg.shape[1]
    local = np.einsum("mbe,cd->mbced", gg, np.eye(2)).reshape(mesh.n_cells, 2 * nb, 2 * nb)
    dofs = space.cell_dofs
    rows = np.repeat(dofs, 2 * nb, axis=1).ravel()
    cols = np.tile(dofs, (1, 2 * nb)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(space.ndofs,) * 2)


def _coarse_face_lengths(coarse: TriMesh, fine: TriMesh, fine_faces: np.ndarray) -> np.ndarray:
    """Length of the coarse contact face containing each fine contact face."""
    cfaces = coarse.faces_with_tag(Tag.CONTACT)
    a = coarse.vertices[coarse.faces[cfaces, 0]]
    b = coarse.vertices[coarse.faces[cfaces, 1]]
    mid = 0.5 * (fine.vertices[fine.faces[fine_faces, 0]] + fine.vertices[fine.faces[fine_faces, 1]])
    d = b - a
    t = np.clip(np.einsum("fcd,cd->fc", mid[:, None, :] - a[None], d) / np.einsum("cd,cd->c", d, d), 0, 1)
    closest = a[None] + t[..., None] * d[None]
    dist = np.linalg.norm(mid[:, None, :] - closest, axis=-1)
    which = np.argmin(dist, axis=1)
    return coarse.h_F[cfaces[which]]


def lift_residual(system: NitscheSystem, u: DisplacementField, enrichment: str = "degree") -> LiftingResult:
    """Lift the residual of the nonlinear problem into an enriched space.

    Solves ``(grad z, grad v) + sum_F h_F^{-1} (z, v)_F = R(u)(v)`` over the
    contact faces ``F`` of the current mesh, with ``R(u)(v) = L(v) - a(u, v)
    + ([P(u)]_-, v.n)`` on the contact boundary.

    Parameters
    ----------
    enrichment : {"none", "degree", "refined"}
        ``"none"`` keeps the discrete space, ``"degree"`` raises the degree
        by one on the same mesh, ``"refined"`` also splits every element.
    """
    mesh = system.mesh
    p = system.space.degree
    if enrichment == "none":
        wmesh, deg = mesh, p
    elif enrichment == "degree":
        if p + 1 > 2:
            raise ValueError("degree enrichment is available for linear elements only")
        wmesh, deg = mesh, p + 1
    elif enrichment == "refined":
        wmesh, deg = refine_uniform(mesh, 1), min(p + 1, 2)
    else:
        raise ValueError(f"unknown enrichment {enrichment!r}")
    space = LagrangeSpace(wmesh, deg)
    parents = _parents(mesh, wmesh)
    A = _vector_laplacian(space)

    F = assemble_load(space, system.problem.body_force, system.problem.traction)
    rule = triangle_rule(deg + p + 2)
    w = rule.weights[None, :] * (2.0 * wmesh.areas)[:, None]
    pts = map_points(wmesh, rule.points)
    bary = mesh.barycentric(np.repeat(parents, rule.size), pts.reshape(-1, 2)).reshape(wmesh.n_cells, rule.size, 3)
    sig = u.stress_at(system.coeff, bary, parents)
    G = physical_grads(wmesh, deg, rule.points)
    loc = np.einsum("mq,mqij,mqbj->mbi", w, sig, G).reshape(wmesh.n_cells, -1)
    np.add.at(F, space.cell_dofs, -loc)

    cfaces = wmesh.faces_with_tag(Tag.CONTACT)
    if len(cfaces):
        fd = FaceData(space, cfaces)
        hF = _coarse_face_lengths(mesh, wmesh, cfaces) if wmesh is not mesh else fd.h_F
        mass = np.einsum("fq,fqb,fqe->fbe", fd.weights / hF[:, None], fd.phi, fd.phi)
        nb = mass.shape[1]
        local = np.einsum("fbe,cd->fbced", mass, np.eye(2)).reshape(len(cfaces), 2 * nb, 2 * nb)
        dofs = space.cell_dofs[fd.cells]
        rows = np.repeat(dofs, 2 * nb, axis=1).ravel()
        cols = np.tile(dofs, (1, 2 * nb)).ravel()
        A = A + sp.csr_matrix((local.ravel(), (rows, cols)), shape=A.shape)
        nq = fd.points.shape[1]
        owners = np.repeat(parents[fd.cells], nq)
        normals = np.repeat(fd.normals, nq, axis=0)
        neg = contact_projection_at(system, u, owners, fd.points.reshape(-1, 2), normals).reshape(len(cfaces), nq)
        loc = np.einsum("fq,fqb,fi->fbi", fd.weights * neg, fd.phi, fd.normals).reshape(len(cfaces), -1)
        np.add.at(F, dofs, loc)
    F[space.constrained_dofs] = 0.0
    z = solve_constrained(A, F, space)
    value = math.sqrt(max(float(z @ F), 0.0))
    return LiftingResult(DisplacementField(space, z), value, enrichment)


# ---------------------------------------------------------- reference
@dataclass
class ReferenceSolution:
    system: NitscheSystem
    u: DisplacementField
    newton_iterations: int

    @property
    def mesh(self) -> TriMesh:
        return self.system.mesh


def reference_solution(problem: ContactProblem, levels: int = 5, degree: int = 2, gamma0: float = 100.0,
                       deltas=(1.0, 1e-1, 1e-2, 1e-3, 1e-4), tol: float = 1e-12,
                       max_iters: int = 60, coarse_levels: int = 2) -> ReferenceSolution:
    """Quadratic solution on a uniformly refined mesh by continuation in delta.

    The full continuation runs ``coarse_levels`` refinements below the
    target; each finer mesh then starts from the interpolated solution and
    only solves with the final width.  ``gamma0`` and ``deltas`` are
    multiplied by the Young modulus.  Raises RuntimeError when Newton fails
    to reach ``tol``.
    """
    young = problem.young
    start = max(levels - coarse_levels, 0)
    mesh = refine_uniform(problem.mesh, start)
    u = None
    total = 0
    for level in range(start, levels + 1):
        if level > start:
            mesh = refine_uniform(mesh, 1)
        pb = ContactProblem(mesh, problem.coeff, problem.body_force, problem.traction, degree, young)
        system = NitscheSystem(pb, gamma0 * young)
        u = system.space.zero() if u is None else transfer(u, system.space)
        for d in (deltas if level == start else deltas[-1:]):
            cfg = NitscheConfig(gamma0 * young, d * young, newton_tol=tol, newton_max_iters=max_iters)
            u, trace = newton_solve(system, u, cfg)
            total += trace.iterations
            if not trace.converged:
                raise RuntimeError(f"reference Newton did not converge for delta={d} on level {level}")
    return ReferenceSolution(system, u, total)


# --------------------------------------------------------- mesh overlay
def _clip(subject: list, clipper: np.ndarray) -> list:
    """Sutherland-Hodgman clipping of a convex polygon by a CCW triangle."""
    out = subject
    for i in range(3):
        if not out:
            return out
        a = clipper[i]
        b = clipper[(i + 1) % 3]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inp = out
        out = []
        n = len(inp)
        for j in range(n):
            p = inp[j]
            q = inp[(j + 1) % n]
            sp_ = ex * (p[1] - a[1]) - ey * (p[0] - a[0])
            sq = ex * (q[1] - a[1]) - ey * (q[0] - a[0])
            if sp_ >= 0:
                out.append(p)
                if sq < 0:
                    s = sp_ / (sp_ - sq)
                    out.append((p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])))
            elif sq >= 0:
                s = sp_ / (sp_ - sq)
                out.append((p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])))
    return out


def overlay(mesh_a: TriMesh, mesh_b: TriMesh, tol: float = 1e-14):
    """Triangulated intersection of two meshes of the same domain.

    Returns
    -------
    tris : ndarray, shape (n, 3, 2)
        Sub-triangles, each inside one cell of either mesh.
    cells_a, cells_b : ndarray
        The containing cells.
    """
    xa = mesh_a.vertices[mesh_a.triangles]
    xb = mesh_b.vertices[mesh_b.triangles]
    ra = np.max(np.linalg.norm(xa - mesh_a.centroids[:, None], axis=-1), axis=1)
    rb = np.max(np.linalg.norm(xb - mesh_b.centroids[:, None], axis=-1), axis=1)
    tree = cKDTree(mesh_b.centroids)
    lo_b, hi_b = xb.min(axis=1), xb.max(axis=1)
    tris, ca, cb = [], [], []
    for i in range(mesh_a.n_cells):
        cand = np.asarray(tree.query_ball_point(mesh_a.centroids[i], ra[i] + rb.max()), dtype=np.int64)
        lo, hi = xa[i].min(axis=0), xa[i].max(axis=0)
        keep = np.all((lo_b[cand] <= hi + tol) & (hi_b[cand] >= lo - tol), axis=1)
        subject = [tuple(v) for v in xa[i]]
        for j in cand[keep]:
            poly = _clip(subject, xb[j])
            if len(poly) < 3:
                continue
            p0 = poly[0]
            for k in range(1, len(poly) - 1):
                t = (p0, poly[k], poly[k + 1])
                area2 = (t[1][0] - t[0][0]) * (t[2][1] - t[0][1]) - (t[2][0] - t[0][0]) * (t[1][1] - t[0][1])
                if area2 > tol * mesh_a.areas[i]:
                    tris.append(t)
                    ca.append(i)
                    cb.append(j)
    return np.asarray(tris, dtype=float).reshape(-1, 3, 2), np.asarray(ca), np.asarray(cb)


@dataclass
class ErrorNorms:
    h1: float
    energy: float
    l2: float
    cell_energy: np.ndarray


def error_norms(u: DisplacementField, ref: DisplacementField, coeff, overlay_data=None) -> ErrorNorms:
    """H1 and energy norms of ``ref - u`` integrated exactly on the mesh overlay.

    ``cell_energy`` holds the squared energy error per cell of ``u.mesh``.
    """
    mesh_a, mesh_b = u.mesh, ref.mesh
    tris, ca, cb = overlay_data if overlay_data is not None else overlay(mesh_a, mesh_b)
    rule = triangle_rule(ERROR_QUAD_DEGREE)
    area = 0.5 * np.abs((tris[:, 1, 0] - tris[:, 0, 0]) * (tris[:, 2, 1] - tris[:, 0, 1])
                        - (tris[:, 2, 0] - tris[:, 0, 0]) * (tris[:, 1, 1] - tris[:, 0, 1]))
    pts = np.einsum("qi,tid->tqd", rule.points, tris)
    w = rule.weights[None, :] * 2 * area[:, None]
    nq = rule.size
    ba = mesh_a.barycentric(np.repeat(ca, nq), pts.reshape(-1, 2)).reshape(len(tris), nq, 3)
    bb = mesh_b.barycentric(np.repeat(cb, nq), pts.reshape(-1, 2)).reshape(len(tris), nq, 3)
    dv = ref.values_at(bb, cb) - u.values_at(ba, ca)
    dg = ref.gradients_at(bb, cb) - u.gradients_at(ba, ca)
    eps = 0.5 * (dg + np.swapaxes(dg, -1, -2))
    sig = coeff.stress(eps)
    l2 = np.einsum("tq,tqi->", w, dv**2)
    semi = np.einsum("tq,tqij->", w, dg**2)
    en_t = np.einsum("tq,tqij,tqij->t", w, sig, eps)
    cell_energy = np.bincount(ca, weights=en_t, minlength=mesh_a.n_cells)
    return ErrorNorms(math.sqrt(l2 + semi), math.sqrt(max(en_t.sum(), 0.0)), math.sqrt(l2), cell_energy)


def contact_face_term(system: NitscheSystem, u: DisplacementField, ref: ReferenceSolution) -> float:
    """``(sum_F h_F ||sigma_n(ref) - [P(u)]_-||_F^2)^{1/2}`` over contact faces of ``u``'s mesh.

    Each face is split at the reference vertices it contains so that both
    traces are smooth on every piece.
    """
    mesh = system.mesh
    rmesh = ref.mesh
    faces = mesh.faces_with_tag(Tag.CONTACT)
    rfaces = rmesh.faces_with_tag(Tag.CONTACT)
    rverts = rmesh.vertices[np.unique(rmesh.faces[rfaces].ravel())]
    rule = interval_rule(KINK_FACE_DEGREE)
    total = 0.0
    for f in faces:
        a, b = mesh.vertices[mesh.faces[f]]
        d = b - a
        L = float(np.linalg.norm(d))
        s = (rverts - a) @ d / (L * L)
        off = np.abs((rverts[:, 0] - a[0]) * d[1] - (rverts[:, 1] - a[1]) * d[0]) / L
        cuts = np.unique(np.r_[0.0, s[(s > 1e-12) & (s < 1 - 1e-12) & (off < 1e-10 * L)], 1.0])
        t = (cuts[:-1, None] + np.diff(cuts)[:, None] * rule.points[None, :]).ravel()
        wt = (np.diff(cuts)[:, None] * rule.weights[None, :]).ravel() * L
        pts = a[None, :] + t[:, None] * d[None, :]
        n = mesh.face_normals[f]
        owner = np.full(len(t), mesh.face_cells[f, 0])
        neg = contact_projection_at(system, u, owner, pts, np.repeat(n[None], len(t), 0))
        rc, rb = rmesh.locate(pts)
        sref = ref.u.stress_at(ref.system.coeff, rb[:, None, :], rc)[:, 0]
        sn = np.einsum("i,nij,j->n", n, sref, n)
        total += mesh.h_F[f] * float(wt @ (sn - neg) ** 2)
    return math.sqrt(total)


# --------------------------------------------------------- diagnostics
class DegenerateDiagnostics(ValueError):
    """Raised when the error vanishes and effectivity indices are undefined."""


@dataclass
class DiagnosticPair:
    lower: float
    upper: float
    eta_tot: float
    energy_error: float
    h1_error: float
    face_term: float

    @property
    def i_eff_low(self) -> float:
        return self.eta_tot / self.lower

    @property
    def i_eff_up(self) -> float:
        return self.eta_tot / self.upper


def diagnostics(system: NitscheSystem, u: DisplacementField, ref: ReferenceSolution, eta_tot: float,
                norms: ErrorNorms | None = None) -> DiagnosticPair:
    """Lower and upper surrogates of the residual dual norm from a reference.

    ``lower = mu^{1/2} |||e|||`` and ``upper = (d lam + 4 mu)^{1/2} |||e|||``
    plus the contact face term, with ``d = 2``.
    """
    coeff = system.coeff
    if norms is None:
        norms = error_norms(u, ref.u, coeff)
    face = contact_face_term(system, u, ref)
    if norms.energy == 0.0:
        raise DegenerateDiagnostics("the discrete solution equals the reference")
    lower = math.sqrt(coeff.mu) * norms.energy
    upper = math.sqrt(2 * coeff.lam + 4 * coeff.mu) * norms.energy + face
    return DiagnosticPair(lower, upper, float(eta_tot), norms.energy, norms.h1, face)


def convergence_rate(ndofs, errors) -> float:
    """Negated least-squares slope of log(error) against log(ndofs).

    Uses the last ``ceil(n / 2)`` points; needs at least four.
    """
    x = np.log(np.asarray(ndofs, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    if len(x) < 4:
        raise ValueError("at least four points are needed to fit a rate")
    k = math.ceil(len(x) / 2)
    slope = np.polyfit(x[-k:], y[-k:], 1)[0]
    return float(-slope)


# ------------------------------------------------------ contact interval
def contact_interval(ref: ReferenceSolution, rule: str = "active", samples: int = 9,
                     gap_tol: float = 1e-6, deformed: bool = False):
    """Endpoints of the contact zone on the contact boundary.

    ``rule="active"`` takes the set where ``P(u) < 0`` with linearly
    interpolated sign changes.  ``rule="gap"`` takes faces whose normal
    displacement stays below ``gap_tol`` times the domain height and whose
    mean normal stress is negative, with the end faces' zero crossings of the
    normal displacement interpolated.

    Returns the longest contiguous interval as ``(start, end)`` measured
    along the boundary, or None when there is no contact.  With
    ``deformed=True`` the endpoints are moved with the displacement, which
    gives the zone as seen in the deformed body.
    """
    system, u = ref.system, ref.u
    mesh = system.mesh
    faces = mesh.faces_with_tag(Tag.CONTACT)
    a = mesh.vertices[mesh.faces[faces, 0]]
    b = mesh.vertices[mesh.faces[faces, 1]]
    d = b - a
    # Parametrize the contact boundary by the coordinate along its direction.
    axis = d[0] / np.linalg.norm(d[0])
    sa, sb = a @ axis, b @ axis
    order = np.argsort(np.minimum(sa, sb))
    t = np.linspace(0.0, 1.0, samples)
    xs, vals = [], []
    height = np.ptp(mesh.vertices, axis=0).max()
    for f_idx in order:
        f = faces[f_idx]
        pts = a[f_idx][None, :] + t[:, None] * d[f_idx][None, :]
        s = pts @ axis
        srt = np.argsort(s)
        pts, s = pts[srt], s[srt]
        owner = np.full(samples, mesh.face_cells[f, 0])
        n = mesh.face_normals[f]
        bary = mesh.barycentric(owner, pts)[:, None, :]
        st = u.stress_at(system.coeff, bary, owner)[:, 0]
        disp = u.values_at(bary, owner)[:, 0]
        sn = np.einsum("i,nij,j->n", n, st, n)
        un = disp @ n
        if rule == "active":
            vals.append(sn - system.gamma0 / mesh.h_T[owner] * un)
        elif rule == "gap":
            closed = (np.abs(un) < gap_tol * height) & (np.mean(sn) < 0)
            vals.append(np.where(closed, -1.0, 1.0) * np.maximum(np.abs(un), 1e-300))
        else:
            raise ValueError(f"unknown rule {rule!r}")
        xs.append(s)
    xs = np.concatenate(xs)
    vals = np.concatenate(vals)
    neg = vals < 0
    if not np.any(neg):
        return None
    runs = []
    i = 0
    while i < len(neg):
        if neg[i]:
            j = i
            while j + 1 < len(neg) and neg[j + 1]:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1

    def crossing(i0, i1):
        v0, v1 = vals[i0], vals[i1]
        if rule == "gap" or v0 == v1:
            return 0.5 * (xs[i0] + xs[i1])
        return xs[i0] + (xs[i1] - xs[i0]) * v0 / (v0 - v1)

    best = max(runs, key=lambda r: xs[r[1]] - xs[r[0]])
    i, j = best
    start = xs[i] if i == 0 else crossing(i - 1, i)
    end = xs[j] if j == len(neg) - 1 else crossing(j, j + 1)
    if deformed:
        ends = np.array([start, end])
        pts = ends[:, None] * axis[None, :] + (a[0] - (a[0] @ axis) * axis)[None, :]
        disp, _ = u.evaluate(pts)
        start, end = ends + disp @ axis
    return float(start), float(end)
