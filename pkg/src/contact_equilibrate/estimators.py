"""Element-wise a posteriori estimators built from an equilibrated stress."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from .equilibration import EquilibratedStress
from .femcore import DisplacementField, FaceData, face_bary, map_points
from .mesh import Tag, TriMesh
from .nitsche import NitscheSystem, proj_neg
from .quadrature import interval_rule, legendre_face_basis, triangle_rule

LOCAL_NAMES = ("osc", "str", "Neu", "cnt", "reg1", "reg2", "lin1", "lin2")
DERIVED_NAMES = ("reg", "lin", "tot")
ALL_NAMES = LOCAL_NAMES + DERIVED_NAMES

TRACE_SAFETY = 1.1
TRACE_DEGREE = 6


# ------------------------------------------------------ trace constants
def _monomials(deg: int):
    return [(i, j) for s in range(1, deg + 1) for i in range(s + 1) for j in [s - i]]


@lru_cache(maxsize=4096)
def _trace_constant_cached(shape_key: tuple, degree: int) -> float:
    # Triangle with the face on the x axis from (0, 0) to (1, 0), apex (ax, ay).
    ax, ay = shape_key
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [ax, ay]])
    center = verts.mean(axis=0)
    mons = _monomials(degree)
    rule = triangle_rule(2 * degree)
    x = rule.points @ verts - center
    area = 0.5 * ay
    w = rule.weights * 2 * area
    n = len(mons)
    gx = np.zeros((len(x), n))
    gy = np.zeros((len(x), n))
    for k, (i, j) in enumerate(mons):
        if i:
            gx[:, k] = i * x[:, 0] ** (i - 1) * x[:, 1] ** j
        if j:
            gy[:, k] = j * x[:, 0] ** i * x[:, 1] ** (j - 1)
    stiff = (gx * w[:, None]).T @ gx + (gy * w[:, None]).T @ gy
    frule = interval_rule(2 * degree)
    xf = np.column_stack([frule.points, np.zeros_like(frule.points)]) - center
    vals = np.column_stack([xf[:, 0] ** i * xf[:, 1] ** j for i, j in mons])
    wf = frule.weights
    mean = wf @ vals
    face_mass = (vals * wf[:, None]).T @ vals - np.outer(mean, mean)
    lam = sla.eigh(face_mass, stiff, eigvals_only=True)
    return float(np.sqrt(max(lam[-1], 0.0)))


def trace_constant(mesh: TriMesh, cell: int, face: int, degree: int = TRACE_DEGREE,
                   safety: float = TRACE_SAFETY) -> float:
    """Constant of ``||v - mean_F v||_F <= C h_F^{1/2} ||grad v||_T``.

    The Rayleigh quotient is maximized over polynomials of ``degree`` on
    the cell by a generalized eigenvalue problem and the square root of the
    maximum is multiplied by ``safety``.  The value only depends on the
    shape of the cell relative to the face, which is used as a cache key.
    """
    if face not in mesh.tri_faces[cell]:
        raise ValueError(f"face {face} is not a face of cell {cell}")
    a, b = mesh.vertices[mesh.faces[face]]
    apex = mesh.vertices[[v for v in mesh.triangles[cell] if v not in mesh.faces[face]][0]]
    e = b - a
    L2 = e @ e
    rel = apex - a
    s = (rel @ e) / L2
    hgt = abs(e[0] * rel[1] - e[1] * rel[0]) / L2
    # Reflection across the face midpoint normal leaves the quotient unchanged.
    s = min(s, 1.0 - s)
    key = (round(float(s), 12), round(float(hgt), 12))
    return safety * _trace_constant_cached(key, degree)


# ------------------------------------------------------------- report
@dataclass
class EstimatorReport:
    """Local estimators per element and their global aggregates.

    ``local[name]`` holds one value per element, for the names in
    :data:`ALL_NAMES`; ``globals_[name]`` is the root sum of squares.
    """

    mesh: TriMesh
    local: dict
    globals_: dict = field(init=False)

    def __post_init__(self):
        loc = self.local
        loc["reg"] = loc["reg1"] + loc["reg2"]
        loc["lin"] = loc["lin1"] + loc["lin2"]
        first = loc["osc"] + loc["str"] + loc["reg1"] + loc["lin1"] + loc["Neu"]
        second = loc["cnt"] + loc["reg2"] + loc["lin2"]
        loc["tot"] = np.hypot(first, second)
        self.globals_ = {k: float(np.sqrt(np.sum(v**2))) for k, v in loc.items()}

    def __getitem__(self, name: str) -> float:
        return self.globals_[name]

    @property
    def n_cells(self) -> int:
        return len(self.local["osc"])

    def write_csv(self, path) -> None:
        """One row per element followed by one summary row of globals."""
        cent = self.mesh.centroids
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["element", "x", "y", "h_T", *ALL_NAMES])
            for t in range(self.n_cells):
                w.writerow([t, *(f"{v:.17g}" for v in (cent[t, 0], cent[t, 1], self.mesh.h_T[t])),
                            *(f"{self.local[k][t]:.17g}" for k in ALL_NAMES)])
            w.writerow(["global", "", "", "", *(f"{self.globals_[k]:.17g}" for k in ALL_NAMES)])


def guaranteed_bound(report: EstimatorReport) -> float:
    """Guaranteed bound on the residual dual norm from the global estimators."""
    g = report.globals_
    first = g["osc"] + g["str"] + g["reg1"] + g["lin1"] + g["Neu"]
    second = g["cnt"] + g["reg2"] + g["lin2"]
    return float(np.hypot(first, second))


def _l2_cells(values: np.ndarray, W: np.ndarray) -> np.ndarray:
    axes = tuple(range(2, values.ndim))
    return np.sqrt(np.einsum("mq,mq->m", W, np.sum(values**2, axis=axes)))


def _face_trace(stress_field, faces, cells, local, t) -> np.ndarray:
    mesh = stress_field.mesh
    bary = face_bary(mesh, cells, local, t)
    return np.einsum("fqij,fj->fqi", stress_field.values_at(bary, cells), mesh.face_normals[faces])


def compute_report(system: NitscheSystem, u_k: DisplacementField, stress: EquilibratedStress,
                   trace_override: float | None = None) -> EstimatorReport:
    """Evaluate all local estimators for the iterate ``u_k``.

    Parameters
    ----------
    trace_override : float, optional
        Use this value for every trace constant instead of computing it.
    """
    mesh = system.mesh
    M = mesh.n_cells
    q = stress.degree
    total = stress.total
    rule = triangle_rule(2 * q + 4)
    W = rule.weights[None, :] * (2.0 * mesh.areas)[:, None]
    pts = map_points(mesh, rule.points)
    fx = np.asarray(system.problem.body_force(pts.reshape(-1, 2)), dtype=float).reshape(pts.shape)
    loc = {k: np.zeros(M) for k in LOCAL_NAMES}
    loc["osc"] = mesh.h_T / np.pi * _l2_cells(fx + total.divergence_at(rule.points), W)
    su = u_k.stress_at(system.coeff, rule.points)
    loc["str"] = _l2_cells(stress.dis.values_at(rule.points) - su, W)
    loc["reg1"] = _l2_cells(stress.reg.values_at(rule.points), W)
    loc["lin1"] = _l2_cells(stress.lin.values_at(rule.points), W)

    nfaces = mesh.faces_with_tag(Tag.NEUMANN)
    if len(nfaces):
        nd = FaceData(system.space, nfaces)
        g = np.asarray(system.problem.traction(nd.points.reshape(-1, 2)), dtype=float).reshape(nd.points.shape)
        gap = g - _face_trace(total, nd.faces, nd.cells, nd.local, nd.t)
        norms = np.sqrt(np.einsum("fq,fqi->f", nd.weights, gap**2))
        if trace_override is None:
            ct = np.array([trace_constant(mesh, c, f) for c, f in zip(nd.cells, nd.faces)])
        else:
            ct = np.full(len(nfaces), float(trace_override))
        np.add.at(loc["Neu"], nd.cells, ct * np.sqrt(nd.h_F) * norms)

    c = system.contact
    if len(c):
        sqh = np.sqrt(c.h_F)
        n = c.normals

        def normal_part(field):
            tr = _face_trace(field, c.faces, c.cells, c.local, c.t)
            return np.einsum("fqi,fi->fq", tr, n)

        def face_norm(vals):
            return sqh * np.sqrt(np.einsum("fq,fq->f", c.weights, vals**2))

        neg = proj_neg(system.p_values(u_k))
        np.add.at(loc["cnt"], c.cells, face_norm(neg - normal_part(stress.dis)))
        np.add.at(loc["reg2"], c.cells, face_norm(normal_part(stress.reg)))
        np.add.at(loc["lin2"], c.cells, face_norm(normal_part(stress.lin)))
    return EstimatorReport(mesh, loc)


# ------------------------------------------------- alternative expressions
def alternative_estimators(system: NitscheSystem, u_k: DisplacementField,
                           trace_override: float | None = None) -> dict:
    """Oscillation, Neumann and contact estimators written with projections.

    These agree with the direct formulas whenever the reconstruction
    balances the data up to polynomial projections, so they make a second,
    reconstruction-free route to the same numbers.
    """
    mesh = system.mesh
    M = mesh.n_cells
    p = system.space.degree
    out = {k: np.zeros(M) for k in ("osc", "Neu", "cnt")}

    rule = triangle_rule(2 * p + 4)
    W = rule.weights[None, :] * (2.0 * mesh.areas)[:, None]
    pts = map_points(mesh, rule.points)
    fx = np.asarray(system.problem.body_force(pts.reshape(-1, 2)), dtype=float).reshape(pts.shape)
    # Orthogonal projection onto P^{p-1}(T) through monomials about the centroid.
    rel = (pts - mesh.centroids[:, None, :]) / mesh.h_T[:, None, None]
    mons = [(i, s - i) for s in range(p) for i in range(s + 1)]
    basis = np.stack([rel[..., 0] ** i * rel[..., 1] ** j for i, j in mons], axis=-1)
    gram = np.einsum("mq,mqa,mqb->mab", W, basis, basis)
    rhs = np.einsum("mq,mqa,mqi->mai", W, basis, fx)
    coef = np.linalg.solve(gram, rhs)
    proj = np.einsum("mqa,mai->mqi", basis, coef)
    out["osc"] = mesh.h_T / np.pi * _l2_cells(fx - proj, W)

    def projection_gap(values, weights, t):
        chi = legendre_face_basis(p, t)
        gram = np.einsum("fq,qr,qs->frs", weights, chi, chi)
        rhs = np.einsum("fq,qr,fq...->fr...", weights, chi, values)
        shape = rhs.shape
        co = np.linalg.solve(gram, rhs.reshape(shape[0], p + 1, -1)).reshape(shape)
        return values - np.einsum("qr,fr...->fq...", chi, co)

    nfaces = mesh.faces_with_tag(Tag.NEUMANN)
    if len(nfaces):
        nd = FaceData(system.space, nfaces)
        g = np.asarray(system.problem.traction(nd.points.reshape(-1, 2)), dtype=float).reshape(nd.points.shape)
        gap = projection_gap(g, nd.weights, nd.t)
        norms = np.sqrt(np.einsum("fq,fqi->f", nd.weights, gap**2))
        if trace_override is None:
            ct = np.array([trace_constant(mesh, c, f) for c, f in zip(nd.cells, nd.faces)])
        else:
            ct = np.full(len(nfaces), float(trace_override))
        np.add.at(out["Neu"], nd.cells, ct * np.sqrt(nd.h_F) * norms)

    c = system.contact
    if len(c):
        neg = proj_neg(system.p_values(u_k))
        gap = projection_gap(neg, c.weights, c.t)
        np.add.at(out["cnt"], c.cells, np.sqrt(c.h_F) * np.sqrt(np.einsum("fq,fq->f", c.weights, gap**2)))
    return out
