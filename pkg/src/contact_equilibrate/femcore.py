"""Lagrange bases, vector Lagrange spaces and elasticity assembly."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .mesh import Tag, TriMesh
from .quadrature import (KINK_FACE_DEGREE, element_degree, interval_rule, legendre_face_basis,
                         triangle_rule)

VectorField = Callable[[np.ndarray], np.ndarray]


# ------------------------------------------------------------------ material
@dataclass(frozen=True)
class ElasticityCoefficients:
    """Lamé parameters of an isotropic material."""

    lam: float
    mu: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if not 2 * self.lam + 2 * self.mu > 0:
            raise ValueError("2 lambda + 2 mu must be positive")

    @classmethod
    def plane_strain(cls, young: float, poisson: float) -> "ElasticityCoefficients":
        """Lamé parameters of the plane-strain model for given E and nu."""
        if young <= 0:
            raise ValueError("Young modulus must be positive")
        if not -1.0 < poisson < 0.5:
            raise ValueError("Poisson ratio must lie in (-1, 1/2)")
        lam = young * poisson / ((1 + poisson) * (1 - 2 * poisson))
        mu = young / (2 * (1 + poisson))
        return cls(lam, mu)

    def stress(self, strain: np.ndarray) -> np.ndarray:
        """Apply the elasticity tensor to (..., 2, 2) strains."""
        tr = strain[..., 0, 0] + strain[..., 1, 1]
        out = 2 * self.mu * strain
        out[..., 0, 0] += self.lam * tr
        out[..., 1, 1] += self.lam * tr
        return out


# ------------------------------------------------------------------ bases
def n_local(q: int) -> int:
    return (q + 1) * (q + 2) // 2


def lagrange_values(q: int, bary: np.ndarray) -> np.ndarray:
    """Scalar Lagrange basis of degree ``q`` at barycentric points.

    Node ordering is vertices first, then the edge opposite vertex 0, 1, 2.
    Returns shape ``(n, n_local(q))``.
    """
    b = np.asarray(bary, dtype=float).reshape(-1, 3)
    if q == 0:
        return np.ones((len(b), 1))
    if q == 1:
        return b.copy()
    if q == 2:
        out = np.empty((len(b), 6))
        out[:, :3] = b * (2 * b - 1)
        for i in range(3):
            out[:, 3 + i] = 4 * b[:, (i + 1) % 3] * b[:, (i + 2) % 3]
        return out
    raise ValueError(f"degree {q} not supported")


def lagrange_bary_grads(q: int, bary: np.ndarray) -> np.ndarray:
    """Derivatives with respect to the barycentric coordinates, ``(n, nb, 3)``."""
    b = np.asarray(bary, dtype=float).reshape(-1, 3)
    n = len(b)
    if q == 0:
        return np.zeros((n, 1, 3))
    if q == 1:
        return np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    if q == 2:
        out = np.zeros((n, 6, 3))
        for i in range(3):
            out[:, i, i] = 4 * b[:, i] - 1
            j, k = (i + 1) % 3, (i + 2) % 3
            out[:, 3 + i, j] = 4 * b[:, k]
            out[:, 3 + i, k] = 4 * b[:, j]
        return out
    raise ValueError(f"degree {q} not supported")


def physical_grads(mesh: TriMesh, q: int, bary: np.ndarray, cells=None) -> np.ndarray:
    """Physical gradients of the degree-``q`` basis, ``(M, n, nb, 2)``.

    ``bary`` is either shared by all cells, shape ``(n, 3)``, or given per
    cell with shape ``(M, n, 3)``.
    """
    gb = mesh.grad_bary if cells is None else mesh.grad_bary[cells]
    bary = np.asarray(bary, dtype=float)
    if bary.ndim == 2:
        db = lagrange_bary_grads(q, bary)
        return np.einsum("qbi,mid->mqbd", db, gb)
    db = lagrange_bary_grads(q, bary.reshape(-1, 3)).reshape(bary.shape[0], bary.shape[1], n_local(q), 3)
    return np.einsum("mqbi,mid->mqbd", db, gb)


def map_points(mesh: TriMesh, bary: np.ndarray, cells=None) -> np.ndarray:
    """Physical coordinates of barycentric points, ``(M, n, 2)``."""
    x = mesh.vertices[mesh.triangles if cells is None else mesh.triangles[cells]]
    bary = np.asarray(bary, dtype=float)
    if bary.ndim == 2:
        return np.einsum("qi,mid->mqd", bary, x)
    return np.einsum("mqi,mid->mqd", bary, x)


def face_bary(mesh: TriMesh, cells: np.ndarray, local_faces: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of face points given by the global parameter.

    The parameter ``t`` runs from the lower to the higher global vertex of
    the face, so both cells sharing a face see the same physical points.
    Returns ``(len(cells), len(t), 3)``.
    """
    cells = np.asarray(cells)
    local_faces = np.asarray(local_faces)
    out = np.zeros((len(cells), len(t), 3))
    tris = mesh.triangles[cells]
    rows = np.arange(len(cells))
    j = (local_faces + 1) % 3
    k = (local_faces + 2) % 3
    forward = tris[rows, j] < tris[rows, k]
    first = np.where(forward, j, k)
    second = np.where(forward, k, j)
    out[rows[:, None], np.arange(len(t))[None, :], first[:, None]] = 1.0 - t[None, :]
    out[rows[:, None], np.arange(len(t))[None, :], second[:, None]] = t[None, :]
    return out


# ------------------------------------------------------------------ spaces
class LagrangeSpace:
    """Continuous vector Lagrange space of degree 1 or 2.

    Scalar nodes are the mesh vertices followed (for degree 2) by one node
    per face.  Vector dof ``2*node + c`` carries component ``c``; the local
    dof ``2*b + c`` of a cell pairs local node ``b`` with component ``c``.
    Dofs on closed Dirichlet faces are constrained to zero.
    """

    def __init__(self, mesh: TriMesh, degree: int):
        if degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        self.mesh = mesh
        self.degree = degree
        nv = mesh.n_vertices
        if degree == 1:
            self.cell_nodes = mesh.triangles.copy()
            self.node_coords = mesh.vertices
        else:
            self.cell_nodes = np.hstack([mesh.triangles, nv + mesh.tri_faces])
            mids = 0.5 * (mesh.vertices[mesh.faces[:, 0]] + mesh.vertices[mesh.faces[:, 1]])
            self.node_coords = np.vstack([mesh.vertices, mids])
        self.n_nodes = len(self.node_coords)
        self.ndofs = 2 * self.n_nodes
        self.cell_dofs = (2 * self.cell_nodes[:, :, None] + np.arange(2)).reshape(mesh.n_cells, -1)
        dface = mesh.faces_with_tag(Tag.DIRICHLET)
        nodes = set(mesh.faces[dface].ravel().tolist())
        if degree == 2:
            nodes.update((nv + dface).tolist())
        self.dirichlet_nodes = np.array(sorted(nodes), dtype=np.int64)
        self.constrained_dofs = (2 * self.dirichlet_nodes[:, None] + np.arange(2)).ravel()
        mask = np.ones(self.ndofs, dtype=bool)
        mask[self.constrained_dofs] = False
        self.free_dofs = np.flatnonzero(mask)

    @property
    def n_local_nodes(self) -> int:
        return n_local(self.degree)

    def element_rule(self):
        return triangle_rule(element_degree(self.degree))

    def cell_coefficients(self, coeffs: np.ndarray, cells=None) -> np.ndarray:
        """Coefficients arranged per cell, shape ``(M, nb, 2)``."""
        dofs = self.cell_dofs if cells is None else self.cell_dofs[cells]
        return np.asarray(coeffs)[dofs].reshape(len(dofs), -1, 2)

    def interpolate(self, func: VectorField) -> np.ndarray:
        """Nodal interpolant of a vector function."""
        vals = np.asarray(func(self.node_coords), dtype=float).reshape(self.n_nodes, 2)
        return vals.ravel()

    def zero(self) -> "DisplacementField":
        return DisplacementField(self, np.zeros(self.ndofs))


@dataclass
class DisplacementField:
    """Coefficient vector over a vector Lagrange space."""

    space: LagrangeSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.ndofs,):
            raise ValueError("coefficient vector has the wrong length")

    @property
    def mesh(self) -> TriMesh:
        return self.space.mesh

    def copy(self) -> "DisplacementField":
        return DisplacementField(self.space, self.coeffs.copy())

    def values_at(self, bary: np.ndarray, cells=None) -> np.ndarray:
        """Values at barycentric points, ``(M, n, 2)``."""
        u = self.space.cell_coefficients(self.coeffs, cells)
        bary = np.asarray(bary, dtype=float)
        if bary.ndim == 2:
            phi = lagrange_values(self.space.degree, bary)
            return np.einsum("qb,mbc->mqc", phi, u)
        phi = lagrange_values(self.space.degree, bary.reshape(-1, 3)).reshape(*bary.shape[:2], -1)
        return np.einsum("mqb,mbc->mqc", phi, u)

    def gradients_at(self, bary: np.ndarray, cells=None) -> np.ndarray:
        """Gradients ``G[..., c, j] = d u_c / d x_j``, shape ``(M, n, 2, 2)``."""
        u = self.space.cell_coefficients(self.coeffs, cells)
        dphi = physical_grads(self.space.mesh, self.space.degree, bary, cells)
        return np.einsum("mqbj,mbc->mqcj", dphi, u)

    def stress_at(self, coeff: ElasticityCoefficients, bary: np.ndarray, cells=None) -> np.ndarray:
        g = self.gradients_at(bary, cells)
        return coeff.stress(0.5 * (g + np.swapaxes(g, -1, -2)))

    def evaluate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values and gradients at arbitrary physical points."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        cells, bary = self.mesh.locate(pts)
        if np.any(cells < 0):
            raise ValueError("point outside the mesh")
        vals = self.values_at(bary[:, None, :], cells)[:, 0]
        grads = self.gradients_at(bary[:, None, :], cells)[:, 0]
        return vals, grads


def transfer(field: DisplacementField, space: LagrangeSpace) -> DisplacementField:
    """Nodal interpolation of a field onto another space (e.g. a refined mesh).

    Dirichlet dofs of the target are set to zero.
    """
    vals, _ = field.evaluate(space.node_coords)
    coeffs = vals.ravel()
    coeffs[space.constrained_dofs] = 0.0
    return DisplacementField(space, coeffs)


# ---------------------------------------------------------------- assembly
def _scatter(space: LagrangeSpace, local: np.ndarray, cells=None) -> sp.csr_matrix:
    dofs = space.cell_dofs if cells is None else space.cell_dofs[cells]
    n = dofs.shape[1]
    rows = np.repeat(dofs, n, axis=1).ravel()
    cols = np.tile(dofs, (1, n)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(space.ndofs, space.ndofs))


def local_elastic_stiffness(space: LagrangeSpace, coeff: ElasticityCoefficients) -> np.ndarray:
    """Element matrices ``(M, 2nb, 2nb)``."""
    mesh = space.mesh
    rule = space.element_rule()
    G = physical_grads(mesh, space.degree, rule.points)  # (M, q, b, 2)
    w = rule.weights[None, :] * (2.0 * mesh.areas)[:, None]
    lam, mu = coeff.lam, coeff.mu
    nb = G.shape[2]
    K = np.einsum("mq,mqbc,mqed->mbced", w, G, G) * lam
    K += mu * np.einsum("mq,mqbd,mqec->mbced", w, G, G)
    gg = np.einsum("mq,mqbd,mqed->mbe", w, G, G)
    K += mu * np.einsum("mbe,cd->mbced", gg, np.eye(2))
    return K.reshape(mesh.n_cells, 2 * nb, 2 * nb)


def assemble_elastic_stiffness(space: LagrangeSpace, coeff: ElasticityCoefficients) -> sp.csr_matrix:
    """Global stiffness of ``a(u, v) = (sigma(u), eps(v))`` without constraints."""
    return _scatter(space, local_elastic_stiffness(space, coeff))


def assemble_load(space: LagrangeSpace, body_force: VectorField | None,
                  traction: VectorField | None) -> np.ndarray:
    """Load vector of ``(f, v) + (g_N, v)`` on the Neumann faces."""
    mesh = space.mesh
    F = np.zeros(space.ndofs)
    if body_force is not None:
        rule = space.element_rule()
        x = map_points(mesh, rule.points)
        fx = np.asarray(body_force(x.reshape(-1, 2)), dtype=float).reshape(x.shape)
        phi = lagrange_values(space.degree, rule.points)
        w = rule.weights[None, :] * (2.0 * mesh.areas)[:, None]
        loc = np.einsum("mq,qb,mqc->mbc", w, phi, fx).reshape(mesh.n_cells, -1)
        np.add.at(F, space.cell_dofs, loc)
    if traction is not None:
        faces = mesh.faces_with_tag(Tag.NEUMANN)
        if len(faces):
            data = FaceData(space, faces)
            g = np.asarray(traction(data.points.reshape(-1, 2)), dtype=float).reshape(data.points.shape)
            loc = np.einsum("fq,fqb,fqc->fbc", data.weights, data.phi, g).reshape(len(faces), -1)
            np.add.at(F, space.cell_dofs[data.cells], loc)
    return F


class FaceData:
    """Quadrature data of a set of boundary faces seen from their owner cells.

    Attributes
    ----------
    faces, cells, local : ndarray
        Face ids, owner cells and the local face index in the owner.
    t : ndarray
        Face parameter of the quadrature points (lower to higher vertex).
    weights : ndarray, shape (nF, nq)
        Physical weights including the face length.
    points : ndarray, shape (nF, nq, 2)
    normals : ndarray, shape (nF, 2)
    phi : ndarray, shape (nF, nq, nb)
    dphi : ndarray, shape (nF, nq, nb, 2)
    """

    def __init__(self, space: LagrangeSpace, faces: np.ndarray, degree: int = KINK_FACE_DEGREE):
        mesh = space.mesh
        self.faces = np.asarray(faces, dtype=np.int64)
        self.cells = mesh.face_cells[self.faces, 0]
        self.local = mesh.face_local[self.faces, 0]
        rule = interval_rule(degree)
        self.t = rule.points
        self.weights = rule.weights[None, :] * mesh.h_F[self.faces][:, None]
        self.bary = face_bary(mesh, self.cells, self.local, rule.points)
        self.points = map_points(mesh, self.bary, self.cells)
        self.normals = mesh.face_normals[self.faces]
        self.h_F = mesh.h_F[self.faces]
        self.h_T = mesh.h_T[self.cells]
        nq = len(rule.points)
        self.phi = lagrange_values(space.degree, self.bary.reshape(-1, 3)).reshape(len(self.faces), nq, n_local(space.degree))
        self.dphi = physical_grads(mesh, space.degree, self.bary, self.cells)

    def __len__(self) -> int:
        return len(self.faces)


def normal_stress_trace(u: DisplacementField, coeff: ElasticityCoefficients, face: int,
                        t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normal and tangential parts of ``sigma(u) n`` on a boundary face.

    Parameters
    ----------
    face : int
        Boundary face id.
    t : ndarray
        Face parameters in ``[0, 1]`` from the lower to the higher vertex.

    Returns
    -------
    sigma_n : ndarray, shape (len(t),)
        ``n . sigma n``.
    sigma_t : ndarray, shape (len(t), 2)
        Tangential vector ``sigma n - sigma_n n``.
    """
    mesh = u.mesh
    if mesh.face_cells[face, 1] >= 0:
        raise ValueError(f"face {face} is not a boundary face")
    cell = mesh.face_cells[face, 0]
    bary = face_bary(mesh, [cell], [mesh.face_local[face, 0]], np.asarray(t, dtype=float))
    s = u.stress_at(coeff, bary, np.array([cell]))[0]
    n = mesh.face_normals[face]
    traction = s @ n
    sn = traction @ n
    return sn, traction - sn[:, None] * n


def l2_project_onto_face_polynomials(values: np.ndarray, weights: np.ndarray, t: np.ndarray,
                                     degree: int) -> np.ndarray:
    """Coefficients of the L2(F) projection onto polynomials of ``degree``.

    The basis is the Legendre family of :func:`legendre_face_basis`, which
    is orthonormal for unit face length; ``weights`` are the physical
    quadrature weights on the face.  ``values`` may carry trailing vector
    components, shape ``(nq, ...)``.
    """
    chi = legendre_face_basis(degree, t)
    gram = np.einsum("q,qr,qs->rs", weights, chi, chi)
    rhs = np.einsum("q,qr,q...->r...", weights, chi, values)
    return np.linalg.solve(gram, rhs.reshape(degree + 1, -1)).reshape(rhs.shape)


def face_polynomial_values(coeffs: np.ndarray, t: np.ndarray) -> np.ndarray:
    chi = legendre_face_basis(coeffs.shape[0] - 1, t)
    return np.einsum("qr,r...->q...", chi, coeffs)


def rigid_motion(b: tuple[float, float], c: float) -> VectorField:
    """The field ``b + c (x2, -x1)``."""

    def field(x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        out[..., 0] = b[0] + c * x[..., 1]
        out[..., 1] = b[1] - c * x[..., 0]
        return out

    return field


def solve_constrained(K: sp.spmatrix, F: np.ndarray, space: LagrangeSpace) -> np.ndarray:
    """Solve ``K u = F`` with homogeneous Dirichlet dofs eliminated."""
    from scipy.sparse.linalg import spsolve

    free = space.free_dofs
    u = np.zeros(space.ndofs)
    Kff = sp.csc_matrix(K)[free][:, free]
    u[free] = spsolve(Kff, F[free])
    return u
