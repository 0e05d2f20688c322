"""Patchwise equilibrated stress reconstruction with weakly imposed symmetry.

For every vertex ``a`` a small mixed problem is solved on the star of ``a``:
stresses are broken tensor polynomials of degree ``q = p`` whose normal
traces are glued by face-moment constraints, displacements are broken
vectors of degree ``q - 1`` and the symmetry multiplier is a broken skew
tensor of degree ``q - 1``.  Summing the local stresses over all vertices
gives an H(div)-conforming tensor whose divergence and boundary tractions
balance the data in the moments of degree ``q - 1`` and ``q``.

Degree one
----------
At ``q = 1`` the rotational compatibility of a patch problem cannot be met
by the data: testing the discrete equation with ``psi_a z`` for a rotation
``z`` is not allowed since that product is quadratic.  Patches whose
displacement space is orthogonal to rigid motions therefore drop the
patch-constant skew multiplier and are orthogonal to translations only,
and the rigid shifts ``y`` are restricted to translations.  Equilibrium and
boundary moments then hold exactly; weak symmetry holds against the
remaining multipliers.  From degree two on, the full construction is used.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import scipy.linalg as sla

from .femcore import (DisplacementField, FaceData, face_bary, lagrange_values,
                      map_points, n_local, physical_grads)
from .mesh import Tag, TriMesh, VertexKind, VertexPatch, vertex_patch
from .nitsche import NitscheSystem, proj_neg, reg_proj
from .quadrature import interval_rule, legendre_face_basis, triangle_rule

COMPONENTS = ("dis", "reg", "lin")


# ----------------------------------------------------------------- fields
class StressField:
    """Broken tensor field of degree ``q`` with Lagrange coefficients.

    ``coeffs[T, i, j, l]`` is the coefficient of component ``(i, j)`` at
    local Lagrange node ``l`` of cell ``T``.
    """

    def __init__(self, mesh: TriMesh, degree: int, coeffs: np.ndarray):
        self.mesh = mesh
        self.degree = degree
        self.coeffs = np.asarray(coeffs, dtype=float).reshape(mesh.n_cells, 2, 2, n_local(degree))

    @classmethod
    def zeros(cls, mesh: TriMesh, degree: int) -> "StressField":
        return cls(mesh, degree, np.zeros((mesh.n_cells, 2, 2, n_local(degree))))

    def __add__(self, other: "StressField") -> "StressField":
        return StressField(self.mesh, self.degree, self.coeffs + other.coeffs)

    def values_at(self, bary: np.ndarray, cells=None) -> np.ndarray:
        c = self.coeffs if cells is None else self.coeffs[cells]
        bary = np.asarray(bary, dtype=float)
        if bary.ndim == 2:
            phi = lagrange_values(self.degree, bary)
            return np.einsum("ql,mijl->mqij", phi, c)
        phi = lagrange_values(self.degree, bary.reshape(-1, 3)).reshape(*bary.shape[:2], -1)
        return np.einsum("mql,mijl->mqij", phi, c)

    def divergence_at(self, bary: np.ndarray, cells=None) -> np.ndarray:
        c = self.coeffs if cells is None else self.coeffs[cells]
        dphi = physical_grads(self.mesh, self.degree, bary, cells)
        return np.einsum("mqlj,mijl->mqi", dphi, c)


@dataclass
class EquilibratedStress:
    """Reconstructed stress split into discretization, regularization and
    linearization parts.

    Attributes
    ----------
    dis, reg, lin : StressField
    source : str
        Short description of the displacement iterate that produced it.
    audit : dict
        Patch-level residuals recorded while solving.
    """

    dis: StressField
    reg: StressField
    lin: StressField
    source: str = ""
    audit: dict = field(default_factory=dict)

    @property
    def total(self) -> StressField:
        return self.dis + self.reg + self.lin

    @property
    def mesh(self) -> TriMesh:
        return self.dis.mesh

    @property
    def degree(self) -> int:
        return self.dis.degree


# ------------------------------------------------------- element blocks
class _ElementBlocks:
    """Per-cell matrices shared by all patch problems on a mesh."""

    def __init__(self, mesh: TriMesh, q: int):
        self.mesh = mesh
        self.q = q
        self.nl = n_local(q)
        self.nu = n_local(q - 1)
        self.nS = 4 * self.nl
        rule = triangle_rule(2 * q + 2)
        self.rule = rule
        phi = lagrange_values(q, rule.points)
        psi = lagrange_values(q - 1, rule.points)
        dphi = physical_grads(mesh, q, rule.points)
        W = rule.weights[None, :] * (2.0 * mesh.areas)[:, None]
        self.W = W
        self.phi, self.psi = phi, psi
        self.points = map_points(mesh, rule.points)
        self.mass = np.einsum("mq,ql,qk->mlk", W, phi, phi)
        nl, nu = self.nl, self.nu
        M = mesh.n_cells
        B = np.zeros((M, 2, nu, 2, 2, nl))
        div = np.einsum("mq,qn,mqlj->mnjl", W, psi, dphi)
        for i in range(2):
            B[:, i, :, i, :, :] = div
        self.B = B.reshape(M, 2 * nu, self.nS)
        S = np.zeros((M, nu, 2, 2, nl))
        pm = np.einsum("mq,qn,ql->mnl", W, psi, phi)
        S[:, :, 0, 1, :] = pm
        S[:, :, 1, 0, :] = -pm
        self.skew = S.reshape(M, nu, self.nS)
        self.psi_int = np.einsum("mq,qn->mn", W, psi)
        self.psi_mom = np.einsum("mq,qn,mqk->mnk", W, psi, self.points)
        self.second_moment = np.einsum("mq,mqk->m", W, self.points**2)
        self.first_moment = np.einsum("mq,mqk->mk", W, self.points)
        frule = interval_rule(2 * q + 2)
        chi = legendre_face_basis(q, frule.points)
        Cf = np.zeros((M, 3, q + 1, nl))
        for f in range(3):
            bary = face_bary(mesh, np.arange(M), np.full(M, f), frule.points)
            vals = lagrange_values(q, bary.reshape(-1, 3)).reshape(M, len(frule.points), nl)
            hF = mesh.h_F[mesh.tri_faces[:, f]]
            Cf[:, f] = np.einsum("q,qr,mql->mrl", frule.weights, chi, vals) * hF[:, None, None]
        self.face_moments = Cf

    def trace_rows(self, cell: int, local_face: int, normal: np.ndarray) -> np.ndarray:
        """Rows mapping cell coefficients to moments of ``sigma n``.

        Shape ``(2 * (q + 1), nS)`` with row index ``i * (q + 1) + r``.
        """
        q1 = self.q + 1
        out = np.zeros((2, q1, 2, 2, self.nl))
        Cf = self.face_moments[cell, local_face]
        for i in range(2):
            for j in range(2):
                out[i, :, i, j, :] = normal[j] * Cf
        return out.reshape(2 * q1, self.nS)


# ------------------------------------------------------------ patch space
class FaceRole(IntEnum):
    CONTINUITY = 0
    ZERO = 1
    NEUMANN = 2
    CONTACT = 3


@dataclass
class RigidModes:
    """L2(patch)-orthonormal rigid motions ``e1, e2`` and a centered rotation."""

    area: float
    centroid: np.ndarray
    rotation_norm: float

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Mode values at points ``x``, shape ``(3, ..., 2)``."""
        x = np.asarray(x, dtype=float)
        out = np.zeros((3,) + x.shape)
        s = 1.0 / np.sqrt(self.area)
        out[0, ..., 0] = s
        out[1, ..., 1] = s
        out[2, ..., 0] = (x[..., 1] - self.centroid[1]) / self.rotation_norm
        out[2, ..., 1] = -(x[..., 0] - self.centroid[0]) / self.rotation_norm
        return out

    def moments_to_coefficients(self, integral: np.ndarray, first: np.ndarray) -> np.ndarray:
        """Convert ``int g`` and ``int g_i x_k`` into ``(g, z_s)`` for the modes."""
        s = 1.0 / np.sqrt(self.area)
        c = self.centroid
        rot = (first[0, 1] - c[1] * integral[0]) - (first[1, 0] - c[0] * integral[1])
        return np.array([s * integral[0], s * integral[1], rot / self.rotation_norm])


def rigid_modes(mesh: TriMesh, patch: VertexPatch, blocks: _ElementBlocks | None = None) -> RigidModes:
    """Orthonormal basis of the rigid motions on a patch."""
    cells = patch.cells
    if blocks is None:
        rule = triangle_rule(2)
        W = rule.weights[None, :] * (2.0 * mesh.areas[cells])[:, None]
        pts = map_points(mesh, rule.points, cells)
        first = np.einsum("mq,mqk->k", W, pts)
        second = float(np.einsum("mq,mqk->", W, pts**2))
    else:
        first = blocks.first_moment[cells].sum(axis=0)
        second = float(blocks.second_moment[cells].sum())
    area = float(mesh.areas[cells].sum())
    centroid = first / area
    rot2 = second - area * float(centroid @ centroid)
    return RigidModes(area, centroid, np.sqrt(rot2))


@dataclass
class PatchMixedSpace:
    """Discrete mixed problem on one vertex patch.

    Attributes
    ----------
    patch : VertexPatch
    degree : int
    local_vertex : ndarray
        Local index of the center vertex in each patch cell.
    faces : list of tuple
        ``(face, role, cells, local_faces, endpoint)`` per constrained face;
        ``endpoint`` tells whether the center is the lower (0) or higher (1)
        vertex of a data face.
    n_modes : int
        Rigid modes used for the compatibility shifts.
    constrain_modes : bool
        Displacements are orthogonal to the rigid modes.
    relaxed_symmetry : bool
        The patch-constant skew multiplier is removed.
    """

    patch: VertexPatch
    degree: int
    local_vertex: np.ndarray
    faces: list
    modes: RigidModes
    n_modes: int
    constrain_modes: bool
    relaxed_symmetry: bool
    kkt: np.ndarray
    sizes: tuple
    mode_matrix: np.ndarray
    skew_full: np.ndarray
    skew_used: np.ndarray
    solution_operator: np.ndarray | None = None

    @property
    def n_sigma(self) -> int:
        return self.sizes[0]

    @property
    def n_displacement(self) -> int:
        return self.sizes[1]

    @property
    def n_multiplier(self) -> int:
        return self.sizes[2]

    @property
    def data_faces(self) -> list:
        return [f for f in self.faces if f[1] in (FaceRole.NEUMANN, FaceRole.CONTACT)]


def build_patch_space(mesh: TriMesh, patch: VertexPatch, degree: int,
                      blocks: _ElementBlocks | None = None) -> PatchMixedSpace:
    """Assemble the saddle-point matrix of the patch problem."""
    if blocks is None:
        blocks = _ElementBlocks(mesh, degree)
    q = degree
    cells = patch.cells
    nT = len(cells)
    pos = {int(c): k for k, c in enumerate(cells)}
    a = patch.center
    local_vertex = np.array([int(np.flatnonzero(mesh.triangles[c] == a)[0]) for c in cells])
    kind = patch.kind
    is_dirichlet = kind == VertexKind.DIRICHLET

    faces = []
    all_faces = np.unique(mesh.tri_faces[cells].ravel())
    for f in all_faces:
        f = int(f)
        owner, neigh = mesh.face_cells[f]
        tag = Tag(int(mesh.face_tags[f]))
        in_owner = int(owner) in pos
        in_neigh = neigh >= 0 and int(neigh) in pos
        if in_owner and in_neigh:
            lf = (mesh.face_local[f, 0], mesh.face_local[f, 1])
            faces.append((f, FaceRole.CONTINUITY, (int(owner), int(neigh)), lf, -1))
            continue
        cell = int(owner) if in_owner else int(neigh)
        lface = int(mesh.face_local[f, 0] if in_owner else mesh.face_local[f, 1])
        has_center = a in mesh.faces[f]
        endpoint = int(mesh.faces[f, 1] == a) if has_center else -1
        if tag == Tag.INTERIOR:
            faces.append((f, FaceRole.ZERO, (cell,), (lface,), -1))
        elif tag == Tag.DIRICHLET:
            if not is_dirichlet:
                faces.append((f, FaceRole.ZERO, (cell,), (lface,), -1))
        elif kind == VertexKind.INTERIOR or not has_center:
            faces.append((f, FaceRole.ZERO, (cell,), (lface,), -1))
        elif tag == Tag.NEUMANN:
            faces.append((f, FaceRole.NEUMANN, (cell,), (lface,), endpoint))
        else:
            faces.append((f, FaceRole.CONTACT, (cell,), (lface,), endpoint))

    nS = blocks.nS
    n_sigma = nT * nS
    n_disp = nT * 2 * blocks.nu
    q1 = q + 1
    n_cons = len(faces) * 2 * q1

    C = np.zeros((n_cons, n_sigma))
    for k, (f, role, fcells, lfaces, _) in enumerate(faces):
        n = mesh.face_normals[f]
        rows = slice(2 * q1 * k, 2 * q1 * (k + 1))
        for sgn, c, lf in zip((1.0, -1.0), fcells, lfaces):
            p = pos[c]
            C[rows, p * nS:(p + 1) * nS] += sgn * blocks.trace_rows(c, lf, n)

    Mm = np.zeros((n_sigma, n_sigma))
    B = np.zeros((n_disp, n_sigma))
    Lfull = np.zeros((nT * blocks.nu, n_sigma))
    for p, c in enumerate(cells):
        s = slice(p * nS, (p + 1) * nS)
        Mm[s, s] = np.kron(np.eye(4), blocks.mass[c])
        B[p * 2 * blocks.nu:(p + 1) * 2 * blocks.nu, s] = blocks.B[c]
        Lfull[p * blocks.nu:(p + 1) * blocks.nu, s] = blocks.skew[c]

    modes = rigid_modes(mesh, patch, blocks)
    n_modes = 3 if q >= 2 else 2
    constrain = not is_dirichlet
    relaxed = constrain and q == 1
    if relaxed:
        weights = blocks.psi_int[cells].reshape(1, -1)
        Q = sla.null_space(weights)
        Lused = Q.T @ Lfull
    else:
        Lused = Lfull

    # Columns (v, z_s) for the rigid modes, used by the shifts and the constraint.
    R = np.zeros((n_disp, 3))
    for p, c in enumerate(cells):
        nu = blocks.nu
        base = p * 2 * nu
        sc = 1.0 / np.sqrt(modes.area)
        R[base:base + nu, 0] = sc * blocks.psi_int[c]
        R[base + nu:base + 2 * nu, 1] = sc * blocks.psi_int[c]
        ctr = modes.centroid
        R[base:base + nu, 2] = (blocks.psi_mom[c, :, 1] - ctr[1] * blocks.psi_int[c]) / modes.rotation_norm
        R[base + nu:base + 2 * nu, 2] = -(blocks.psi_mom[c, :, 0] - ctr[0] * blocks.psi_int[c]) / modes.rotation_norm
    R = R[:, :n_modes]
    n_rho = n_modes if constrain else 0
    n_lam = Lused.shape[0]

    N = n_sigma + n_disp + n_lam + n_cons + n_rho
    K = np.zeros((N, N))
    o1 = n_sigma
    o2 = o1 + n_disp
    o3 = o2 + n_lam
    o4 = o3 + n_cons
    K[:o1, :o1] = Mm
    K[o1:o2, :o1] = B
    K[:o1, o1:o2] = B.T
    K[o2:o3, :o1] = Lused
    K[:o1, o2:o3] = Lused.T
    K[o3:o4, :o1] = C
    K[:o1, o3:o4] = C.T
    if n_rho:
        K[o1:o2, o4:] = R
        K[o4:, o1:o2] = R.T
    return PatchMixedSpace(
        patch=patch, degree=q, local_vertex=local_vertex, faces=faces, modes=modes,
        n_modes=n_modes, constrain_modes=constrain, relaxed_symmetry=relaxed, kkt=K,
        sizes=(n_sigma, n_disp, n_lam, n_cons, n_rho), mode_matrix=R,
        skew_full=Lfull, skew_used=Lused)


def _solution_operator(space: PatchMixedSpace) -> np.ndarray:
    """Rows of the inverse saddle matrix that produce the stress unknowns.

    Columns are restricted to the stress, displacement and constraint
    equations, the only ones with nonzero right-hand sides.
    """
    if space.solution_operator is None:
        n_sigma, n_disp, n_lam, n_cons, n_rho = space.sizes
        N = space.kkt.shape[0]
        o3 = n_sigma + n_disp + n_lam
        cols = np.r_[0:n_sigma + n_disp, o3:o3 + n_cons]
        E = np.zeros((N, len(cols)))
        E[cols, np.arange(len(cols))] = 1.0
        try:
            X = sla.solve(space.kkt, E, assume_a="sym")
        except sla.LinAlgError as exc:
            raise RuntimeError(f"singular patch system at vertex {space.patch.center}") from exc
        space.solution_operator = X[:n_sigma]
    return space.solution_operator


@dataclass
class PatchRHS:
    """Right-hand side of a patch problem, one column per component.

    Attributes
    ----------
    tensor : ndarray, shape (n_sigma, k)
        ``(tau_source, tau)`` moments.
    vector : ndarray, shape (n_disp, k)
        ``(v_source, v)`` moments.
    face_data : dict
        Face id to normal-trace moments of shape ``(2 (q + 1), k)`` for every
        Neumann or contact data face of the patch.
    """

    tensor: np.ndarray
    vector: np.ndarray
    face_data: dict


def solve_patch(space: PatchMixedSpace, rhs: PatchRHS) -> np.ndarray:
    """Stress coefficients of the patch solution, shape ``(n_sigma, k)``."""
    n_sigma, n_disp, n_lam, n_cons, n_rho = space.sizes
    k = rhs.tensor.shape[1]
    q1 = space.degree + 1
    d = np.zeros((n_cons, k))
    for idx, (f, role, *_rest) in enumerate(space.faces):
        if role in (FaceRole.NEUMANN, FaceRole.CONTACT):
            if f not in rhs.face_data:
                raise KeyError(f"missing trace data for face {f} of patch {space.patch.center}")
            d[2 * q1 * idx:2 * q1 * (idx + 1)] = rhs.face_data[f]
    G = _solution_operator(space)
    return G @ np.vstack([rhs.tensor, rhs.vector, d])


def dump_patch_system(space: PatchMixedSpace, rhs: PatchRHS, path) -> None:
    """Write the dense saddle matrix and right-hand side as plain text."""
    n_sigma, n_disp, n_lam, n_cons, n_rho = space.sizes
    k = rhs.tensor.shape[1]
    b = np.zeros((space.kkt.shape[0], k))
    b[:n_sigma] = rhs.tensor
    b[n_sigma:n_sigma + n_disp] = rhs.vector
    q1 = space.degree + 1
    o3 = n_sigma + n_disp + n_lam
    for idx, (f, role, *_rest) in enumerate(space.faces):
        if f in rhs.face_data:
            b[o3 + 2 * q1 * idx:o3 + 2 * q1 * (idx + 1)] = rhs.face_data[f]
    with open(path, "w") as fh:
        fh.write(f"# vertex {space.patch.center} sizes {' '.join(map(str, space.sizes))}\n")
        np.savetxt(fh, space.kkt, fmt="%.17g")
        fh.write("# rhs\n")
        np.savetxt(fh, b, fmt="%.17g")


# ------------------------------------------------------------- data
@dataclass
class RigidCompatibilityData:
    """Rigid shifts of one patch in the orthonormal mode basis."""

    y: np.ndarray
    y_tilde: np.ndarray


class _SourceData:
    """Element and face moments of the patch sources for one iterate."""

    def __init__(self, rec: "Reconstructor", u_k: DisplacementField, u_prev: DisplacementField | None,
                 delta: float | None):
        sysm = rec.system
        blocks = rec.blocks
        mesh = rec.mesh
        self._q = blocks.q
        coeff = sysm.coeff
        q = blocks.q
        nl, nu = blocks.nl, blocks.nu
        M = mesh.n_cells
        bary = blocks.rule.points
        sig = u_k.stress_at(coeff, bary)  # (M,q,2,2)
        fx = np.asarray(sysm.problem.body_force(blocks.points.reshape(-1, 2)),
                        dtype=float).reshape(blocks.points.shape)
        W = blocks.W
        lam_b = bary  # (nq,3)
        self.tensor = np.einsum("mq,qj,mqik,ql->mjikl", W, lam_b, sig, blocks.phi).reshape(M, 3, blocks.nS)
        gb = mesh.grad_bary  # (M,3,2)
        src = -lam_b[None, :, :, None] * fx[:, :, None, :] + np.einsum("mqik,mjk->mqji", sig, gb)
        self.vector = np.einsum("mq,mqji,qn->mjin", W, src, blocks.psi).reshape(M, 3, 2 * nu)
        self.src_int = np.einsum("mq,mqji->mji", W, src)
        self.src_mom = np.einsum("mq,mqji,mqk->mjik", W, src, blocks.points)

        # Face data on Neumann and contact faces.
        self.face = {}
        nfaces = sysm.mesh.faces_with_tag(Tag.NEUMANN)
        if len(nfaces):
            nd = FaceData(sysm.space, nfaces)
            g = np.asarray(sysm.problem.traction(nd.points.reshape(-1, 2)),
                           dtype=float).reshape(nd.points.shape)
            self._add_faces("dis", nd.faces, nd.t, nd.weights, nd.points, g)
        if len(sysm.contact):
            c = sysm.contact
            p = sysm.p_values(u_k)
            neg = proj_neg(p)
            n = c.normals[:, None, :]
            if delta is None:
                self._add_faces("dis", c.faces, c.t, c.weights, c.points, neg[..., None] * n)
            else:
                reg = reg_proj(p, delta)[0]
                plin = sysm.plin_values(u_k, u_prev, delta)
                self._add_faces("dis", c.faces, c.t, c.weights, c.points, neg[..., None] * n)
                self._add_faces("reg", c.faces, c.t, c.weights, c.points, (reg - neg)[..., None] * n)
                self._add_faces("lin", c.faces, c.t, c.weights, c.points, (plin - reg)[..., None] * n)

    def _add_faces(self, comp, faces, t, weights, points, X):
        q = self._q
        chi = legendre_face_basis(q, t)
        ends = np.stack([1.0 - t, t])  # (2, nq)
        mom = np.einsum("fq,eq,fqi,qr->feir", weights, ends, X, chi)
        integ = np.einsum("fq,eq,fqi->fei", weights, ends, X)
        first = np.einsum("fq,eq,fqi,fqk->feik", weights, ends, X, points)
        for k, f in enumerate(faces):
            self.face[(comp, int(f))] = (mom[k].reshape(2, -1), integ[k], first[k])


class Reconstructor:
    """Patch spaces of one mesh, reused across displacement iterates.

    Parameters
    ----------
    system : NitscheSystem
    threads : int
        Number of worker threads for the patch solves.  Results are summed
        in vertex order, so the output does not depend on this value.
    """

    def __init__(self, system: NitscheSystem, threads: int = 1):
        self.system = system
        self.mesh = system.mesh
        self.degree = system.space.degree
        self.blocks = _ElementBlocks(self.mesh, self.degree)
        self.threads = max(1, int(threads))
        self.patches = [vertex_patch(self.mesh, a) for a in range(self.mesh.n_vertices)]
        self._spaces = self._map(lambda p: build_patch_space(self.mesh, p, self.degree, self.blocks),
                                 self.patches)
        self._map(_solution_operator, self._spaces)

    def _map(self, fn, items):
        if self.threads == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.threads) as pool:
            return list(pool.map(fn, items))

    def space(self, a: int) -> PatchMixedSpace:
        return self._spaces[a]

    # --------------------------------------------------------- shifts
    def compatibility_shift(self, a: int, data: _SourceData, split: bool) -> RigidCompatibilityData:
        space = self._spaces[a]
        zero = np.zeros(3)
        # Dirichlet patches carry no compatibility condition; a shift there
        # would equal the support reaction and never vanish under Newton.
        if space.patch.kind != VertexKind.BOUNDARY or not split:
            return RigidCompatibilityData(zero.copy(), zero.copy())
        cells, jloc = space.patch.cells, space.local_vertex
        integ = data.src_int[cells, jloc].sum(axis=0)
        first = data.src_mom[cells, jloc].sum(axis=0)
        y_int, y_first = integ.copy(), first.copy()
        t_int, t_first = np.zeros(2), np.zeros((2, 2))
        for f, role, _c, _l, end in space.data_faces:
            entry = data.face.get(("dis", f))
            if entry is not None:
                y_int -= entry[1][end]
                y_first -= entry[2][end]
            if role == FaceRole.CONTACT:
                entry = data.face.get(("reg", f))
                if entry is not None:  # [P]_- - [P]_reg = -(reg data)
                    t_int -= entry[1][end]
                    t_first -= entry[2][end]
        y = space.modes.moments_to_coefficients(y_int, y_first)
        yt = space.modes.moments_to_coefficients(t_int, t_first)
        y[space.n_modes:] = 0.0
        yt[space.n_modes:] = 0.0
        return RigidCompatibilityData(y, yt)

    # --------------------------------------------------------- solve
    def _patch_rhs(self, a: int, data: _SourceData, split: bool) -> tuple[PatchRHS, RigidCompatibilityData]:
        space = self._spaces[a]
        blocks = self.blocks
        cells, jloc = space.patch.cells, space.local_vertex
        k = 3 if split else 1
        tensor = np.zeros((space.n_sigma, k))
        vector = np.zeros((space.n_displacement, k))
        tensor[:, 0] = data.tensor[cells, jloc].ravel()
        vector[:, 0] = data.vector[cells, jloc].ravel()
        shift = self.compatibility_shift(a, data, split)
        if split:
            R = space.mode_matrix
            yv = R @ shift.y[:space.n_modes]
            ytv = R @ shift.y_tilde[:space.n_modes]
            vector[:, 0] -= yv
            vector[:, 1] = -ytv
            vector[:, 2] = yv + ytv
        face_data = {}
        comps = COMPONENTS if split else ("dis",)
        q1 = blocks.q + 1
        for f, role, _c, _l, end in space.data_faces:
            col = np.zeros((2 * q1, k))
            for j, comp in enumerate(comps):
                entry = data.face.get((comp, f))
                if entry is not None:
                    col[:, j] = entry[0][end].ravel()
            face_data[f] = col
        return PatchRHS(tensor, vector, face_data), shift

    def reconstruct(self, u_k: DisplacementField, u_prev: DisplacementField | None = None,
                    delta: float | None = None) -> EquilibratedStress:
        split = delta is not None
        if split and u_prev is None:
            raise ValueError("the split reconstruction needs the previous iterate")
        data = _SourceData(self, u_k, u_prev, delta)
        nS = self.blocks.nS
        M = self.mesh.n_cells
        k = 3 if split else 1

        def work(a):
            rhs, shift = self._patch_rhs(a, data, split)
            sol = solve_patch(self._spaces[a], rhs)
            return sol, shift

        results = self._map(work, range(self.mesh.n_vertices))
        acc = np.zeros((M, k, nS))
        worst_used = 0.0
        worst_full = 0.0
        shifts = []
        for a, (sol, shift) in enumerate(results):
            space = self._spaces[a]
            cells = space.patch.cells
            acc[cells] += sol.reshape(len(cells), nS, k).transpose(0, 2, 1)
            worst_used = max(worst_used, float(np.abs(space.skew_used @ sol).max(initial=0.0)))
            worst_full = max(worst_full, float(np.abs(space.skew_full @ sol).max(initial=0.0)))
            shifts.append(shift)
        fields = [StressField(self.mesh, self.degree, acc[:, j]) for j in range(k)]
        if not split:
            fields += [StressField.zeros(self.mesh, self.degree)] * 2
        audit = {"weak_symmetry": worst_used, "weak_symmetry_full": worst_full, "shifts": shifts}
        desc = "split" if split else "single"
        return EquilibratedStress(*fields, source=desc, audit=audit)


def construct_sigma(system: NitscheSystem, u: DisplacementField, threads: int = 1,
                    reconstructor: Reconstructor | None = None) -> EquilibratedStress:
    """Single reconstruction from a solution of the nonlinear problem.

    The regularization and linearization parts of the result are zero.
    """
    rec = reconstructor or Reconstructor(system, threads)
    return rec.reconstruct(u)


def construct_sigma_split(system: NitscheSystem, u_k: DisplacementField, u_prev: DisplacementField,
                          delta: float, threads: int = 1,
                          reconstructor: Reconstructor | None = None) -> EquilibratedStress:
    """Reconstruction split into discretization, regularization and linearization parts."""
    rec = reconstructor or Reconstructor(system, threads)
    return rec.reconstruct(u_k, u_prev, delta)


# ------------------------------------------------------------------ audits
def _face_traces(field: StressField, faces: np.ndarray, side: int, t: np.ndarray) -> np.ndarray:
    mesh = field.mesh
    cells = mesh.face_cells[faces, side]
    bary = face_bary(mesh, cells, mesh.face_local[faces, side], t)
    s = field.values_at(bary, cells)
    return np.einsum("fqij,fj->fqi", s, mesh.face_normals[faces])


def hdiv_jump(field: StressField) -> float:
    """Largest pointwise jump of the normal trace across interior faces."""
    mesh = field.mesh
    faces = np.flatnonzero(mesh.face_cells[:, 1] >= 0)
    if len(faces) == 0:
        return 0.0
    t = interval_rule(2 * field.degree + 2).points
    jump = _face_traces(field, faces, 0, t) - _face_traces(field, faces, 1, t)
    return float(np.abs(jump).max())


def _moment_gap(field: StressField, faces, X, t, weights) -> np.ndarray:
    """Legendre moments of degree ``q`` of ``sigma n - X`` per face."""
    chi = legendre_face_basis(field.degree, t)
    trace = _face_traces(field, faces, 0, t)
    return np.einsum("fq,fqi,qr->fir", weights, trace - X, chi)


def audit_equilibrium(system: NitscheSystem, stress: EquilibratedStress, u_k: DisplacementField,
                      u_prev: DisplacementField | None = None, delta: float | None = None) -> dict:
    """Residuals of the properties the reconstruction is built to satisfy.

    Returns
    -------
    dict
        ``hdiv_jump`` (pointwise normal-trace jumps), ``divergence``
        (moments of ``div sigma + f`` against degree ``q - 1``),
        ``neumann`` and ``contact_<part>`` (face moments of ``sigma n``
        minus the data), ``contact_tangential`` (pointwise tangential
        traction on the contact boundary) and the two weak symmetry
        residuals recorded during the solve.  All values are absolute.
    """
    mesh = system.mesh
    total = stress.total
    q = stress.degree
    out = {"hdiv_jump": max(hdiv_jump(stress.dis), hdiv_jump(stress.reg), hdiv_jump(stress.lin))}

    rule = triangle_rule(2 * q + 2)
    W = rule.weights[None, :] * (2.0 * mesh.areas)[:, None]
    pts = map_points(mesh, rule.points)
    fx = np.asarray(system.problem.body_force(pts.reshape(-1, 2)), dtype=float).reshape(pts.shape)
    psi = lagrange_values(q - 1, rule.points)
    r = total.divergence_at(rule.points) + fx
    out["divergence"] = float(np.abs(np.einsum("mq,mqi,qn->min", W, r, psi)).max())

    nfaces = mesh.faces_with_tag(Tag.NEUMANN)
    if len(nfaces):
        nd = FaceData(system.space, nfaces)
        g = np.asarray(system.problem.traction(nd.points.reshape(-1, 2)), dtype=float).reshape(nd.points.shape)
        out["neumann"] = float(np.abs(_moment_gap(total, nfaces, g, nd.t, nd.weights)).max())
    else:
        out["neumann"] = 0.0

    c = system.contact
    if len(c):
        p = system.p_values(u_k)
        n = c.normals[:, None, :]
        neg = proj_neg(p)
        parts = {"dis": neg}
        if delta is not None:
            reg = reg_proj(p, delta)[0]
            parts["reg"] = reg - neg
            parts["lin"] = system.plin_values(u_k, u_prev, delta) - reg
        for name, vals in parts.items():
            gap = _moment_gap(getattr(stress, name), c.faces, vals[..., None] * n, c.t, c.weights)
            out[f"contact_{name}"] = float(np.abs(gap).max())
        tr = _face_traces(total, c.faces, 0, c.t)
        tang = tr - np.einsum("fqi,fi->fq", tr, c.normals)[..., None] * n
        out["contact_tangential"] = float(np.abs(tang).max())
    out["weak_symmetry"] = stress.audit.get("weak_symmetry", np.nan)
    out["weak_symmetry_full"] = stress.audit.get("weak_symmetry_full", np.nan)
    return out
