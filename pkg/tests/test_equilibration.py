import numpy as np
import pytest

from contact_equilibrate.equilibration import (PatchRHS, Reconstructor, build_patch_space, construct_sigma,
                                               construct_sigma_split, audit_equilibrium, rigid_modes,
                                               solve_patch)
from contact_equilibrate.femcore import DisplacementField
from contact_equilibrate.mesh import Tag, VertexKind, build_rect_mesh, refine, vertex_patch
from contact_equilibrate.nitsche import NitscheSystem, proj_neg
from contact_equilibrate.problem import benchmark_problem
from contact_equilibrate.quadrature import triangle_rule

from conftest import shear_problem, zero_load_problem

GAMMA0 = 100.0
DELTA = 0.05


def two_iterates(system, delta=DELTA):
    """Two consecutive Newton iterates from zero, far from convergence."""
    u1 = system.solve_linearized(system.space.zero(), delta)
    return system.solve_linearized(u1, delta), u1


def benchmark_system(degree, refined=False):
    pb = benchmark_problem(degree=degree)
    mesh = pb.mesh
    if refined:
        near = np.argsort(np.linalg.norm(mesh.centroids, axis=1))[:3]
        mesh = refine(refine(mesh, near), [0, 1, 2])
    return NitscheSystem(pb.with_mesh(mesh), GAMMA0)


# ------------------------------------------------------ independent checks
def edge_points(mesh, cell, i, j, t):
    bary = np.zeros((len(t), 3))
    bary[:, i] = 1 - t
    bary[:, j] = t
    return bary


def element_balance(system, field):
    """``int_dT sigma n_T + int_T f`` per cell, with own normals and quadrature."""
    mesh = system.mesh
    g, w = np.polynomial.legendre.leggauss(6)
    t, w = 0.5 * (g + 1), 0.5 * w
    rule = triangle_rule(4)
    out = np.zeros((mesh.n_cells, 2))
    for T in range(mesh.n_cells):
        X = mesh.vertices[mesh.triangles[T]]
        for i, j in ((0, 1), (1, 2), (2, 0)):
            d = X[j] - X[i]
            normal = np.array([d[1], -d[0]])  # outward for counterclockwise cells, length |d|
            s = field.values_at(edge_points(mesh, T, i, j, t)[None], np.array([T]))[0]
            out[T] += np.einsum("q,qij,j->i", w, s, normal)
        pts = rule.points @ X
        out[T] += 2 * mesh.areas[T] * rule.weights @ system.problem.body_force(pts)
    return out


def test_cells_are_counterclockwise(benchmark):
    X = benchmark.mesh.vertices[benchmark.mesh.triangles]
    d1, d2 = X[:, 1] - X[:, 0], X[:, 2] - X[:, 0]
    assert np.all(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] > 0)


@pytest.mark.parametrize("degree", [1, 2])
@pytest.mark.parametrize("refined", [False, True])
def test_split_reconstruction_audits(degree, refined):
    system = benchmark_system(degree, refined)
    u_k, u_prev = two_iterates(system)
    stress = construct_sigma_split(system, u_k, u_prev, DELTA)
    audit = audit_equilibrium(system, stress, u_k, u_prev, DELTA)
    for key in ("hdiv_jump", "divergence", "neumann", "contact_dis", "contact_reg", "contact_lin",
                "contact_tangential", "weak_symmetry"):
        assert audit[key] < 1e-12, key
    if degree == 2:
        assert audit["weak_symmetry_full"] < 1e-12
    # all three parts carry data here
    for part in (stress.dis, stress.reg, stress.lin):
        assert np.abs(part.coeffs).max() > 1e-8


@pytest.mark.parametrize("degree", [1, 2])
def test_element_balance_independent(degree):
    system = benchmark_system(degree)
    u_k, u_prev = two_iterates(system)
    stress = construct_sigma_split(system, u_k, u_prev, DELTA)
    bal = element_balance(system, stress.total)
    assert np.abs(bal).max() < 1e-13


def test_neumann_face_integrals_independent():
    system = benchmark_system(1)
    u_k, u_prev = two_iterates(system)
    total = construct_sigma_split(system, u_k, u_prev, DELTA).total
    mesh = system.mesh
    g, w = np.polynomial.legendre.leggauss(4)
    t = 0.5 * (g + 1)
    for f in mesh.faces_with_tag(Tag.NEUMANN):
        T = mesh.face_cells[f, 0]
        a, b = mesh.faces[f]
        loc = list(mesh.triangles[T])
        s = total.values_at(edge_points(mesh, T, loc.index(a), loc.index(b), t)[None], np.array([T]))[0]
        force = 0.5 * mesh.h_F[f] * np.einsum("q,qij,j->i", w, s, mesh.face_normals[f])
        x = mesh.vertices[[a, b]].mean(axis=0)
        np.testing.assert_allclose(force, mesh.h_F[f] * system.problem.traction(x[None])[0], atol=1e-15)


def test_weak_symmetry_per_cell_at_degree_two():
    system = benchmark_system(2)
    u_k, u_prev = two_iterates(system)
    total = construct_sigma_split(system, u_k, u_prev, DELTA).total
    rule = triangle_rule(4)
    s = total.values_at(rule.points)
    skew = np.einsum("q,mq->m", rule.weights, s[..., 0, 1] - s[..., 1, 0])
    assert np.abs(skew).max() < 1e-13


def test_contact_normal_moments_match_projection():
    system = benchmark_system(1)
    u_k, u_prev = two_iterates(system)
    stress = construct_sigma_split(system, u_k, u_prev, DELTA)
    c = system.contact
    tr = np.einsum("fqij,fj,fi->fq", stress.dis.values_at(c.bary, c.cells), c.normals, c.normals)
    target = proj_neg(system.p_values(u_k))
    # zeroth and first moments along each face
    for k in (0, 1):
        lhs = np.einsum("fq,fq->f", c.weights * c.t[None, :] ** k, tr)
        rhs = np.einsum("fq,fq->f", c.weights * c.t[None, :] ** k, target)
        np.testing.assert_allclose(lhs, rhs, atol=1e-14)


@pytest.mark.parametrize("degree", [1, 2])
def test_shear_stress_is_reproduced(degree):
    pb = shear_problem(degree)
    system = NitscheSystem(pb, GAMMA0)
    u = DisplacementField(system.space, system.solve(system.stiffness, system.load))
    S = construct_sigma(system, u).total.coeffs
    s = pb.coeff.mu * 0.01
    np.testing.assert_allclose(S[:, 0, 1], s, atol=1e-15)
    np.testing.assert_allclose(S[:, 1, 0], s, atol=1e-15)
    assert np.abs(S[:, 0, 0]).max() < 1e-15 and np.abs(S[:, 1, 1]).max() < 1e-15


def test_zero_data_gives_zero_stress():
    system = NitscheSystem(zero_load_problem(), GAMMA0)
    stress = construct_sigma(system, system.space.zero())
    assert not np.any(stress.total.coeffs)


def test_patch_dimensions_at_degree_one():
    mesh = build_rect_mesh(3, 3)
    a = int(np.flatnonzero(np.all(np.isclose(mesh.vertices, [1 / 3, 1 / 3]), axis=1))[0])
    patch = vertex_patch(mesh, a)
    space = build_patch_space(mesh, patch, 1)
    n = len(patch.cells)
    # 2x2 affine stresses, constant displacements; one skew mode fewer than cells
    assert (space.n_sigma, space.n_displacement) == (12 * n, 2 * n)
    assert space.relaxed_symmetry and space.n_multiplier == n - 1
    space2 = build_patch_space(mesh, patch, 2)
    assert (space2.n_sigma, space2.n_displacement, space2.n_multiplier) == (24 * n, 6 * n, 3 * n)


def test_dirichlet_patch_keeps_full_symmetry(benchmark):
    rec = Reconstructor(NitscheSystem(benchmark, GAMMA0))
    kinds = {VertexKind(k) for k in (rec.space(a).patch.kind for a in range(benchmark.mesh.n_vertices))}
    assert kinds == {VertexKind.INTERIOR, VertexKind.BOUNDARY, VertexKind.DIRICHLET}
    for a in range(benchmark.mesh.n_vertices):
        space = rec.space(a)
        if space.patch.kind == VertexKind.DIRICHLET:
            assert not space.relaxed_symmetry and space.n_multiplier == len(space.patch.cells)


def test_rigid_modes_are_orthonormal():
    mesh = build_rect_mesh(3, 2, (-1, 1, 0, 1))
    patch = vertex_patch(mesh, 5)
    modes = rigid_modes(mesh, patch)
    rule = triangle_rule(4)
    gram = np.zeros((3, 3))
    for T in patch.cells:
        X = mesh.vertices[mesh.triangles[T]]
        z = modes.evaluate(rule.points @ X)  # (3, nq, 2)
        gram += 2 * mesh.areas[T] * np.einsum("q,aqi,bqi->ab", rule.weights, z, z)
    np.testing.assert_allclose(gram, np.eye(3), atol=1e-14)
    # the rotation mode has a skew constant gradient
    e = np.eye(2)
    z0 = modes.evaluate(np.zeros(2))[2]
    gx = modes.evaluate(e[0])[2] - z0
    gy = modes.evaluate(e[1])[2] - z0
    grad = np.column_stack([gx, gy])
    np.testing.assert_allclose(grad + grad.T, 0.0, atol=1e-15)


def test_missing_face_data_raises(benchmark):
    rec = Reconstructor(NitscheSystem(benchmark, GAMMA0))
    a = next(a for a in range(benchmark.mesh.n_vertices) if len(rec.space(a).data_faces))
    space = rec.space(a)
    rhs = PatchRHS(np.zeros((space.n_sigma, 1)), np.zeros((space.n_displacement, 1)), {})
    with pytest.raises(KeyError):
        solve_patch(space, rhs)


def test_split_needs_previous_iterate(benchmark):
    rec = Reconstructor(NitscheSystem(benchmark, GAMMA0))
    with pytest.raises(ValueError):
        rec.reconstruct(rec.system.space.zero(), None, DELTA)


def test_shifts_vanish_on_interior_and_dirichlet_patches():
    system = benchmark_system(1, refined=True)
    u_k, u_prev = two_iterates(system)
    rec = Reconstructor(system)
    stress = rec.reconstruct(u_k, u_prev, DELTA)
    for a, shift in enumerate(stress.audit["shifts"]):
        if rec.space(a).patch.kind != VertexKind.BOUNDARY:
            assert not shift.y.any() and not shift.y_tilde.any()


def test_thread_count_does_not_change_result():
    system = benchmark_system(1, refined=True)
    u_k, u_prev = two_iterates(system)
    one = construct_sigma_split(system, u_k, u_prev, DELTA, threads=1)
    four = construct_sigma_split(system, u_k, u_prev, DELTA, threads=4)
    for name in ("dis", "reg", "lin"):
        np.testing.assert_array_equal(getattr(one, name).coeffs, getattr(four, name).coeffs)


def test_linearization_part_vanishes_at_a_fixed_point():
    system = benchmark_system(1)
    u_prev = system.space.zero()
    for _ in range(30):
        u_k = system.solve_linearized(u_prev, DELTA)
        if np.linalg.norm(u_k.coeffs - u_prev.coeffs) < 1e-14:
            break
        u_prev = u_k
    stress = construct_sigma_split(system, u_k, u_prev, DELTA)
    assert np.abs(stress.lin.coeffs).max() < 1e-12 * np.abs(stress.dis.coeffs).max()


@pytest.mark.parametrize("degree", [1, 2])
def test_mode_constraints_by_vertex_kind(degree):
    system = benchmark_system(degree)
    rec = Reconstructor(system)
    for a in range(system.mesh.n_vertices):
        space = rec.space(a)
        if space.patch.kind == VertexKind.DIRICHLET:
            assert not space.constrain_modes and space.sizes[4] == 0
        else:
            assert space.constrain_modes and space.sizes[4] == space.n_modes == (2 if degree == 1 else 3)


def converged_iterates(system, delta, tol=1e-14):
    u_prev = system.space.zero()
    for _ in range(60):
        u_k = system.solve_linearized(u_prev, delta)
        if np.linalg.norm(u_k.coeffs - u_prev.coeffs) <= tol * np.linalg.norm(u_k.coeffs):
            return u_k, u_prev
        u_prev = u_k
    raise AssertionError("no convergence")


@pytest.mark.parametrize("degree", [1, 2])
def test_shift_vanishes_on_neumann_patches_at_convergence(degree):
    system = benchmark_system(degree, refined=True)
    u_k, u_prev = converged_iterates(system, DELTA)
    rec = Reconstructor(system)
    stress = rec.reconstruct(u_k, u_prev, DELTA)
    scale = np.abs(system.load).max()
    checked = 0
    for a, shift in enumerate(stress.audit["shifts"]):
        patch = rec.space(a).patch
        if patch.kind == VertexKind.BOUNDARY and len(patch.contact_faces) == 0:
            assert np.abs(shift.y).max() < 1e-10 * scale
            checked += 1
    assert checked > 0


def test_regularization_shift_vanishes_outside_the_band():
    system = benchmark_system(1, refined=True)
    u_k, u_prev = converged_iterates(system, 1e-4)
    delta = 1e-9
    rec = Reconstructor(system)
    stress = rec.reconstruct(u_k, u_prev, delta)
    pv = system.p_values(u_k)
    row = {int(f): i for i, f in enumerate(system.contact.faces)}
    outside = 0
    for a, shift in enumerate(stress.audit["shifts"]):
        faces = rec.space(a).patch.contact_faces
        if len(faces) and all(np.all(np.abs(pv[row[int(f)]]) >= delta) for f in faces):
            assert not shift.y_tilde.any()
            outside += 1
    assert outside > 0
