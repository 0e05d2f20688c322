import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contact_equilibrate.equilibration import construct_sigma, construct_sigma_split
from contact_equilibrate.estimators import (ALL_NAMES, TRACE_SAFETY, alternative_estimators, compute_report,
                                            guaranteed_bound, trace_constant)
from contact_equilibrate.femcore import DisplacementField
from contact_equilibrate.mesh import TriMesh, build_rect_mesh
from contact_equilibrate.nitsche import NitscheSystem
from contact_equilibrate.problem import ContactProblem, benchmark_problem

from conftest import shear_problem, zero_load_problem

GAMMA0 = 100.0

# Largest sqrt Rayleigh quotient ||v - mean_F v||_F^2 / (h_F ||grad v||_T^2) over
# polynomials of degree <= 6 on the unit right triangle, from an independent
# monomial/Duffy-quadrature/Cholesky computation (see the decisions ledger).
ORACLE_HYPOTENUSE = 0.7071067811865482
ORACLE_LEG = 0.6560179839532709


def unit_square_faces():
    mesh = build_rect_mesh(1, 1)
    cell = 0  # vertices (0,0), (1,0), (1,1)
    by_vertices = {tuple(sorted(mesh.faces[f])): int(f) for f in mesh.tri_faces[cell]}
    return mesh, cell, by_vertices


def test_trace_constant_oracle_values():
    mesh, cell, faces = unit_square_faces()
    assert trace_constant(mesh, cell, faces[(0, 3)], safety=1.0) == pytest.approx(ORACLE_HYPOTENUSE, rel=1e-10)
    assert trace_constant(mesh, cell, faces[(0, 1)], safety=1.0) == pytest.approx(ORACLE_LEG, rel=1e-10)
    assert trace_constant(mesh, cell, faces[(1, 3)], safety=1.0) == pytest.approx(ORACLE_LEG, rel=1e-10)
    assert trace_constant(mesh, cell, faces[(0, 1)]) == pytest.approx(TRACE_SAFETY * ORACLE_LEG, rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 100.0), st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 2 * np.pi))
def test_trace_constant_is_similarity_invariant(scale, dx, dy, angle):
    mesh, cell, faces = unit_square_faces()
    R = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    moved = TriMesh(scale * mesh.vertices @ R.T + [dx, dy], mesh.triangles, mesh.faces[mesh.boundary_faces],
                    "N" * len(mesh.boundary_faces))
    for f in mesh.tri_faces[cell]:
        a, b = mesh.faces[f]
        g = next(int(h) for h in moved.tri_faces[cell] if set(moved.faces[h]) == {a, b})
        assert trace_constant(moved, cell, g) == pytest.approx(trace_constant(mesh, cell, int(f)), rel=1e-8)


def test_trace_constant_rejects_foreign_face():
    mesh, cell, faces = unit_square_faces()
    other = next(f for f in range(mesh.n_faces) if f not in mesh.tri_faces[cell])
    with pytest.raises(ValueError):
        trace_constant(mesh, cell, other)


def wavy_problem(degree):
    """Benchmark geometry with smooth, non-polynomial data."""
    pb = benchmark_problem(degree=degree)

    def f(x):
        x = np.asarray(x)
        return 0.01 * np.stack([np.sin(3 * x[..., 0]), np.cos(2 * x[..., 1] + x[..., 0])], axis=-1)

    def g(x):
        x = np.asarray(x)
        return 0.02 * np.stack([x[..., 1] ** 2 - 0.5, np.exp(-x[..., 0] ** 2)], axis=-1)

    return ContactProblem(pb.mesh, pb.coeff, f, g, degree, pb.young)


@pytest.mark.parametrize("degree", [1, 2])
def test_alternative_forms_agree(degree):
    # The reconstruction balances the data when u_k solves the problem
    # linearized at u_prev, so any two consecutive Newton iterates will do.
    system = NitscheSystem(wavy_problem(degree), GAMMA0)
    delta = 0.05
    u_prev = system.solve_linearized(system.space.zero(), delta)
    u = system.solve_linearized(u_prev, delta)
    report = compute_report(system, u, construct_sigma_split(system, u, u_prev, delta))
    alt = alternative_estimators(system, u)
    for name in ("osc", "Neu", "cnt"):
        np.testing.assert_allclose(report.local[name], alt[name], rtol=1e-8, atol=1e-14)
    assert alt["osc"].max() > 1e-6 and alt["Neu"].max() > 1e-6
    # the contact term only sees faces where P changes sign
    pv = system.p_values(u)
    kinked = np.any((pv.min(axis=1) < 0) & (pv.max(axis=1) > 0))
    assert (alt["cnt"].max() > 1e-6) == kinked


def test_zero_state_reports_zero():
    system = NitscheSystem(zero_load_problem(), GAMMA0)
    u = system.space.zero()
    report = compute_report(system, u, construct_sigma(system, u))
    assert all(report[name] == 0.0 for name in ALL_NAMES)


@pytest.mark.parametrize("degree", [1, 2])
def test_exact_linear_state_has_no_error(degree):
    system = NitscheSystem(shear_problem(degree), GAMMA0)
    u = DisplacementField(system.space, system.solve(system.stiffness, system.load))
    report = compute_report(system, u, construct_sigma(system, u))
    assert report["tot"] < 1e-9


def test_constant_data_have_no_oscillation(benchmark):
    system = NitscheSystem(benchmark, GAMMA0)
    u1 = system.solve_linearized(system.space.zero(), 0.1)
    u2 = system.solve_linearized(u1, 0.1)
    report = compute_report(system, u2, construct_sigma_split(system, u2, u1, 0.1))
    assert report["osc"] < 1e-14 and report["Neu"] < 1e-14
    for name in ("str", "cnt", "reg1", "reg2", "lin1", "lin2"):
        assert report[name] > 0.0


def test_aggregates(benchmark, rng):
    system = NitscheSystem(benchmark, GAMMA0)
    u1 = system.solve_linearized(system.space.zero(), 0.1)
    u2 = DisplacementField(system.space, u1.coeffs + 1e-3 * rng.standard_normal(system.space.ndofs))
    report = compute_report(system, u2, construct_sigma_split(system, u2, u1, 0.1))
    loc = report.local
    np.testing.assert_allclose(loc["reg"], loc["reg1"] + loc["reg2"])
    np.testing.assert_allclose(loc["lin"], loc["lin1"] + loc["lin2"])
    first = loc["osc"] + loc["str"] + loc["reg1"] + loc["lin1"] + loc["Neu"]
    second = loc["cnt"] + loc["reg2"] + loc["lin2"]
    np.testing.assert_allclose(loc["tot"] ** 2, first**2 + second**2)
    for name in ALL_NAMES:
        assert report[name] == pytest.approx(np.sqrt(np.sum(loc[name] ** 2)))
    # Minkowski: the guaranteed bound dominates the aggregated total
    assert report["tot"] <= guaranteed_bound(report) * (1 + 1e-14)


def test_csv_layout(benchmark, tmp_path):
    system = NitscheSystem(benchmark, GAMMA0)
    u = system.solve_linearized(system.space.zero(), 0.1)
    report = compute_report(system, u, construct_sigma(system, u))
    path = tmp_path / "est.csv"
    report.write_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["element", "x", "y", "h_T", *ALL_NAMES]
    assert len(rows) == benchmark.mesh.n_cells + 2
    body = np.array([[float(v) for v in r[1:]] for r in rows[1:-1]])
    np.testing.assert_array_equal(body[:, :2], benchmark.mesh.centroids)
    for k, name in enumerate(ALL_NAMES):
        np.testing.assert_array_equal(body[:, 3 + k], report.local[name])
    assert rows[-1][0] == "global"
    assert [float(v) for v in rows[-1][4:]] == [report[name] for name in ALL_NAMES]
