"""Problem data: geometry, material, loads and the discrete space degree."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .femcore import ElasticityCoefficients, VectorField
from .mesh import Segment, Tag, TriMesh, build_rect_mesh, segment_tag_rule


def constant_field(value: Sequence[float]) -> VectorField:
    v = np.asarray(value, dtype=float)

    def field(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(v, x.shape).copy()

    return field


def piecewise_traction(pieces: Sequence[tuple[Segment, Sequence[float]]]) -> VectorField:
    """Traction that is constant on each listed segment and zero elsewhere.

    Evaluation happens at face quadrature points, which are never segment
    endpoints, so the choice at shared endpoints is immaterial.
    """
    pieces = [(s, np.asarray(v, dtype=float)) for s, v in pieces]

    def field(x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 2)
        out = np.zeros_like(flat)
        for seg, value in pieces:
            hit = np.array([seg.contains(p) for p in flat], dtype=bool)
            out[hit] = value
        return out.reshape(x.shape)

    return field


@dataclass(frozen=True)
class ContactProblem:
    """Unilateral contact problem on a fixed initial mesh.

    Attributes
    ----------
    mesh : TriMesh
        Initial mesh carrying the boundary partition.
    coeff : ElasticityCoefficients
    body_force : callable
        ``f(x)`` for points of shape ``(n, 2)``.
    traction : callable
        ``g_N(x)``, evaluated on Neumann faces only.
    degree : int
        Polynomial degree of the displacement space.
    young : float
        Young modulus, used as the scale of the Nitsche and regularization
        parameters.
    """

    mesh: TriMesh
    coeff: ElasticityCoefficients
    body_force: VectorField
    traction: VectorField
    degree: int = 1
    young: float = 1.0

    def with_mesh(self, mesh: TriMesh) -> "ContactProblem":
        return ContactProblem(mesh, self.coeff, self.body_force, self.traction, self.degree, self.young)


def section7_segments():
    dirichlet = Segment((-1.0, 0.0), (0.0, 0.0), Tag.DIRICHLET)
    contact = Segment((0.0, 0.0), (1.0, 0.0), Tag.CONTACT)
    loaded = Segment((1.0, 0.0), (1.0, 1.0), Tag.NEUMANN)
    return dirichlet, contact, loaded


def benchmark_problem(nx: int = 4, ny: int = 2, degree: int = 1, young: float = 1.0,
                      poisson: float = 0.3) -> ContactProblem:
    """Elastic block on a rigid foundation, clamped on the left half of its base.

    Domain ``(-1, 1) x (0, 1)``; the base is clamped on ``(-1, 0)`` and in
    unilateral contact on ``(0, 1)``; the right side is pushed by the
    traction ``(-0.0275, 0)``; gravity-like body force ``(0, -0.01)``.
    """
    dirichlet, contact, loaded = section7_segments()
    mesh = build_rect_mesh(nx, ny, (-1.0, 1.0, 0.0, 1.0), segment_tag_rule([dirichlet, contact]))
    return ContactProblem(
        mesh=mesh,
        coeff=ElasticityCoefficients.plane_strain(young, poisson),
        body_force=constant_field((0.0, -0.01)),
        traction=piecewise_traction([(loaded, (-0.0275, 0.0))]),
        degree=degree,
        young=young,
    )
