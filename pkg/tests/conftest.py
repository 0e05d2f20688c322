import numpy as np
import pytest

from contact_equilibrate.adaptive import AdaptiveConfig, run
from contact_equilibrate.femcore import ElasticityCoefficients
from contact_equilibrate.mesh import Segment, Tag, build_rect_mesh, segment_tag_rule
from contact_equilibrate.problem import (ContactProblem, benchmark_problem, constant_field,
                                        piecewise_traction)
from contact_equilibrate.verification import reference_solution


@pytest.fixture(scope="session")
def benchmark():
    return benchmark_problem()


@pytest.fixture(scope="session")
def adaptive_log():
    return run(benchmark_problem(), AdaptiveConfig())


@pytest.fixture(scope="session")
def uniform_log():
    return run(benchmark_problem(), AdaptiveConfig(max_steps=3), strategy="uniform")


@pytest.fixture(scope="session")
def reference():
    # Five uniform refinements of the 4 x 2 mesh: h_T = 0.022.
    return reference_solution(benchmark_problem(), levels=5)


def dirichlet_square(n=3, degree=1, young=1.0, poisson=0.3, body_force=(0.0, 0.0)):
    mesh = build_rect_mesh(n, n, (0.0, 1.0, 0.0, 1.0), lambda a, b: Tag.DIRICHLET)
    return ContactProblem(mesh, ElasticityCoefficients.plane_strain(young, poisson),
                          constant_field(body_force), constant_field((0.0, 0.0)), degree, young)


def zero_load_problem(degree=1):
    pb = benchmark_problem(degree=degree)
    zero = constant_field((0.0, 0.0))
    return ContactProblem(pb.mesh, pb.coeff, zero, zero, degree, pb.young)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def shear_problem(degree=1, n=3, slope=0.01):
    """Clamped left side, simple shear ``u = (0, slope x)`` driven by boundary tractions.

    The exact stress is the constant ``mu slope (e1 e2^T + e2 e1^T)``, which
    every discrete space reproduces.
    """
    coeff = ElasticityCoefficients.plane_strain(1.0, 0.3)
    s = coeff.mu * slope
    left = Segment((0, 0), (0, 1), Tag.DIRICHLET)
    mesh = build_rect_mesh(n, n, (0.0, 1.0, 0.0, 1.0), segment_tag_rule([left]))
    g = piecewise_traction([(Segment((1, 0), (1, 1), Tag.NEUMANN), (0.0, s)),
                            (Segment((0, 1), (1, 1), Tag.NEUMANN), (s, 0.0)),
                            (Segment((0, 0), (1, 0), Tag.NEUMANN), (-s, 0.0))])
    return ContactProblem(mesh, coeff, constant_field((0.0, 0.0)), g, degree, 1.0)
