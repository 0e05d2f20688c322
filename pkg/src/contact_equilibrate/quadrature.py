"""Quadrature rules on the reference triangle and the unit interval.

Triangle rules are collapsed Gauss (Stroud conical product) rules: a
Gauss-Jacobi rule in the collapsed direction times a Gauss-Legendre rule.
They have positive weights and all points strictly inside the triangle.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


@dataclass(frozen=True)
class QuadratureRule:
    """Points and weights on a reference cell.

    Attributes
    ----------
    points : ndarray
        Barycentric coordinates, shape ``(nq, 3)`` on the triangle or the
        interval parameter ``t`` in ``[0, 1]``, shape ``(nq,)``, on a face.
    weights : ndarray
        Weights summing to the reference measure (1/2 for the triangle,
        1 for the unit interval).
    degree : int
        Polynomial degree integrated exactly.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def size(self) -> int:
        return len(self.weights)


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
    """Collapsed Gauss rule on the reference triangle exact to ``degree``."""
    n = max(1, (degree + 2) // 2)
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    xl, wl = roots_legendre(n)
    # x = u, y = v (1 - u) with Jacobian (1 - u); the Jacobi weight carries it.
    u = 0.5 * (1.0 + xj)
    wu = wj / 4.0
    v = 0.5 * (1.0 + xl)
    wv = wl / 2.0
    uu, vv = np.meshgrid(u, v, indexing="ij")
    xi = uu.ravel()
    eta = (vv * (1.0 - uu)).ravel()
    w = np.outer(wu, wv).ravel()
    bary = np.column_stack([1.0 - xi - eta, xi, eta])
    bary.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(bary, w, 2 * n - 1)


@lru_cache(maxsize=None)
def interval_rule(degree: int) -> QuadratureRule:
    """Gauss-Legendre rule on ``[0, 1]`` exact to ``degree``."""
    n = max(1, (degree + 2) // 2)
    x, w = roots_legendre(n)
    t = 0.5 * (1.0 + x)
    w = 0.5 * w
    t.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(t, w, 2 * n - 1)


# Face integrals of terms containing the kink of min(x, 0) are over-integrated.
KINK_FACE_DEGREE = 10


def element_degree(p: int) -> int:
    """Element rule degree used for a displacement space of degree ``p``."""
    return 2 * p + 2


def legendre_face_basis(q: int, t: np.ndarray) -> np.ndarray:
    """Legendre polynomials on ``[0, 1]`` orthonormal for the unit length.

    Returns an array of shape ``(len(t), q + 1)``.
    """
    s = 2.0 * np.asarray(t, dtype=float) - 1.0
    out = np.empty((s.size, q + 1))
    for r in range(q + 1):
        coeffs = np.zeros(r + 1)
        coeffs[r] = 1.0
        out[:, r] = np.sqrt(2 * r + 1) * np.polynomial.legendre.legval(s, coeffs)
    return out
