"""Independent oracles for assembly and quadrature tests.

Everything here integrates polynomials over triangles in exact rational
arithmetic through the barycentric moment formula

    int_T  l1^a l2^b l3^c  dx = 2|T| a! b! c! / (a + b + c + 2)!,

so it shares no code path (and no quadrature rule) with the package.
"""

from __future__ import annotations

from fractions import Fraction
from math import factorial

import numpy as np
import sympy as sp

L1, L2 = sp.symbols("l1 l2")
L3 = 1 - L1 - L2


def moment(a: int, b: int, c: int) -> Fraction:
    """Reference-triangle integral of l1^a l2^b l3^c (area factor 2|T|=1)."""
    return Fraction(factorial(a) * factorial(b) * factorial(c),
                    factorial(a + b + c + 2))


def integrate_reference(expr) -> Fraction:
    """Exact integral of a sympy polynomial in (l1, l2) over the reference
    triangle, with l3 understood as 1 - l1 - l2 already substituted."""
    poly = sp.Poly(sp.expand(expr), L1, L2)
    total = Fraction(0)
    for (a, b), coeff in poly.terms():
        q = sp.Rational(coeff)
        total += Fraction(q.p, q.q) * moment(a, b, 0)
    return total


def integrate_bary(expr) -> Fraction:
    """Exact integral over the reference triangle of an expression in
    l1, l2, l3 (symbols L1, L2 and the combination L3)."""
    return integrate_reference(sp.expand(expr))


class TriangleOracle:
    """Exact element matrices on one triangle with rational vertices.

    The scalar basis is the Mini component basis: three hats (the
    barycentric coordinates) plus the cubic bubble 27*l1*l2*l3.
    """

    def __init__(self, verts):
        self.verts = [(sp.Rational(x), sp.Rational(y)) for x, y in verts]
        (x1, y1), (x2, y2), (x3, y3) = self.verts
        det = (x2 - x1) * (y3 - y1) - (y2 - y1) * (x3 - x1)
        self.det = det  # = 2 * area, positive for ccw triangles
        self.area = sp.Rational(det, 2)
        # constant physical gradients of the hats
        g1 = ((y2 - y3) / det, (x3 - x2) / det)
        g2 = ((y3 - y1) / det, (x1 - x3) / det)
        g3 = ((y1 - y2) / det, (x2 - x1) / det)
        self.hat_grads = [g1, g2, g3]
        self.basis = [L1, L2, L3, 27 * L1 * L2 * L3]

    def grad(self, i: int):
        """Gradient of basis function i as a sympy 2-vector."""
        if i < 3:
            return sp.Matrix(self.hat_grads[i])
        gb = sp.zeros(2, 1)
        prods = [L2 * L3, L1 * L3, L1 * L2]
        for a in range(3):
            gb += 27 * prods[a] * sp.Matrix(self.hat_grads[a])
        return gb

    def integrate(self, expr) -> float:
        """Exact physical integral of a barycentric-polynomial expression."""
        det = sp.Rational(self.det)
        return float(integrate_bary(expr) * Fraction(det.p, det.q))

    def mass(self, nloc: int = 4) -> np.ndarray:
        out = np.empty((nloc, nloc))
        for i in range(nloc):
            for j in range(nloc):
                out[i, j] = self.integrate(self.basis[i] * self.basis[j])
        return out

    def stiffness(self, nloc: int = 4) -> np.ndarray:
        out = np.empty((nloc, nloc))
        for i in range(nloc):
            gi = self.grad(i)
            for j in range(nloc):
                gj = self.grad(j)
                out[i, j] = self.integrate(gi.dot(gj))
        return out

    def divergence(self, nloc: int = 4) -> np.ndarray:
        """B_local[p, (c, j)] = -int hat_p * d(basis_j)/dx_c."""
        out = np.empty((3, 2 * nloc))
        for p in range(3):
            for c in range(2):
                for j in range(nloc):
                    out[p, c * nloc + j] = -self.integrate(
                        self.basis[p] * self.grad(j)[c])
        return out

    def mixed_mass(self, nloc: int = 4) -> np.ndarray:
        """Mini-scalar against P1, for the buoyancy coupling."""
        out = np.empty((nloc, 3))
        for i in range(nloc):
            for j in range(3):
                out[i, j] = self.integrate(self.basis[i] * self.basis[j])
        return out

    def convection(self, w_coeffs, nloc: int = 4) -> np.ndarray:
        """N[a, b] = (c(w, psi_b, psi_a) - c(w, psi_a, psi_b)) / 2 with the
        convecting velocity w given by Mini coefficients (2, 4)."""
        wx = sum(sp.Rational(w_coeffs[0][k]) * self.basis[k] for k in range(4))
        wy = sum(sp.Rational(w_coeffs[1][k]) * self.basis[k] for k in range(4))
        out = np.empty((nloc, nloc))
        for a in range(nloc):
            ga = self.grad(a)
            for b in range(nloc):
                gb = self.grad(b)
                adv_ba = (wx * gb[0] + wy * gb[1]) * self.basis[a]
                adv_ab = (wx * ga[0] + wy * ga[1]) * self.basis[b]
                out[a, b] = self.integrate((adv_ba - adv_ab) / 2)
        return out

    def edge_mass(self, length: float) -> np.ndarray:
        """P1 trace mass on an edge of the given length."""
        return np.array([[2.0, 1.0], [1.0, 2.0]]) * (length / 6.0)


def random_rational_triangle(rng: np.random.Generator, denom: int = 16):
    """Random positively oriented triangle with denominator-limited coords."""
    while True:
        pts = rng.integers(-2 * denom, 2 * denom, size=(3, 2))
        verts = [(Fraction(int(p[0]), denom), Fraction(int(p[1]), denom))
                 for p in pts]
        (x1, y1), (x2, y2), (x3, y3) = verts
        det = (x2 - x1) * (y3 - y1) - (y2 - y1) * (x3 - x1)
        if det > Fraction(1, denom):
            return verts
