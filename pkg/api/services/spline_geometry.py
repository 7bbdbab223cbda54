"""
Spline Geometry - B-spline bases, patch maps and Jacobian checks.

Univariate bases are evaluated with the Cox-de Boor recursion, vectorized over
evaluation points. A patch is a tensor-product map from the reference square
[0, 1]^2 into the plane; control points are stored row-major over (u, v).
"""

from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from api.config.logging import get_logger
from api.services.errors import ContractError, GeometryError, SplineDomainError

logger = get_logger("service.spline_geometry")

# Relative slack on the knot range before a parameter is rejected
KNOT_RANGE_TOL = 1e-12
# |det| below this fraction of the bounding-box area counts as degenerate
DET_REL_TOL = 1e-12

# Patch sides: 0 -> u=0, 1 -> u=1, 2 -> v=0, 3 -> v=1
SIDES = (0, 1, 2, 3)


@dataclass(frozen=True, eq=False)
class KnotVector:
    """Open knot vector of a univariate B-spline basis."""

    degree: int
    knots: NDArray[np.float64]

    def __post_init__(self):
        p = int(self.degree)
        knots = np.array(self.knots, dtype=float)
        if p < 0:
            raise GeometryError(f"Spline degree must be non-negative, got {p}")
        if knots.ndim != 1 or knots.size < 2 * (p + 1):
            raise GeometryError(
                f"Knot vector of degree {p} needs at least {2 * (p + 1)} knots, got {knots.size}"
            )
        if np.any(np.diff(knots) < 0):
            raise GeometryError("Knots must be non-decreasing")
        if knots[-1] <= knots[0]:
            raise GeometryError("Knot vector has no nonempty span")

        values, counts = np.unique(knots, return_counts=True)
        if counts[0] != p + 1 or counts[-1] != p + 1:
            raise GeometryError(
                f"Knot vector must be open: end multiplicities {counts[0]}/{counts[-1]}, expected {p + 1}"
            )
        if np.any(counts[1:-1] > p + 1):
            raise GeometryError(f"Interior knot multiplicity exceeds {p + 1}")

        knots.setflags(write=False)
        object.__setattr__(self, "degree", p)
        object.__setattr__(self, "knots", knots)

    @classmethod
    def uniform(cls, degree: int, n_spans: int, start: float = 0.0, end: float = 1.0) -> "KnotVector":
        inner = np.linspace(start, end, n_spans + 1)
        knots = np.concatenate([np.full(degree, start), inner, np.full(degree, end)])
        return cls(degree, knots)

    @property
    def n(self) -> int:
        """Number of basis functions."""
        return self.knots.size - self.degree - 1

    @property
    def first(self) -> float:
        return float(self.knots[0])

    @property
    def last(self) -> float:
        return float(self.knots[-1])

    @cached_property
    def breakpoints(self) -> NDArray[np.float64]:
        return np.unique(self.knots)

    @property
    def n_spans(self) -> int:
        return self.breakpoints.size - 1

    @cached_property
    def greville(self) -> NDArray[np.float64]:
        p, t = self.degree, self.knots
        if p == 0:
            return 0.5 * (t[:-1] + t[1:])
        return np.array([t[i + 1:i + p + 1].mean() for i in range(self.n)])

    def matches(self, other: "KnotVector", reverse: bool = False, tol: float = 1e-12) -> bool:
        """True when both vectors describe the same basis (optionally reversed)."""
        if self.degree != other.degree or self.knots.size != other.knots.size:
            return False
        theirs = other.reversed().knots if reverse else other.knots
        return bool(np.allclose(self.knots, theirs, rtol=0.0, atol=tol))

    def reversed(self) -> "KnotVector":
        return KnotVector(self.degree, (self.first + self.last) - self.knots[::-1])

    def find_span(self, x: ArrayLike) -> NDArray[np.intp]:
        """Knot index s with knots[s] <= x < knots[s+1]; the last span is closed."""
        s = np.searchsorted(self.knots, x, side="right") - 1
        return np.clip(s, self.degree, self.n - 1)

    def check_range(self, x: ArrayLike) -> NDArray[np.float64]:
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        slack = KNOT_RANGE_TOL * (self.last - self.first)
        if np.any(xs < self.first - slack) or np.any(xs > self.last + slack) or np.any(~np.isfinite(xs)):
            bad = xs[(xs < self.first - slack) | (xs > self.last + slack) | ~np.isfinite(xs)]
            raise SplineDomainError(
                f"Parameter {bad[0]!r} outside knot range [{self.first}, {self.last}]"
            )
        return np.clip(xs, self.first, self.last)

    def midpoints(self) -> NDArray[np.float64]:
        bp = self.breakpoints
        return 0.5 * (bp[:-1] + bp[1:])


def basis_derivs_at(kv: KnotVector, x: ArrayLike, order: int = 0) -> tuple[NDArray[np.intp], NDArray[np.float64]]:
    """Nonzero basis functions and derivatives at many points.

    Returns ``(first, ders)`` where ``first[m]`` is the index of the first
    active function at point m and ``ders[m, k, j]`` is the k-th derivative of
    function ``first[m] + j``.
    """
    xs = kv.check_range(x)
    p, t = kv.degree, kv.knots
    m = xs.size
    s = kv.find_span(xs)

    def ratio(num, den):
        return np.divide(num, den, out=np.zeros(m), where=den > 0)

    # vals[d][:, j] is N_{s-d+j, d}
    vals = [np.ones((m, 1))]
    for d in range(1, p + 1):
        prev = vals[-1]
        cur = np.zeros((m, d + 1))
        for j in range(d + 1):
            i = s - d + j
            if j >= 1:
                cur[:, j] += ratio(xs - t[i], t[i + d] - t[i]) * prev[:, j - 1]
            if j <= d - 1:
                cur[:, j] += ratio(t[i + d + 1] - xs, t[i + d + 1] - t[i + 1]) * prev[:, j]
        vals.append(cur)

    ders = np.zeros((m, order + 1, p + 1))
    ders[:, 0, :] = vals[p]
    for k in range(1, min(order, p) + 1):
        a = vals[p - k]
        for d in range(p - k + 1, p + 1):
            nxt = np.zeros((m, d + 1))
            for j in range(d + 1):
                i = s - d + j
                if j >= 1:
                    nxt[:, j] += d * ratio(a[:, j - 1], t[i + d] - t[i])
                if j <= d - 1:
                    nxt[:, j] -= d * ratio(a[:, j], t[i + d + 1] - t[i + 1])
            a = nxt
        ders[:, k, :] = a
    return s - p, ders


def eval_basis(kv: KnotVector, x: float) -> tuple[NDArray[np.float64], int]:
    """Values of the p+1 nonzero basis functions at x and the first active index."""
    first, ders = basis_derivs_at(kv, [x], 0)
    return ders[0, 0], int(first[0])


def eval_basis_derivs(kv: KnotVector, x: float, order: int) -> tuple[NDArray[np.float64], int]:
    """Rows 0..order of values and derivatives of the nonzero functions at x."""
    if order not in (0, 1, 2):
        raise ContractError(f"Derivative order must be 0, 1 or 2, got {order}")
    first, ders = basis_derivs_at(kv, [x], order)
    return ders[0], int(first[0])


@dataclass(frozen=True)
class TensorBasis2D:
    kv_u: KnotVector
    kv_v: KnotVector

    @property
    def shape(self) -> tuple[int, int]:
        return self.kv_u.n, self.kv_v.n

    @property
    def size(self) -> int:
        return self.kv_u.n * self.kv_v.n

    @property
    def degrees(self) -> tuple[int, int]:
        return self.kv_u.degree, self.kv_v.degree


@dataclass(frozen=True)
class JacobianSample:
    parametric_point: tuple[float, float]
    jacobian: NDArray[np.float64]
    det: float


class SignCertificate(str, Enum):
    ALL_POSITIVE = "AllPositive"
    ALL_NEGATIVE = "AllNegative"
    MIXED = "Mixed"


@dataclass(frozen=True, eq=False)
class Patch:
    """Tensor-product B-spline map G: [0,1]^2 -> R^2."""

    basis: TensorBasis2D
    control_points: NDArray[np.float64]

    def __post_init__(self):
        cps = np.array(self.control_points, dtype=float).reshape(-1, 2)
        if cps.shape[0] != self.basis.size:
            raise GeometryError(
                f"Patch has {cps.shape[0]} control points, basis needs {self.basis.size}"
            )
        for kv in (self.basis.kv_u, self.basis.kv_v):
            if kv.first != 0.0 or kv.last != 1.0:
                raise GeometryError("Patch knot vectors must span the reference interval [0, 1]")
        cps.setflags(write=False)
        object.__setattr__(self, "control_points", cps)

    @classmethod
    def from_net(cls, kv_u: KnotVector, kv_v: KnotVector, net: ArrayLike) -> "Patch":
        return cls(TensorBasis2D(kv_u, kv_v), np.asarray(net, dtype=float).reshape(-1, 2))

    @property
    def kv_u(self) -> KnotVector:
        return self.basis.kv_u

    @property
    def kv_v(self) -> KnotVector:
        return self.basis.kv_v

    @property
    def net(self) -> NDArray[np.float64]:
        """Control points as an (n_u, n_v, 2) array."""
        return self.control_points.reshape(self.basis.shape + (2,))

    def with_control_points(self, control_points: ArrayLike) -> "Patch":
        return Patch(self.basis, np.asarray(control_points, dtype=float).reshape(-1, 2))

    def side_indices(self, side: int) -> NDArray[np.intp]:
        """Local control point indices along a side, in increasing parameter order."""
        n_u, n_v = self.basis.shape
        if side == 0:
            return np.arange(n_v)
        if side == 1:
            return (n_u - 1) * n_v + np.arange(n_v)
        if side == 2:
            return np.arange(n_u) * n_v
        if side == 3:
            return np.arange(n_u) * n_v + (n_v - 1)
        raise ContractError(f"Unknown patch side {side}")

    def side_knots(self, side: int) -> KnotVector:
        return self.kv_v if side in (0, 1) else self.kv_u

    def boundary_indices(self) -> NDArray[np.intp]:
        return np.unique(np.concatenate([self.side_indices(s) for s in SIDES]))

    def corner_indices(self) -> NDArray[np.intp]:
        n_u, n_v = self.basis.shape
        return np.unique([0, n_v - 1, (n_u - 1) * n_v, n_u * n_v - 1])

    def bounding_box(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        return self.control_points.min(axis=0), self.control_points.max(axis=0)

    @property
    def diameter(self) -> float:
        lo, hi = self.bounding_box()
        return float(np.linalg.norm(hi - lo))

    def evaluate(self, us: ArrayLike, vs: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Points (m, 2) and Jacobians (m, 2, 2) at paired parameters."""
        first_u, du = basis_derivs_at(self.kv_u, us, 1)
        first_v, dv = basis_derivs_at(self.kv_v, vs, 1)
        if first_u.size != first_v.size:
            raise ContractError("u and v parameter arrays must have the same length")
        pu, pv = self.basis.degrees
        n_v = self.kv_v.n
        iu = first_u[:, None] + np.arange(pu + 1)
        iv = first_v[:, None] + np.arange(pv + 1)
        ctrl = self.control_points[iu[:, :, None] * n_v + iv[:, None, :]]

        points = np.einsum("ma,mb,mabk->mk", du[:, 0], dv[:, 0], ctrl)
        jac = np.empty((points.shape[0], 2, 2))
        jac[:, :, 0] = np.einsum("ma,mb,mabk->mk", du[:, 1], dv[:, 0], ctrl)
        jac[:, :, 1] = np.einsum("ma,mb,mabk->mk", du[:, 0], dv[:, 1], ctrl)
        return points, jac

    def evaluate_grid(self, us: ArrayLike, vs: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Points (nu, nv, 2) and Jacobians (nu, nv, 2, 2) on a tensor grid."""
        us = np.atleast_1d(np.asarray(us, dtype=float))
        vs = np.atleast_1d(np.asarray(vs, dtype=float))
        uu, vv = np.meshgrid(us, vs, indexing="ij")
        points, jac = self.evaluate(uu.ravel(), vv.ravel())
        return points.reshape(us.size, vs.size, 2), jac.reshape(us.size, vs.size, 2, 2)


def jacobian_det(jac: NDArray[np.float64]) -> NDArray[np.float64]:
    return jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]


def geometry_eval(patch: Patch, u: float, v: float) -> tuple[NDArray[np.float64], JacobianSample]:
    points, jac = patch.evaluate([u], [v])
    j = jac[0]
    det = float(j[0, 0] * j[1, 1] - j[0, 1] * j[1, 0])
    return points[0], JacobianSample(parametric_point=(float(u), float(v)), jacobian=j, det=det)


def sample_parameters(kv: KnotVector, n: int) -> NDArray[np.float64]:
    """Breakpoints plus n Gauss-Legendre points in every nonempty span."""
    nodes, _ = np.polynomial.legendre.leggauss(n)
    bp = kv.breakpoints
    a, b = bp[:-1, None], bp[1:, None]
    interior = (0.5 * (b - a) * (nodes[None, :] + 1.0) + a).ravel()
    return np.sort(np.concatenate([bp, interior]))


def jacobian_dets_sampled(patch: Patch, sample_grid: Optional[int] = None) -> NDArray[np.float64]:
    pu, pv = patch.basis.degrees
    n_u = max(sample_grid or 0, pu + 1)
    n_v = max(sample_grid or 0, pv + 1)
    _, jac = patch.evaluate_grid(sample_parameters(patch.kv_u, n_u), sample_parameters(patch.kv_v, n_v))
    return jacobian_det(jac)


def jacobian_sign_certificate(patch: Patch, sample_grid: Optional[int] = None) -> SignCertificate:
    """Classify the sign of det(DG) over breakpoints and per-span Gauss points."""
    dets = jacobian_dets_sampled(patch, sample_grid)
    lo, hi = patch.bounding_box()
    tol = DET_REL_TOL * float(np.prod(hi - lo))
    if np.any(np.abs(dets) <= tol):
        return SignCertificate.MIXED
    if np.all(dets > 0):
        return SignCertificate.ALL_POSITIVE
    if np.all(dets < 0):
        return SignCertificate.ALL_NEGATIVE
    return SignCertificate.MIXED


def knot_insertion_matrix(kv: KnotVector, x: float) -> tuple[KnotVector, NDArray[np.float64]]:
    """Boehm insertion of one knot; returns the new vector and T with P_new = T @ P."""
    p, t, n = kv.degree, kv.knots, kv.n
    if not (kv.first < x < kv.last):
        raise ContractError(f"Inserted knot {x} must lie strictly inside the knot range")
    if np.count_nonzero(t == x) >= p:
        raise ContractError(f"Knot {x} already has multiplicity {p}; insertion would break continuity")
    s = int(kv.find_span(x))
    T = np.zeros((n + 1, n))
    for i in range(n + 1):
        if i <= s - p:
            T[i, i] = 1.0
        elif i >= s + 1:
            T[i, i - 1] = 1.0
        else:
            alpha = (x - t[i]) / (t[i + p] - t[i])
            T[i, i] = alpha
            T[i, i - 1] = 1.0 - alpha
    return KnotVector(p, np.insert(t, s + 1, x)), T


def insert_knots(kv: KnotVector, xs: Sequence[float]) -> tuple[KnotVector, NDArray[np.float64]]:
    T = np.eye(kv.n)
    for x in sorted(xs):
        kv, step = knot_insertion_matrix(kv, float(x))
        T = step @ T
    return kv, T


def refine_patch(patch: Patch, new_u: Sequence[float] = (), new_v: Sequence[float] = ()) -> Patch:
    """Insert knots without changing the geometry map."""
    kv_u, tu = insert_knots(patch.kv_u, new_u)
    kv_v, tv = insert_knots(patch.kv_v, new_v)
    net = np.einsum("ai,ijk,bj->abk", tu, patch.net, tv)
    return Patch.from_net(kv_u, kv_v, net)


def refine_uniform(patch: Patch, times: int = 1) -> Patch:
    """Bisect every nonempty span in both directions ``times`` times."""
    for _ in range(times):
        patch = refine_patch(patch, patch.kv_u.midpoints(), patch.kv_v.midpoints())
    return patch
