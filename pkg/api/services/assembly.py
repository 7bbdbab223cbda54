"""
Assembly - Galerkin forms for the state, adjoint and shape-gradient problems.

Element contributions are integrated per patch with tensor Gauss rules on each
knot span and scattered into coordinate-format matrices. Matrices are kept as
their lower triangle so the assembled operators are exactly symmetric.
"""

import copy
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray
from scipy import sparse

from api.config.logging import get_logger
from api.services.errors import ConfigurationError, ContractError, GeometryError
from api.services.multipatch_topology import (
    CurveSamples,
    GlobalDofMap,
    MaterialKind,
    MultiPatchDomain,
    VectorDofMap,
    reluctivity_field,
)
from api.services.spline_geometry import KnotVector, Patch, basis_derivs_at

logger = get_logger("service.assembly")

Forcing = Callable[[NDArray[np.float64], NDArray[np.float64]], NDArray[np.float64]]
AlphaSpec = Union[None, float, Sequence[float]]


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre rule with ``order`` points per knot span."""

    order: int

    def __post_init__(self):
        if self.order < 1:
            raise ContractError(f"Quadrature order must be at least 1, got {self.order}")

    def span_points(self, kv: KnotVector) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Points and weights shaped (n_spans, order)."""
        nodes, weights = np.polynomial.legendre.leggauss(self.order)
        bp = kv.breakpoints
        a, b = bp[:-1, None], bp[1:, None]
        half = 0.5 * (b - a)
        return half * (nodes[None, :] + 1.0) + a, half * weights[None, :]


def default_order(patch: Patch, extra: int = 0) -> int:
    return max(patch.basis.degrees) + 1 + extra


@dataclass
class PatchQuadrature:
    """Basis data at all quadrature points of one patch.

    Shapes use E elements, Q points per element and F active functions.
    """

    patch_index: int
    idx: NDArray[np.intp]
    values: NDArray[np.float64]
    grads: NDArray[np.float64]
    dx: NDArray[np.float64]
    points: NDArray[np.float64]


def patch_quadrature(patch: Patch, patch_index: int, q: Optional[int] = None) -> PatchQuadrature:
    """Tabulate basis values, physical gradients and weights on one patch.

    Raises:
        GeometryError: if det(DG) <= 0 at a quadrature point
    """
    rule = QuadratureRule(q or default_order(patch))
    nq = rule.order
    pu, pv = patch.basis.degrees
    n_v = patch.kv_v.n

    xu, wu = rule.span_points(patch.kv_u)
    xv, wv = rule.span_points(patch.kv_v)
    neu, nev = xu.shape[0], xv.shape[0]
    fu, du = basis_derivs_at(patch.kv_u, xu.ravel(), 1)
    fv, dv = basis_derivs_at(patch.kv_v, xv.ravel(), 1)
    nu_, dnu = du[:, 0].reshape(neu, nq, pu + 1), du[:, 1].reshape(neu, nq, pu + 1)
    nv_, dnv = dv[:, 0].reshape(nev, nq, pv + 1), dv[:, 1].reshape(nev, nq, pv + 1)
    fu = fu.reshape(neu, nq)[:, 0]
    fv = fv.reshape(nev, nq)[:, 0]

    E, Q, F = neu * nev, nq * nq, (pu + 1) * (pv + 1)
    iu = fu[:, None, None, None] + np.arange(pu + 1)[None, None, :, None]
    iv = fv[None, :, None, None] + np.arange(pv + 1)[None, None, None, :]
    idx = (iu * n_v + iv).reshape(E, F)

    values = np.einsum("eia,fjb->efijab", nu_, nv_).reshape(E, Q, F)
    d_u = np.einsum("eia,fjb->efijab", dnu, nv_).reshape(E, Q, F)
    d_v = np.einsum("eia,fjb->efijab", nu_, dnv).reshape(E, Q, F)
    weights = np.einsum("ei,fj->efij", wu, wv).reshape(E, Q)

    ctrl = patch.control_points[idx]
    points = np.einsum("eqf,efk->eqk", values, ctrl)
    x_u = np.einsum("eqf,efk->eqk", d_u, ctrl)
    x_v = np.einsum("eqf,efk->eqk", d_v, ctrl)
    det = x_u[..., 0] * x_v[..., 1] - x_v[..., 0] * x_u[..., 1]
    if np.any(det <= 0):
        raise GeometryError(
            f"Patch {patch_index}: non-positive Jacobian determinant {det.min():.3e} at a quadrature point"
        )

    inv = 1.0 / det[..., None]
    gx = (x_v[..., 1, None] * d_u - x_u[..., 1, None] * d_v) * inv
    gy = (-x_v[..., 0, None] * d_u + x_u[..., 0, None] * d_v) * inv
    return PatchQuadrature(
        patch_index=patch_index,
        idx=idx,
        values=values,
        grads=np.stack([gx, gy], axis=-1),
        dx=weights * det,
        points=points,
    )


def domain_quadrature(domain: MultiPatchDomain, q: Optional[int] = None, extra: int = 0) -> list[PatchQuadrature]:
    return [
        patch_quadrature(patch, i, q or default_order(patch, extra))
        for i, patch in enumerate(domain.patches)
    ]


@dataclass(eq=False)
class SparseSymmetricSystem:
    """Global symmetric matrix (lower triangle stored) with Dirichlet elimination."""

    lower: sparse.csr_matrix
    free_dofs: NDArray[np.intp]
    rhs: Optional[NDArray[np.float64]] = None
    patch_blocks: tuple[sparse.csr_matrix, ...] = ()
    local_to_global: tuple[NDArray[np.intp], ...] = ()
    patch_coefficients: tuple[float, ...] = ()

    @classmethod
    def from_matrix(cls, matrix, rhs: Optional[NDArray[np.float64]] = None) -> "SparseSymmetricSystem":
        """Wrap an SPD matrix whose dofs are all free."""
        mat = sparse.csr_matrix(matrix)
        if mat.shape[0] != mat.shape[1]:
            raise ContractError(f"Matrix must be square, got {mat.shape}")
        return cls(
            lower=sparse.tril(mat, format="csr"),
            free_dofs=np.arange(mat.shape[0]),
            rhs=None if rhs is None else np.asarray(rhs, dtype=float),
        )

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    @property
    def n_free(self) -> int:
        return int(self.free_dofs.size)

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        low = self.lower
        return (low + low.T - sparse.diags(low.diagonal())).tocsr()

    @cached_property
    def reduced(self) -> sparse.csr_matrix:
        return self.matrix[self.free_dofs][:, self.free_dofs].tocsr()

    def reduced_rhs(self, rhs: Optional[NDArray[np.float64]] = None) -> NDArray[np.float64]:
        vec = self.rhs if rhs is None else np.asarray(rhs, dtype=float)
        if vec is None:
            raise ContractError("System has no right-hand side")
        if vec.shape[0] == self.n:
            return vec[self.free_dofs]
        if vec.shape[0] == self.n_free:
            return vec
        raise ContractError(f"Right-hand side of length {vec.shape[0]} does not fit system of size {self.n}")

    def expand(self, reduced: NDArray[np.float64]) -> NDArray[np.float64]:
        full = np.zeros(self.n)
        full[self.free_dofs] = reduced
        return full

    def with_rhs(self, rhs: NDArray[np.float64]) -> "SparseSymmetricSystem":
        """Shallow copy sharing the matrix (and its cached reductions)."""
        other = copy.copy(self)
        other.rhs = np.asarray(rhs, dtype=float)
        return other


def _lower_from_coo(rows, cols, vals, n: int) -> sparse.csr_matrix:
    mat = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    return sparse.tril(mat, format="csr")


def _symmetric_from_coo(rows, cols, vals, n: int) -> sparse.csr_matrix:
    low = _lower_from_coo(rows, cols, vals, n)
    return (low + low.T - sparse.diags(low.diagonal())).tocsr()


def _assemble_matrix(
    domain: MultiPatchDomain,
    dof_map: GlobalDofMap,
    element_matrices: Callable[[PatchQuadrature], NDArray[np.float64]],
    quads: Sequence[PatchQuadrature],
    coefficients: Sequence[float] = (),
) -> SparseSymmetricSystem:
    rows, cols, vals, blocks = [], [], [], []
    for pq in quads:
        ke = element_matrices(pq)
        l2g = dof_map.local_to_global[pq.patch_index]
        r = np.broadcast_to(pq.idx[:, :, None], ke.shape)
        c = np.broadcast_to(pq.idx[:, None, :], ke.shape)
        n_loc = domain.patches[pq.patch_index].basis.size
        blocks.append(_symmetric_from_coo(r.ravel(), c.ravel(), ke.ravel(), n_loc))
        rows.append(l2g[r].ravel())
        cols.append(l2g[c].ravel())
        vals.append(ke.ravel())
    lower = _lower_from_coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), dof_map.n_global)
    return SparseSymmetricSystem(
        lower=lower,
        free_dofs=dof_map.free_dofs,
        patch_blocks=tuple(blocks),
        local_to_global=dof_map.local_to_global,
        patch_coefficients=tuple(coefficients),
    )


def _scatter_vector(dof_map: GlobalDofMap, quads: Sequence[PatchQuadrature], local: Sequence[NDArray]) -> NDArray:
    idx = np.concatenate([dof_map.local_to_global[pq.patch_index][pq.idx].ravel() for pq in quads])
    vals = np.concatenate([f.ravel() for f in local])
    return np.bincount(idx, weights=vals, minlength=dof_map.n_global)


def assemble_stiffness(
    domain: MultiPatchDomain,
    dof_map: GlobalDofMap,
    q: Optional[int] = None,
    quads: Optional[Sequence[PatchQuadrature]] = None,
) -> SparseSymmetricSystem:
    """Reluctivity-weighted stiffness matrix of the state problem."""
    start = time.perf_counter()
    quads = quads if quads is not None else domain_quadrature(domain, q)
    nus = [reluctivity_field(domain, p) for p in range(domain.n_patches)]

    def element(pq: PatchQuadrature):
        return nus[pq.patch_index] * np.einsum("eqak,eqbk,eq->eab", pq.grads, pq.grads, pq.dx)

    system = _assemble_matrix(domain, dof_map, element, quads, nus)
    logger.debug(
        f"Stiffness: n={system.n} free={system.n_free} nnz={system.lower.nnz} "
        f"in {time.perf_counter() - start:.3f}s"
    )
    return system


def assemble_mass(
    domain: MultiPatchDomain,
    dof_map: GlobalDofMap,
    q: Optional[int] = None,
    quads: Optional[Sequence[PatchQuadrature]] = None,
) -> SparseSymmetricSystem:
    quads = quads if quads is not None else domain_quadrature(domain, q)

    def element(pq: PatchQuadrature):
        return np.einsum("eqa,eqb,eq->eab", pq.values, pq.values, pq.dx)

    return _assemble_matrix(domain, dof_map, element, quads, [1.0] * domain.n_patches)


@dataclass(frozen=True)
class SourceSpec:
    """Current density per patch plus an optional forcing function of (x, y).

    Magnetizations come from the magnet materials of the domain.
    """

    j3: tuple[float, ...] = ()
    forcing: Optional[Forcing] = None

    def current(self, patch_index: int, points: NDArray[np.float64]) -> NDArray[np.float64]:
        j = self.j3[patch_index] if patch_index < len(self.j3) else 0.0
        out = np.full(points.shape[:-1], float(j))
        if self.forcing is not None:
            out = out + self.forcing(points[..., 0], points[..., 1])
        return out


def magnet_terms(domain: MultiPatchDomain, patch_index: int) -> tuple[float, NDArray[np.float64]]:
    """(nu_mag, M_perp) of a patch; zeros for non-magnets."""
    mat = domain.materials[patch_index]
    if mat.kind != MaterialKind.MAGNET or mat.magnetization is None:
        return 0.0, np.zeros(2)
    m1, m2 = mat.magnetization
    return mat.reluctivity, np.array([-m2, m1])


def assemble_load(
    domain: MultiPatchDomain,
    dof_map: GlobalDofMap,
    source: SourceSpec,
    q: Optional[int] = None,
    quads: Optional[Sequence[PatchQuadrature]] = None,
) -> NDArray[np.float64]:
    """rhs_i = sum over patches of the integral of J3 phi_i + nu_mag M_perp . grad phi_i."""
    quads = quads if quads is not None else domain_quadrature(domain, q)
    local = []
    for pq in quads:
        j3 = source.current(pq.patch_index, pq.points)
        fe = np.einsum("eqa,eq->ea", pq.values, j3 * pq.dx)
        nu_mag, m_perp = magnet_terms(domain, pq.patch_index)
        if nu_mag:
            fe = fe + nu_mag * np.einsum("eqak,k,eq->ea", pq.grads, m_perp, pq.dx)
        local.append(fe)
    rhs = _scatter_vector(dof_map, quads, local)
    rhs[dof_map.dirichlet_mask] = 0.0
    return rhs


def assemble_state(
    domain: MultiPatchDomain,
    dof_map: GlobalDofMap,
    source: SourceSpec,
    q: Optional[int] = None,
    extra: int = 0,
) -> SparseSymmetricSystem:
    """Stiffness matrix and load vector from one quadrature pass."""
    quads = domain_quadrature(domain, q, extra)
    system = assemble_stiffness(domain, dof_map, quads=quads)
    system.rhs = assemble_load(domain, dof_map, source, quads=quads)
    return system


@dataclass(eq=False)
class TargetFlux:
    """Desired normal flux B_d over arc length along the air gap."""

    constant: float = 0.0
    cos: tuple[float, ...] = ()
    sin: tuple[float, ...] = ()
    period: float = 1.0
    table: Optional[tuple[NDArray[np.float64], NDArray[np.float64]]] = None

    @classmethod
    def four_pole(cls, amplitude: float, length: float) -> "TargetFlux":
        return cls(cos=(0.0, float(amplitude)), period=float(length))

    @classmethod
    def tabulated(cls, s: NDArray[np.float64], values: NDArray[np.float64]) -> "TargetFlux":
        return cls(table=(np.asarray(s, dtype=float), np.asarray(values, dtype=float)))

    def __call__(self, s: NDArray[np.float64]) -> NDArray[np.float64]:
        s = np.asarray(s, dtype=float)
        if self.table is not None:
            return np.interp(s, self.table[0], self.table[1])
        out = np.full(s.shape, self.constant)
        omega = 2.0 * np.pi / self.period
        for k, a in enumerate(self.cos, start=1):
            out = out + a * np.cos(k * omega * s)
        for k, b in enumerate(self.sin, start=1):
            out = out + b * np.sin(k * omega * s)
        return out


@dataclass
class AirGapProfile:
    """Normal flux samples along the air gap at quadrature points."""

    s: NDArray[np.float64]
    points: NDArray[np.float64]
    b_n: NDArray[np.float64]
    ds: NDArray[np.float64]
    length: float


def _curve_tangential_basis(patch: Patch, c: CurveSamples):
    """Active local indices and grad(phi) . tau for every curve point."""
    pu, pv = patch.basis.degrees
    fu, du = basis_derivs_at(patch.kv_u, c.u, 1)
    fv, dv = basis_derivs_at(patch.kv_v, c.v, 1)
    if c.axis == 0:
        dphi = du[:, 0, :, None] * dv[:, 1, None, :]
    else:
        dphi = du[:, 1, :, None] * dv[:, 0, None, :]
    m = c.u.size
    idx = ((fu[:, None] + np.arange(pu + 1))[:, :, None] * patch.kv_v.n
           + (fv[:, None] + np.arange(pv + 1))[:, None, :]).reshape(m, -1)
    return idx, c.sign * dphi.reshape(m, -1) / c.speed[:, None]


def _require_curve(domain: MultiPatchDomain):
    if domain.airgap_curve is None:
        raise ConfigurationError("Domain has no air-gap curve")
    return domain.airgap_curve


def _curve_order(domain: MultiPatchDomain, q: Optional[int]) -> int:
    return q or max(default_order(domain.patches[s.patch]) for s in _require_curve(domain).segments)


def _check_coeffs(dof_map: GlobalDofMap, coeffs: NDArray[np.float64]) -> NDArray[np.float64]:
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (dof_map.n_global,):
        raise ContractError(f"Coefficient vector has shape {coeffs.shape}, expected ({dof_map.n_global},)")
    return coeffs


def airgap_profile(
    domain: MultiPatchDomain,
    dof_map: GlobalDofMap,
    coeffs: NDArray[np.float64],
    q: Optional[int] = None,
) -> AirGapProfile:
    curve = _require_curve(domain)
    coeffs = _check_coeffs(dof_map, coeffs)
    samples = curve.sample(domain.patches, _curve_order(domain, q))
    b_n = []
    for c in samples:
        idx, tau_grad = _curve_tangential_basis(domain.patches[c.patch], c)
        b_n.append(np.einsum("mf,mf->m", coeffs[dof_map.local_to_global[c.patch][idx]], tau_grad))
    ds = np.concatenate([c.ds for c in samples])
    return AirGapProfile(
        s=np.concatenate([c.s for c in samples]),
        points=np.vstack([c.points for c in samples]),
        b_n=np.concatenate(b_n),
        ds=ds,
        length=float(ds.sum()),
    )


def assemble_airgap_terms(
    domain: MultiPatchDomain,
    dof_map: GlobalDofMap,
    target: TargetFlux,
    coeffs: NDArray[np.float64],
    q: Optional[int] = None,
) -> tuple[float, NDArray[np.float64]]:
    """Tracking objective along the air gap and the adjoint right-hand side.

    Returns:
        (J, rhs) with J the integral of (grad u . tau - B_d)^2 and
        rhs_i = -2 * integral of (grad u . tau - B_d)(grad phi_i . tau)
    """
    curve = _require_curve(domain)
    coeffs = _check_coeffs(dof_map, coeffs)
    samples = curve.sample(domain.patches, _curve_order(domain, q))
    objective = 0.0
    idx_all, val_all = [], []
    for c in samples:
        l2g = dof_map.local_to_global[c.patch]
        idx, tau_grad = _curve_tangential_basis(domain.patches[c.patch], c)
        gidx = l2g[idx]
        mismatch = np.einsum("mf,mf->m", coeffs[gidx], tau_grad) - target(c.s)
        objective += float(np.sum(c.ds * mismatch ** 2))
        idx_all.append(gidx.ravel())
        val_all.append((-2.0 * c.ds * mismatch)[:, None] * tau_grad)
    rhs = np.bincount(
        np.concatenate(idx_all),
        weights=np.concatenate([v.ravel() for v in val_all]),
        minlength=dof_map.n_global,
    )
    rhs[dof_map.dirichlet_mask] = 0.0
    return objective, rhs


def calibrate_target(profile: AirGapProfile) -> TargetFlux:
    """Four-pole cosine B_d whose amplitude matches the mean flux magnitude of a profile."""
    basis = np.cos(2.0 * (2.0 * np.pi * profile.s / profile.length))
    projection = float(np.sum(profile.ds * profile.b_n * basis))
    mean_abs = float(np.sum(profile.ds * np.abs(profile.b_n)) / profile.length)
    sign = 1.0 if projection >= 0 else -1.0
    amplitude = sign * 0.5 * np.pi * mean_abs
    logger.info(f"Calibrated four-pole target: amplitude={amplitude:.4e} T over |Gamma|={profile.length:.4e} m")
    return TargetFlux.four_pole(amplitude, profile.length)


def resolve_alpha(domain: MultiPatchDomain, alpha: AlphaSpec) -> NDArray[np.float64]:
    """Per-patch alpha; the default is the squared bounding-box diameter of each patch."""
    if alpha is None:
        values = np.array([p.diameter ** 2 for p in domain.patches])
    elif np.isscalar(alpha):
        values = np.full(domain.n_patches, float(alpha))  # type: ignore[arg-type]
    else:
        values = np.asarray(alpha, dtype=float)
        if values.shape != (domain.n_patches,):
            raise ContractError(f"Expected {domain.n_patches} alpha values, got {values.shape}")
    if np.any(values <= 0):
        raise ConfigurationError("Auxiliary form weights alpha must be positive on every patch")
    return values


def assemble_auxiliary_scalar(
    domain: MultiPatchDomain,
    dof_map: GlobalDofMap,
    alpha: AlphaSpec = None,
    q: Optional[int] = None,
    quads: Optional[Sequence[PatchQuadrature]] = None,
) -> SparseSymmetricSystem:
    """One component block of the auxiliary form: mass plus alpha-weighted stiffness."""
    alphas = resolve_alpha(domain, alpha)
    quads = quads if quads is not None else domain_quadrature(domain, q)

    def element(pq: PatchQuadrature):
        mass = np.einsum("eqa,eqb,eq->eab", pq.values, pq.values, pq.dx)
        stiff = np.einsum("eqak,eqbk,eq->eab", pq.grads, pq.grads, pq.dx)
        return mass + alphas[pq.patch_index] * stiff

    return _assemble_matrix(domain, dof_map, element, quads, alphas)


def assemble_auxiliary_form(
    domain: MultiPatchDomain,
    dof_map_vector: VectorDofMap,
    alpha: AlphaSpec = None,
    q: Optional[int] = None,
) -> SparseSymmetricSystem:
    """Block-diagonal vector-valued form, one scalar block per component."""
    scalar = assemble_auxiliary_scalar(domain, dof_map_vector.scalar, alpha, q)
    lower = sparse.block_diag([scalar.lower, scalar.lower], format="csr")
    return SparseSymmetricSystem(lower=lower, free_dofs=dof_map_vector.free_dofs)


def assemble_shape_derivative(
    domain: MultiPatchDomain,
    dof_map_vector: VectorDofMap,
    u: NDArray[np.float64],
    p: NDArray[np.float64],
    source: SourceSpec,
    q: Optional[int] = None,
    quads: Optional[Sequence[PatchQuadrature]] = None,
) -> NDArray[np.float64]:
    """dJ_{c,i} = integral of S : grad(N_i e_c) with the tensor

        S = (nu grad u . grad p - nu_mag grad p . M_perp - J3 p) I
            + nu_mag grad p (x) M_perp - nu grad p (x) grad u - nu grad u (x) grad p

    A forcing function is treated as transported with the material.
    """
    scalar_map = dof_map_vector.scalar
    n = scalar_map.n_global
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    if u.shape != (n,) or p.shape != (n,):
        raise ContractError(f"State and adjoint must have length {n}, got {u.shape} and {p.shape}")

    quads = quads if quads is not None else domain_quadrature(domain, q)
    eye = np.eye(2)
    idx_all, val_all = [], []
    for pq in quads:
        l2g = scalar_map.local_to_global[pq.patch_index]
        gidx = l2g[pq.idx]
        nu = reluctivity_field(domain, pq.patch_index)
        nu_mag, m_perp = magnet_terms(domain, pq.patch_index)
        gu = np.einsum("eqfk,ef->eqk", pq.grads, u[gidx])
        gp = np.einsum("eqfk,ef->eqk", pq.grads, p[gidx])
        pval = np.einsum("eqf,ef->eq", pq.values, p[gidx])
        j3 = source.current(pq.patch_index, pq.points)

        trace = nu * np.einsum("eqk,eqk->eq", gu, gp) - nu_mag * gp @ m_perp - j3 * pval
        S = trace[..., None, None] * eye
        S = S + nu_mag * gp[..., :, None] * m_perp[None, None, None, :]
        S = S - nu * gp[..., :, None] * gu[..., None, :] - nu * gu[..., :, None] * gp[..., None, :]

        contrib = np.einsum("eqcb,eqfb,eq->efc", S, pq.grads, pq.dx)
        for comp in (0, 1):
            idx_all.append(comp * n + gidx.ravel())
            val_all.append(contrib[..., comp].ravel())
    return np.bincount(np.concatenate(idx_all), weights=np.concatenate(val_all), minlength=2 * n)


def l2_error(
    domain: MultiPatchDomain,
    dof_map: GlobalDofMap,
    coeffs: NDArray[np.float64],
    exact: Forcing,
    q: Optional[int] = None,
) -> float:
    coeffs = _check_coeffs(dof_map, coeffs)
    total = 0.0
    for pq in domain_quadrature(domain, q, extra=2):
        uh = np.einsum("eqf,ef->eq", pq.values, coeffs[dof_map.local_to_global[pq.patch_index][pq.idx]])
        err = uh - exact(pq.points[..., 0], pq.points[..., 1])
        total += float(np.sum(err ** 2 * pq.dx))
    return float(np.sqrt(total))


@dataclass
class PatchField:
    """Potential and flux magnitude sampled on a parametric grid of one patch."""

    points: NDArray[np.float64]
    u: NDArray[np.float64]
    b_abs: NDArray[np.float64]
    shape: tuple[int, int] = field(default=(0, 0))


def sample_patch_field(
    domain: MultiPatchDomain,
    dof_map: GlobalDofMap,
    coeffs: NDArray[np.float64],
    patch_index: int,
    n_samples: int = 10,
) -> PatchField:
    """u and |B| = |grad u| on an n x n grid of one patch."""
    coeffs = _check_coeffs(dof_map, coeffs)
    patch = domain.patches[patch_index]
    t = np.linspace(0.0, 1.0, n_samples)
    uu, vv = np.meshgrid(t, t, indexing="ij")
    us, vs = uu.ravel(), vv.ravel()
    points, jac = patch.evaluate(us, vs)
    pu, pv = patch.basis.degrees
    fu, du = basis_derivs_at(patch.kv_u, us, 1)
    fv, dv = basis_derivs_at(patch.kv_v, vs, 1)
    m = us.size
    idx = ((fu[:, None] + np.arange(pu + 1))[:, :, None] * patch.kv_v.n
           + (fv[:, None] + np.arange(pv + 1))[:, None, :]).reshape(m, -1)
    local = coeffs[dof_map.local_to_global[patch_index][idx]]
    val = np.einsum("ma,mb->mab", du[:, 0], dv[:, 0]).reshape(m, -1)
    d_u = np.einsum("ma,mb->mab", du[:, 1], dv[:, 0]).reshape(m, -1)
    d_v = np.einsum("ma,mb->mab", du[:, 0], dv[:, 1]).reshape(m, -1)
    grad_param = np.stack([np.einsum("mf,mf->m", d_u, local), np.einsum("mf,mf->m", d_v, local)], axis=1)
    # grad u = J^{-T} grad_param
    grad = np.linalg.solve(np.transpose(jac, (0, 2, 1)), grad_param[..., None])[..., 0]
    return PatchField(
        points=points,
        u=np.einsum("mf,mf->m", val, local),
        b_abs=np.linalg.norm(grad, axis=1),
        shape=(n_samples, n_samples),
    )
