"""
Multipatch Topology - interfaces, global dof numbering, materials and the air-gap curve.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from api.config.logging import get_logger
from api.services.errors import (
    ConfigurationError,
    ConformityError,
    ContractError,
    TopologyError,
)
from api.services.spline_geometry import SIDES, KnotVector, Patch

logger = get_logger("service.topology")

NU_0 = 1.0 / (4.0 * np.pi * 1e-7)
NU_IRON = NU_0 / 5100.0
NU_MAGNET = NU_0 / 1.05
MAGNETIZATION = 1e5

MATCH_TOL = 1e-10


class MaterialKind(str, Enum):
    FERROMAGNETIC = "Ferromagnetic"
    AIR = "Air"
    MAGNET = "Magnet"
    AIR_GAP = "AirGap"


@dataclass(frozen=True)
class MaterialTag:
    kind: MaterialKind
    reluctivity: float
    magnetization: Optional[tuple[float, float]] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", MaterialKind(self.kind))
        if not self.reluctivity > 0:
            raise ConfigurationError(f"Reluctivity must be positive, got {self.reluctivity}")
        if (self.kind == MaterialKind.MAGNET) != (self.magnetization is not None):
            raise ConfigurationError("Magnetization is required for magnets and forbidden otherwise")
        if self.magnetization is not None:
            m = tuple(float(c) for c in self.magnetization)
            if len(m) != 2:
                raise ConfigurationError("Magnetization must be a 2D vector")
            object.__setattr__(self, "magnetization", m)

    @classmethod
    def air(cls) -> "MaterialTag":
        return cls(MaterialKind.AIR, NU_0)

    @classmethod
    def air_gap(cls) -> "MaterialTag":
        return cls(MaterialKind.AIR_GAP, NU_0)

    @classmethod
    def iron(cls, relative_permeability: float = 5100.0) -> "MaterialTag":
        return cls(MaterialKind.FERROMAGNETIC, NU_0 / relative_permeability)

    @classmethod
    def magnet(cls, magnetization: Sequence[float]) -> "MaterialTag":
        return cls(MaterialKind.MAGNET, NU_MAGNET, (magnetization[0], magnetization[1]))

    @property
    def is_air(self) -> bool:
        return self.kind in (MaterialKind.AIR, MaterialKind.AIR_GAP)


@dataclass(frozen=True)
class Interface:
    patch_a: int
    side_a: int
    patch_b: int
    side_b: int
    orientation_flip: bool

    def key(self) -> frozenset:
        return frozenset({(self.patch_a, self.side_a), (self.patch_b, self.side_b)})


@dataclass(frozen=True)
class AirGapSegment:
    """Piece of an iso-line of one patch.

    ``axis == 0`` is the line u = iso with v running from ``start`` to ``end``;
    ``axis == 1`` is the line v = iso with u running.
    """

    patch: int
    axis: int
    iso: float
    start: float
    end: float

    @property
    def sign(self) -> float:
        return 1.0 if self.end >= self.start else -1.0

    def running_knots(self, patch: Patch) -> KnotVector:
        return patch.kv_v if self.axis == 0 else patch.kv_u

    def iso_knots(self, patch: Patch) -> KnotVector:
        return patch.kv_u if self.axis == 0 else patch.kv_v

    def params(self, t: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        iso = np.full_like(t, self.iso)
        return (iso, t) if self.axis == 0 else (t, iso)


@dataclass
class CurveSamples:
    """Quadrature points of one segment, ordered along the traversal direction."""

    segment: int
    patch: int
    axis: int
    sign: float
    u: NDArray[np.float64]
    v: NDArray[np.float64]
    dt: NDArray[np.float64]
    points: NDArray[np.float64]
    speed: NDArray[np.float64]
    tangent: NDArray[np.float64]
    s: NDArray[np.float64]

    @property
    def ds(self) -> NDArray[np.float64]:
        return self.dt * self.speed


def _curve_speed(patch: Patch, seg: AirGapSegment, t: NDArray[np.float64]):
    u, v = seg.params(t)
    points, jac = patch.evaluate(u, v)
    deriv = jac[:, :, 1] if seg.axis == 0 else jac[:, :, 0]
    return points, deriv, np.linalg.norm(deriv, axis=1)


def _partial_lengths(patch: Patch, seg: AirGapSegment, lo, hi, nodes, weights):
    """Arc length of the segment between parameters lo[k] and hi[k]."""
    x = 0.5 * (hi - lo)[:, None] * (nodes[None, :] + 1.0) + lo[:, None]
    _, _, speed = _curve_speed(patch, seg, x.ravel())
    return (0.5 * (hi - lo)[:, None] * weights[None, :] * speed.reshape(x.shape)).sum(axis=1)


@dataclass(frozen=True)
class AirGapCurve:
    """Air-gap midline, oriented counterclockwise."""

    segments: tuple[AirGapSegment, ...]

    def validate(self, patches: Sequence[Patch], tol: float = 1e-8) -> None:
        if not self.segments:
            raise ConfigurationError("Air-gap curve has no segments")
        previous_end = None
        for k, seg in enumerate(self.segments):
            if not 0 <= seg.patch < len(patches):
                raise ConfigurationError(f"Air-gap segment {k} refers to unknown patch {seg.patch}")
            if seg.axis not in (0, 1):
                raise ConfigurationError(f"Air-gap segment {k} has invalid axis {seg.axis}")
            patch = patches[seg.patch]
            bp = seg.iso_knots(patch).breakpoints
            if np.min(np.abs(bp - seg.iso)) > 1e-12:
                raise ConfigurationError(
                    f"Air-gap segment {k} at iso value {seg.iso} does not lie on a knot line of patch {seg.patch}"
                )
            for t in (seg.start, seg.end):
                if not 0.0 <= t <= 1.0:
                    raise ConfigurationError(f"Air-gap segment {k} range leaves the parametric domain")
            if seg.start == seg.end:
                raise ConfigurationError(f"Air-gap segment {k} is empty")
            start_pt, _, _ = _curve_speed(patch, seg, np.array([seg.start]))
            end_pt, _, _ = _curve_speed(patch, seg, np.array([seg.end]))
            scale = max(patch.diameter, 1.0e-30)
            if previous_end is not None and np.linalg.norm(start_pt[0] - previous_end) > tol * scale:
                raise ConfigurationError(f"Air-gap segment {k} does not continue segment {k - 1}")
            previous_end = end_pt[0]

    def sample(self, patches: Sequence[Patch], n_per_span: int) -> list[CurveSamples]:
        nodes, weights = np.polynomial.legendre.leggauss(n_per_span)
        out: list[CurveSamples] = []
        s_offset = 0.0
        for k, seg in enumerate(self.segments):
            patch = patches[seg.patch]
            lo, hi = sorted((seg.start, seg.end))
            bp = seg.running_knots(patch).breakpoints
            cuts = np.unique(np.concatenate([[lo, hi], bp[(bp > lo) & (bp < hi)]]))
            a, b = cuts[:-1], cuts[1:]
            t = (0.5 * (b - a)[:, None] * (nodes[None, :] + 1.0) + a[:, None]).ravel()
            dt = (0.5 * (b - a)[:, None] * weights[None, :]).ravel()
            span_a = np.repeat(a, n_per_span)
            span_b = np.repeat(b, n_per_span)
            if seg.sign < 0:
                t, dt, span_a, span_b = t[::-1], dt[::-1], span_a[::-1], span_b[::-1]

            points, deriv, speed = _curve_speed(patch, seg, t)
            span_len = _partial_lengths(patch, seg, a, b, nodes, weights)
            if seg.sign > 0:
                before = np.concatenate([[0.0], np.cumsum(span_len)[:-1]])
                span_idx = np.searchsorted(a, span_a)
                partial = _partial_lengths(patch, seg, span_a, t, nodes, weights)
            else:
                rev = span_len[::-1]
                before_rev = np.concatenate([[0.0], np.cumsum(rev)[:-1]])
                before = before_rev[::-1]
                span_idx = np.searchsorted(a, span_a)
                partial = _partial_lengths(patch, seg, t, span_b, nodes, weights)
            s = s_offset + before[span_idx] + partial

            u, v = seg.params(t)
            out.append(
                CurveSamples(
                    segment=k,
                    patch=seg.patch,
                    axis=seg.axis,
                    sign=seg.sign,
                    u=u,
                    v=v,
                    dt=dt,
                    points=points,
                    speed=speed,
                    tangent=seg.sign * deriv / speed[:, None],
                    s=s,
                )
            )
            s_offset += float(span_len.sum())
        return out

    def length(self, patches: Sequence[Patch], n_per_span: int = 6) -> float:
        return float(sum(c.ds.sum() for c in self.sample(patches, n_per_span)))


@dataclass(frozen=True, eq=False)
class MultiPatchDomain:
    patches: tuple[Patch, ...]
    materials: tuple[MaterialTag, ...]
    interfaces: tuple[Interface, ...]
    dirichlet_sides: tuple[tuple[int, int], ...]
    design_patches: frozenset[int] = field(default_factory=frozenset)
    airgap_curve: Optional[AirGapCurve] = None

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    def with_patches(self, patches: Sequence[Patch]) -> "MultiPatchDomain":
        """Same topology with moved control points."""
        if len(patches) != self.n_patches:
            raise ContractError("Patch count must not change")
        return replace(self, patches=tuple(patches))

    def side_kind(self, patch: int, side: int) -> str:
        if (patch, side) in self.dirichlet_sides:
            return "dirichlet"
        for itf in self.interfaces:
            if (itf.patch_a, itf.side_a) == (patch, side) or (itf.patch_b, itf.side_b) == (patch, side):
                return "interface"
        return "free"

    def bounding_box(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        pts = np.vstack([p.control_points for p in self.patches])
        return pts.min(axis=0), pts.max(axis=0)


def _side_match(pa: NDArray, pb: NDArray, tol: float) -> tuple[Optional[bool], int]:
    """Full-match orientation (None if no full match) and the coincident point count."""
    if pa.shape == pb.shape:
        if np.max(np.abs(pa - pb)) <= tol:
            return False, pa.shape[0]
        if np.max(np.abs(pa - pb[::-1])) <= tol:
            return True, pa.shape[0]
    dist = np.max(np.abs(pa[:, None, :] - pb[None, :, :]), axis=2)
    return None, int(np.count_nonzero(dist.min(axis=1) <= tol))


def find_interfaces(patches: Sequence[Patch], tol: float = MATCH_TOL) -> list[Interface]:
    """All coincident side pairs, by comparing side control points."""
    sides = []
    for i, patch in enumerate(patches):
        for s in SIDES:
            pts = patch.control_points[patch.side_indices(s)]
            sides.append((i, s, pts, pts.min(axis=0) - tol, pts.max(axis=0) + tol))

    found = []
    for k, (ia, sa, pa, lo_a, hi_a) in enumerate(sides):
        for ib, sb, pb, lo_b, hi_b in sides[k + 1:]:
            if ib == ia:
                continue
            if np.any(hi_a < lo_b) or np.any(hi_b < lo_a):
                continue
            flip, count = _side_match(pa, pb, tol)
            if flip is not None:
                found.append(Interface(ia, sa, ib, sb, flip))
            elif count >= 2:
                raise TopologyError(
                    f"Sides ({ia}, {sa}) and ({ib}, {sb}) share {count} control points but do not match"
                )
    return found


def build_topology(
    patches: Sequence[Patch],
    materials: Sequence[MaterialTag],
    dirichlet_spec: Iterable[tuple[int, int]],
    design_patches: Iterable[int] = (),
    airgap_curve: Optional[AirGapCurve] = None,
    tol: float = MATCH_TOL,
) -> MultiPatchDomain:
    """Detect interfaces and tag sides, materials and the design region.

    Raises:
        TopologyError: partially matching sides, or a Dirichlet side that is also an interface
        ConfigurationError: invalid air-gap curve
    """
    patches = tuple(patches)
    materials = tuple(materials)
    if len(materials) != len(patches):
        raise ContractError(f"{len(patches)} patches but {len(materials)} materials")

    interfaces = find_interfaces(patches, tol)
    interface_sides = {side for itf in interfaces for side in itf.key()}
    if len(interface_sides) != 2 * len(interfaces):
        raise TopologyError("A patch side matches more than one other side")

    dirichlet = []
    for patch, side in dirichlet_spec:
        patch, side = int(patch), int(side)
        if not 0 <= patch < len(patches) or side not in SIDES:
            raise TopologyError(f"Dirichlet side ({patch}, {side}) does not exist")
        if (patch, side) in interface_sides:
            raise TopologyError(f"Dirichlet side ({patch}, {side}) is an interface")
        if (patch, side) not in dirichlet:
            dirichlet.append((patch, side))

    design = frozenset(int(d) for d in design_patches)
    if any(not 0 <= d < len(patches) for d in design):
        raise ContractError(f"Design patches {sorted(design)} out of range")

    if airgap_curve is not None:
        airgap_curve.validate(patches)

    logger.debug(f"Topology: {len(patches)} patches, {len(interfaces)} interfaces, {len(dirichlet)} Dirichlet sides")
    return MultiPatchDomain(
        patches=patches,
        materials=materials,
        interfaces=tuple(interfaces),
        dirichlet_sides=tuple(dirichlet),
        design_patches=design,
        airgap_curve=airgap_curve,
    )


@dataclass(frozen=True, eq=False)
class GlobalDofMap:
    local_to_global: tuple[NDArray[np.intp], ...]
    n_global: int
    dirichlet_mask: NDArray[np.bool_]

    @cached_property
    def free_dofs(self) -> NDArray[np.intp]:
        return np.flatnonzero(~self.dirichlet_mask)

    @property
    def n_free(self) -> int:
        return int(self.free_dofs.size)

    @cached_property
    def reduced_index(self) -> NDArray[np.intp]:
        """Position of each global dof in the reduced space, -1 for Dirichlet dofs."""
        idx = np.full(self.n_global, -1, dtype=np.intp)
        idx[self.free_dofs] = np.arange(self.n_free)
        return idx

    @cached_property
    def multiplicity(self) -> NDArray[np.intp]:
        """Number of patches sharing each global dof."""
        counts = np.zeros(self.n_global, dtype=np.intp)
        for l2g in self.local_to_global:
            counts[np.unique(l2g)] += 1
        return counts

    def restrict(self, vec: NDArray[np.float64]) -> NDArray[np.float64]:
        vec = np.asarray(vec)
        if vec.shape[0] != self.n_global:
            raise ContractError(f"Expected global vector of length {self.n_global}, got {vec.shape[0]}")
        return vec[self.free_dofs]

    def expand(self, reduced: NDArray[np.float64]) -> NDArray[np.float64]:
        reduced = np.asarray(reduced)
        if reduced.shape[0] != self.n_free:
            raise ContractError(f"Expected reduced vector of length {self.n_free}, got {reduced.shape[0]}")
        full = np.zeros((self.n_global,) + reduced.shape[1:], dtype=reduced.dtype)
        full[self.free_dofs] = reduced
        return full

    def patch_values(self, vec: NDArray[np.float64], patch: int) -> NDArray[np.float64]:
        return np.asarray(vec)[self.local_to_global[patch]]

    def vector(self) -> "VectorDofMap":
        return VectorDofMap(self)


@dataclass(frozen=True, eq=False)
class VectorDofMap:
    """Two scalar copies of a dof map; component c of global dof g is c * n_scalar + g."""

    scalar: GlobalDofMap

    @property
    def n_global(self) -> int:
        return 2 * self.scalar.n_global

    @cached_property
    def dirichlet_mask(self) -> NDArray[np.bool_]:
        return np.concatenate([self.scalar.dirichlet_mask, self.scalar.dirichlet_mask])

    @cached_property
    def free_dofs(self) -> NDArray[np.intp]:
        return np.flatnonzero(~self.dirichlet_mask)

    @property
    def n_free(self) -> int:
        return int(self.free_dofs.size)

    def restrict(self, vec: NDArray[np.float64]) -> NDArray[np.float64]:
        vec = np.asarray(vec)
        if vec.shape[0] != self.n_global:
            raise ContractError(f"Expected vector field of length {self.n_global}, got {vec.shape[0]}")
        return vec[self.free_dofs]

    def expand(self, reduced: NDArray[np.float64]) -> NDArray[np.float64]:
        reduced = np.asarray(reduced)
        if reduced.shape[0] != self.n_free:
            raise ContractError(f"Expected reduced field of length {self.n_free}, got {reduced.shape[0]}")
        full = np.zeros(self.n_global, dtype=reduced.dtype)
        full[self.free_dofs] = reduced
        return full

    def split(self, vec: NDArray[np.float64]) -> NDArray[np.float64]:
        """Global field as an (n_scalar, 2) array."""
        n = self.scalar.n_global
        vec = np.asarray(vec)
        if vec.shape[0] != 2 * n:
            raise ContractError(f"Expected vector field of length {2 * n}, got {vec.shape[0]}")
        return np.stack([vec[:n], vec[n:]], axis=1)

    def join(self, field_2d: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.concatenate([field_2d[:, 0], field_2d[:, 1]])


def build_dof_map(domain: MultiPatchDomain) -> GlobalDofMap:
    """Continuous-Galerkin numbering: matched interface functions share a global index.

    Raises:
        ConformityError: knot vectors along an interface differ
    """
    sizes = [p.basis.size for p in domain.patches]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rows, cols = [], []
    for itf in domain.interfaces:
        pa, pb = domain.patches[itf.patch_a], domain.patches[itf.patch_b]
        kv_a, kv_b = pa.side_knots(itf.side_a), pb.side_knots(itf.side_b)
        if not kv_a.matches(kv_b, reverse=itf.orientation_flip):
            raise ConformityError(
                f"Interface ({itf.patch_a}, {itf.side_a})-({itf.patch_b}, {itf.side_b}) has non-matching knot vectors"
            )
        idx_a = pa.side_indices(itf.side_a) + offsets[itf.patch_a]
        idx_b = pb.side_indices(itf.side_b) + offsets[itf.patch_b]
        if itf.orientation_flip:
            idx_b = idx_b[::-1]
        rows.append(idx_a)
        cols.append(idx_b)

    n_local = int(offsets[-1])
    if rows:
        r, c = np.concatenate(rows), np.concatenate(cols)
    else:
        r = c = np.zeros(0, dtype=np.intp)
    graph = sparse.coo_matrix((np.ones(r.size), (r, c)), shape=(n_local, n_local)).tocsr()
    _, labels = connected_components(graph, directed=False)

    # number classes in order of first appearance
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    relabel = np.empty_like(order)
    relabel[order] = np.arange(order.size)
    global_ids = relabel[labels]

    l2g = tuple(global_ids[offsets[i]:offsets[i + 1]].astype(np.intp) for i in range(domain.n_patches))
    n_global = int(order.size)
    mask = np.zeros(n_global, dtype=bool)
    for patch, side in domain.dirichlet_sides:
        mask[l2g[patch][domain.patches[patch].side_indices(side)]] = True

    logger.debug(f"Dof map: {n_global} global dofs, {int(mask.sum())} Dirichlet")
    return GlobalDofMap(local_to_global=l2g, n_global=n_global, dirichlet_mask=mask)


def reluctivity_field(domain: MultiPatchDomain, patch_index: int) -> float:
    return domain.materials[patch_index].reluctivity


def patch_adjacency(domain: MultiPatchDomain) -> sparse.csr_matrix:
    """Symmetric patch graph with an edge per interface."""
    n = domain.n_patches
    a = [itf.patch_a for itf in domain.interfaces]
    b = [itf.patch_b for itf in domain.interfaces]
    graph = sparse.coo_matrix((np.ones(len(a)), (a, b)), shape=(n, n)).tocsr()
    graph = ((graph + graph.T) > 0).astype(float)
    return graph.tocsr()


def neighbors(domain: MultiPatchDomain, patch: int) -> set[int]:
    out = set()
    for itf in domain.interfaces:
        if itf.patch_a == patch:
            out.add(itf.patch_b)
        elif itf.patch_b == patch:
            out.add(itf.patch_a)
    return out
