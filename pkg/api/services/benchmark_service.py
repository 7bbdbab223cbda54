"""
Benchmark Service - Parameterized test geometries.

``motor_like`` is an annular rotor/stator cross section: rotor iron, a magnet
ring with four radially magnetized pockets, a design ring, a thin air layer, the
air gap ring carrying the curve on its middle knot line, and the stator iron.
``square_grid`` is an n x n array of unit patches used by solver and
convergence tests.
"""

from typing import Callable

import numpy as np
from numpy.typing import NDArray

from api.config.logging import get_logger
from api.models.schemas import GeometryFile
from api.services.errors import ContractError
from api.services.geometry_io import domain_to_geometry
from api.services.multipatch_topology import (
    MAGNETIZATION,
    AirGapCurve,
    AirGapSegment,
    MaterialKind,
    MaterialTag,
    MultiPatchDomain,
    build_topology,
)
from api.services.spline_geometry import KnotVector, Patch, insert_knots, refine_uniform

logger = get_logger("service.benchmark")

KINDS = ("motor_like", "square_grid")

SECTORS = 12
MOTOR_DEGREE = 3
# (inner radius, outer radius, radial spans) from the shaft outwards
MOTOR_RINGS = (
    (0.010, 0.020, 4),
    (0.020, 0.026, 2),
    (0.026, 0.036, 4),
    (0.036, 0.038, 2),
    (0.038, 0.042, 4),
    (0.042, 0.060, 6),
)
MAGNET_RING = 1
DESIGN_RING = 2
AIRGAP_RING = 4
# 5 * 12 radial + 6 * 12 angular neighbours
MOTOR_INTERFACE_COUNT = 132
ANGULAR_KNOTS = (0.25, 0.5, 0.75)


def sector_angle(k: int) -> float:
    """Centre angle of sector k in radians."""
    return np.deg2rad(30.0 * k)


def _edge_directions() -> NDArray[np.float64]:
    """Unit vectors of the 12 radial sector edges, edge k at 30k - 15 degrees."""
    angles = np.deg2rad(30.0 * np.arange(SECTORS) - 15.0)
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _unit_arc(start: NDArray[np.float64], end: NDArray[np.float64]) -> tuple[KnotVector, NDArray[np.float64]]:
    """Cubic approximation of the unit arc between two edge directions, refined to 4 spans."""
    h = 4.0 / 3.0 * np.tan(np.deg2rad(30.0) / 4.0)
    t_start = np.array([-start[1], start[0]])
    t_end = np.array([-end[1], end[0]])
    bezier = np.stack([start, start + h * t_start, end - h * t_end, end])
    kv, T = insert_knots(KnotVector.uniform(MOTOR_DEGREE, 1), ANGULAR_KNOTS)
    arc = T @ bezier
    # endpoints survive insertion exactly; pin them anyway
    arc[0], arc[-1] = start, end
    return kv, arc


def _ring_radii(r_in: float, r_out: float, spans: int) -> tuple[KnotVector, NDArray[np.float64]]:
    kv = KnotVector.uniform(MOTOR_DEGREE, spans)
    radii = r_in + (r_out - r_in) * kv.greville
    radii[0], radii[-1] = r_in, r_out
    return kv, radii


def _motor_material(ring: int, k: int) -> MaterialTag:
    if ring in (0, len(MOTOR_RINGS) - 1):
        return MaterialTag.iron()
    if ring == MAGNET_RING and k % 3 == 0:
        sign = -1.0 if (k // 3) % 2 else 1.0
        theta = sector_angle(k)
        return MaterialTag.magnet((sign * MAGNETIZATION * np.cos(theta), sign * MAGNETIZATION * np.sin(theta)))
    if ring == DESIGN_RING and k % 3 == 0:
        return MaterialTag.iron()
    if ring == AIRGAP_RING:
        return MaterialTag.air_gap()
    return MaterialTag.air()


def motor_like(level: int = 0) -> MultiPatchDomain:
    """Annular motor analogue with 72 degree-3 patches.

    Patch index is ``ring * 12 + sector``; u runs outwards, v counterclockwise.

    Args:
        level: Number of uniform bisections applied to every patch

    Returns:
        Domain with Dirichlet data on the shaft and the stator back, design
        patches in the iron pockets of the design ring, and the air-gap curve
    """
    if level < 0:
        raise ContractError(f"Refinement level must be non-negative, got {level}")
    edges = _edge_directions()
    arcs = [_unit_arc(edges[k], edges[(k + 1) % SECTORS]) for k in range(SECTORS)]

    patches, materials = [], []
    for ring, (r_in, r_out, spans) in enumerate(MOTOR_RINGS):
        kv_u, radii = _ring_radii(r_in, r_out, spans)
        for k in range(SECTORS):
            kv_v, arc = arcs[k]
            net = radii[:, None, None] * arc[None, :, :]
            patches.append(refine_uniform(Patch.from_net(kv_u, kv_v, net), level))
            materials.append(_motor_material(ring, k))

    last = len(MOTOR_RINGS) - 1
    dirichlet = [(k, 0) for k in range(SECTORS)] + [(last * SECTORS + k, 1) for k in range(SECTORS)]
    design = [DESIGN_RING * SECTORS + k for k in range(SECTORS) if k % 3 == 0]
    curve = AirGapCurve(tuple(
        AirGapSegment(patch=AIRGAP_RING * SECTORS + k, axis=0, iso=0.5, start=0.0, end=1.0)
        for k in range(SECTORS)
    ))
    domain = build_topology(patches, materials, dirichlet, design, curve)
    logger.info(f"Generated motor_like level {level}: {domain.n_patches} patches, {len(domain.interfaces)} interfaces")
    return domain


def square_grid(n: int = 2, level: int = 0, degree: int = 1, size: float = 1.0) -> MultiPatchDomain:
    """n x n square patches on [0, size]^2 with homogeneous Dirichlet data on the outer boundary.

    Patch (i, j) has index ``i * n + j`` with i counting along x.
    """
    if n < 1 or level < 0 or degree < 1:
        raise ContractError(f"Invalid square_grid parameters n={n}, level={level}, degree={degree}")
    h = size / n
    kv = KnotVector.uniform(degree, 2 ** level)
    g = kv.greville
    patches, dirichlet = [], []
    for i in range(n):
        for j in range(n):
            xs = (i + g) * h
            ys = (j + g) * h
            net = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
            patches.append(Patch.from_net(kv, kv, net))
            index = i * n + j
            if i == 0:
                dirichlet.append((index, 0))
            if i == n - 1:
                dirichlet.append((index, 1))
            if j == 0:
                dirichlet.append((index, 2))
            if j == n - 1:
                dirichlet.append((index, 3))
    materials = [MaterialTag(MaterialKind.AIR, 1.0)] * len(patches)
    return build_topology(patches, materials, dirichlet)


def manufactured_solution(x: NDArray[np.float64], y: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def manufactured_forcing(x: NDArray[np.float64], y: NDArray[np.float64]) -> NDArray[np.float64]:
    """-Laplace of sin(pi x) sin(pi y) with unit reluctivity."""
    return 2.0 * np.pi ** 2 * np.sin(np.pi * x) * np.sin(np.pi * y)


BUILDERS: dict[str, Callable[..., MultiPatchDomain]] = {
    "motor_like": lambda level, n, degree: motor_like(level),
    "square_grid": lambda level, n, degree: square_grid(n, level, degree),
}


def build_benchmark(kind: str, level: int = 0, n: int = 2, degree: int = 1) -> MultiPatchDomain:
    if kind not in BUILDERS:
        raise ContractError(f"Unknown benchmark kind '{kind}'. Allowed: {', '.join(KINDS)}")
    return BUILDERS[kind](level, n, degree)


def generate_benchmark(kind: str, level: int = 0, n: int = 2, degree: int = 1) -> GeometryFile:
    """Benchmark geometry as a GeometryFile document."""
    return domain_to_geometry(build_benchmark(kind, level, n, degree))
