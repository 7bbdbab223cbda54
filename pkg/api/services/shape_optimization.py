"""
Shape Optimization - adjoint gradients, design variables and the outer loop.

One iteration solves the state problem, the adjoint problem and two scalar
auxiliary problems that lift the shape derivative to a smooth vector field.
The field is restricted to the design control points and a feasibility-guarded
line search moves them. Steepest descent and limited-memory BFGS share the
same line search and stopping rules.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import sparse

from api.config.logging import get_logger
from api.services.assembly import (
    AirGapProfile,
    AlphaSpec,
    SourceSpec,
    SparseSymmetricSystem,
    TargetFlux,
    airgap_profile,
    assemble_airgap_terms,
    assemble_auxiliary_scalar,
    assemble_shape_derivative,
    assemble_state,
    calibrate_target,
    domain_quadrature,
)
from api.services.errors import (
    ConfigurationError,
    ContractError,
    FeasibilityError,
    GeometryError,
    IgaError,
    LineSearchError,
    OptimizationFailed,
    SmoothingError,
)
from api.services.linear_solvers import PcgLog, PreparedSolver, SolverOptions, factor_spd
from api.services.multipatch_topology import (
    GlobalDofMap,
    MaterialKind,
    MultiPatchDomain,
    VectorDofMap,
    build_dof_map,
    neighbors,
)
from api.services.spline_geometry import SIDES, SignCertificate, jacobian_sign_certificate

logger = get_logger("service.shape_optimization")

ALGORITHMS = ("steepest_descent", "bfgs")
DESIGN_MODES = ("global", "interface")


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "steepest_descent"
    nlp_tol: float = 1e-6
    objective_rel_tol: float = 1e-6
    patience: int = 3
    max_iterations: int = 50
    initial_step: float = 1.0
    step_shrink: float = 0.5
    max_shrinks: int = 30
    bound_relax: float = 0.0
    bound_radius: float = 0.1
    max_displacement: float = 0.1
    design_mode: str = "global"
    memory: int = 5

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"Unknown algorithm '{self.algorithm}', choose one of {ALGORITHMS}")
        if self.design_mode not in DESIGN_MODES:
            raise ConfigurationError(f"Unknown design mode '{self.design_mode}', choose one of {DESIGN_MODES}")
        if self.nlp_tol <= 0 or self.objective_rel_tol <= 0:
            raise ConfigurationError("Optimizer tolerances must be positive")
        if not 0.0 < self.step_shrink < 1.0:
            raise ConfigurationError(f"step_shrink must lie in (0, 1), got {self.step_shrink}")
        if self.initial_step <= 0 or self.max_displacement <= 0:
            raise ConfigurationError("initial_step and max_displacement must be positive")
        if self.bound_relax < 0 or self.bound_radius <= 0:
            raise ConfigurationError("bound_relax must be non-negative and bound_radius positive")
        if self.patience < 1 or self.max_iterations < 0 or self.max_shrinks < 0 or self.memory < 1:
            raise ConfigurationError("patience, max_iterations, max_shrinks and memory are out of range")


@dataclass(frozen=True, eq=False)
class DesignVariableMap:
    """Movable control points; design vector entries are (dof, component) pairs, interleaved."""

    mode: str
    dof_map: GlobalDofMap
    dofs: NDArray[np.intp]
    monitored: tuple[int, ...]
    design_patches: tuple[int, ...]
    entries: tuple[tuple[int, int], ...]

    @property
    def size(self) -> int:
        return 2 * self.dofs.size

    @property
    def vector_index(self) -> NDArray[np.intp]:
        """Positions in the vector-valued space for each design vector entry."""
        n = self.dof_map.n_global
        return np.stack([self.dofs, self.dofs + n], axis=1).ravel()

    def restrict(self, field_vec: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.asarray(field_vec)[self.vector_index]

    def embed(self, design: NDArray[np.float64]) -> NDArray[np.float64]:
        out = np.zeros(2 * self.dof_map.n_global)
        out[self.vector_index] = design
        return out


def monitored_patches(domain: MultiPatchDomain) -> tuple[int, ...]:
    """Design patches and their neighboring air patches (air-gap patches excluded)."""
    watched = set(domain.design_patches)
    for d in domain.design_patches:
        for nb in neighbors(domain, d):
            if domain.materials[nb].kind == MaterialKind.AIR:
                watched.add(nb)
    return tuple(sorted(watched))


def build_design_map(domain: MultiPatchDomain, dof_map: GlobalDofMap, mode: str = "global") -> DesignVariableMap:
    if mode not in DESIGN_MODES:
        raise ConfigurationError(f"Unknown design mode '{mode}'")
    if not domain.design_patches:
        raise ConfigurationError("Domain has no design patches")
    watched = monitored_patches(domain)
    watched_set = set(watched)

    owners: list[set[int]] = [set() for _ in range(dof_map.n_global)]
    for p, l2g in enumerate(dof_map.local_to_global):
        for g in l2g:
            owners[g].add(p)

    movable = []
    for g in range(dof_map.n_global):
        if dof_map.dirichlet_mask[g] or not owners[g] or not owners[g] <= watched_set:
            continue
        if mode == "interface":
            touches_design = bool(owners[g] & domain.design_patches)
            touches_air = any(domain.materials[p].kind == MaterialKind.AIR for p in owners[g])
            if not (touches_design and touches_air):
                continue
        movable.append(g)
    dofs = np.array(movable, dtype=np.intp)

    entries = []
    for g in dofs:
        p = min(owners[g])
        local = int(np.flatnonzero(dof_map.local_to_global[p] == g)[0])
        entries.append((p, local))
    logger.info(f"Design variables ({mode}): {dofs.size} control points over {len(watched)} monitored patches")
    return DesignVariableMap(
        mode=mode,
        dof_map=dof_map,
        dofs=dofs,
        monitored=watched,
        design_patches=tuple(sorted(domain.design_patches)),
        entries=tuple(entries),
    )


def global_positions(domain: MultiPatchDomain, dof_map: GlobalDofMap) -> NDArray[np.float64]:
    """One position per global dof (coincident control points share a dof)."""
    positions = np.zeros((dof_map.n_global, 2))
    for patch, l2g in zip(domain.patches, dof_map.local_to_global):
        positions[l2g] = patch.control_points
    return positions


def spring_smooth(net: NDArray[np.float64]) -> NDArray[np.float64]:
    """Place interior control points at the average of their four grid neighbors.

    The boundary ring of ``net`` (shape (n_u, n_v, 2)) stays fixed.

    Raises:
        SmoothingError: degenerate grid or singular spring system
    """
    net = np.asarray(net, dtype=float)
    n_u, n_v = net.shape[:2]
    if n_u < 2 or n_v < 2:
        raise SmoothingError(f"Cannot smooth a {n_u}x{n_v} control net")
    m_u, m_v = n_u - 2, n_v - 2
    if m_u == 0 or m_v == 0:
        return net.copy()

    ring = net.copy()
    ring[1:-1, 1:-1] = 0.0
    rhs = ring[:-2, 1:-1] + ring[2:, 1:-1] + ring[1:-1, :-2] + ring[1:-1, 2:]

    def chain(m):
        return 2.0 * sparse.identity(m) - sparse.eye(m, k=1) - sparse.eye(m, k=-1)

    laplace = sparse.kron(chain(m_u), sparse.identity(m_v)) + sparse.kron(sparse.identity(m_u), chain(m_v))
    lu = factor_spd(laplace, "Spring system", SmoothingError)
    interior = lu.solve(rhs.reshape(-1, 2))
    if not np.all(np.isfinite(interior)):
        raise SmoothingError("Spring system produced non-finite positions")
    out = net.copy()
    out[1:-1, 1:-1] = interior.reshape(m_u, m_v, 2)
    return out


def apply_design_update(
    domain: MultiPatchDomain,
    dvar_map: DesignVariableMap,
    direction: NDArray[np.float64],
    step: float,
    bounds: Optional[tuple[NDArray[np.float64], NDArray[np.float64]]] = None,
) -> MultiPatchDomain:
    """Move design control points by ``step * direction``.

    In interface mode the interior control points of the monitored patches
    follow by spring smoothing of the displacement.
    """
    direction = np.asarray(direction, dtype=float)
    if direction.shape != (dvar_map.size,):
        raise ContractError(f"Direction has shape {direction.shape}, expected ({dvar_map.size},)")
    dof_map = dvar_map.dof_map
    move = step * direction
    if bounds is not None:
        current = global_positions(domain, dof_map)[dvar_map.dofs].ravel()
        move = np.clip(current + move, bounds[0], bounds[1]) - current

    disp = np.zeros((dof_map.n_global, 2))
    disp[dvar_map.dofs] = move.reshape(-1, 2)

    if dvar_map.mode == "interface":
        for p in dvar_map.monitored:
            patch = domain.patches[p]
            l2g = dof_map.local_to_global[p]
            net = disp[l2g].reshape(patch.basis.shape + (2,))
            smoothed = spring_smooth(net)
            interior = l2g.reshape(patch.basis.shape)[1:-1, 1:-1].ravel()
            disp[interior] = smoothed[1:-1, 1:-1].reshape(-1, 2)

    patches = list(domain.patches)
    for p, l2g in enumerate(dof_map.local_to_global):
        local = disp[l2g]
        if np.any(local != 0.0):
            patches[p] = patches[p].with_control_points(patches[p].control_points + local)
    return domain.with_patches(patches)


def feasibility_record(domain: MultiPatchDomain, patches: Sequence[int]) -> dict[int, SignCertificate]:
    return {p: jacobian_sign_certificate(domain.patches[p]) for p in patches}


def reference_length(domain: MultiPatchDomain, patches: Sequence[int]) -> float:
    """Shortest side (control polygon length) over the given patches."""
    lengths = []
    for p in patches:
        patch = domain.patches[p]
        for s in SIDES:
            pts = patch.control_points[patch.side_indices(s)]
            lengths.append(float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()))
    return min(lengths)


def design_bounds(domain: MultiPatchDomain, dvar_map: DesignVariableMap, config: OptimizerConfig):
    """Box bounds: initial position +- radius * patch diameter * (1 + bound_relax)."""
    positions = global_positions(domain, dvar_map.dof_map)[dvar_map.dofs]
    radius = np.zeros(dvar_map.dofs.size)
    for k, g in enumerate(dvar_map.dofs):
        diameters = [
            domain.patches[p].diameter
            for p in dvar_map.monitored
            if np.any(dvar_map.dof_map.local_to_global[p] == g)
        ]
        radius[k] = config.bound_radius * max(diameters) * (1.0 + config.bound_relax)
    r = np.repeat(radius, 2)
    x0 = positions.ravel()
    return x0 - r, x0 + r


@dataclass(eq=False)
class ShapeProblem:
    """Everything but the geometry: dof numbering, sources, target and solver choice."""

    dof_map: GlobalDofMap
    source: SourceSpec
    target: TargetFlux
    solver: SolverOptions = field(default_factory=SolverOptions)
    alpha: AlphaSpec = None
    q: Optional[int] = None

    @property
    def vector_map(self) -> VectorDofMap:
        return self.dof_map.vector()


@dataclass(eq=False)
class StateSolution:
    objective: float
    u: NDArray[np.float64]
    adjoint_rhs: NDArray[np.float64]
    system: SparseSymmetricSystem
    solver: PreparedSolver
    log: PcgLog


@dataclass(eq=False)
class ShapeGradient:
    field: NDArray[np.float64]
    dj: NDArray[np.float64]
    adjoint: NDArray[np.float64]
    logs: list[PcgLog] = field(default_factory=list)
    # inverse of the auxiliary form on design vectors; set for restricted lifts
    precondition: Optional[Callable[[NDArray[np.float64]], NDArray[np.float64]]] = None


def check_feasible(domain: MultiPatchDomain, patches: Optional[Sequence[int]] = None) -> None:
    for p in patches if patches is not None else range(domain.n_patches):
        if jacobian_sign_certificate(domain.patches[p]) == SignCertificate.MIXED:
            raise FeasibilityError(f"Patch {p} has a Jacobian determinant of mixed sign")


def solve_state(domain: MultiPatchDomain, problem: ShapeProblem, check: bool = True) -> StateSolution:
    if check:
        check_feasible(domain)
    system = assemble_state(domain, problem.dof_map, problem.source, problem.q)
    solver = PreparedSolver(system, problem.solver, domain, problem.dof_map)
    u, log = solver.solve()
    objective, adjoint_rhs = assemble_airgap_terms(domain, problem.dof_map, problem.target, u, problem.q)
    return StateSolution(objective, u, adjoint_rhs, system, solver, log)


def evaluate_objective(domain: MultiPatchDomain, problem: ShapeProblem) -> tuple[float, NDArray[np.float64]]:
    """Solve the state problem and evaluate the air-gap tracking objective.

    Raises:
        FeasibilityError: a patch has a mixed-sign Jacobian
    """
    state = solve_state(domain, problem)
    return state.objective, state.u


def compute_shape_gradient(
    domain: MultiPatchDomain,
    u: NDArray[np.float64],
    alpha: AlphaSpec,
    problem: ShapeProblem,
    state: Optional[StateSolution] = None,
    design: Optional[DesignVariableMap] = None,
) -> ShapeGradient:
    """Adjoint solve, shape derivative and its lift to a vector field G.

    G satisfies b(G, psi) = dJ(psi) for every admissible psi, so -G is a
    descent direction: dJ(-G) = -b(G, G). Without ``design`` every non-Dirichlet
    control point is admissible; with it, G lives on the design control points
    only and vanishes on every frozen one.
    """
    dof_map = problem.dof_map
    if state is None:
        system = assemble_state(domain, dof_map, problem.source, problem.q)
        solver = PreparedSolver(system, problem.solver, domain, dof_map)
        _, adjoint_rhs = assemble_airgap_terms(domain, dof_map, problem.target, u, problem.q)
    else:
        solver, adjoint_rhs = state.solver, state.adjoint_rhs
    adjoint, adjoint_log = solver.solve(adjoint_rhs)

    quads = domain_quadrature(domain, problem.q)
    vmap = dof_map.vector()
    dj = assemble_shape_derivative(domain, vmap, u, adjoint, problem.source, quads=quads)

    aux = assemble_auxiliary_scalar(domain, dof_map, alpha, quads=quads)
    n = dof_map.n_global
    logs = [adjoint_log]
    if design is None:
        aux_solver = PreparedSolver(aux, problem.solver, domain, dof_map)
        components = []
        for comp in (0, 1):
            rhs = dj[comp * n:(comp + 1) * n].copy()
            rhs[dof_map.dirichlet_mask] = 0.0
            g, log = aux_solver.solve(rhs)
            components.append(g)
            logs.append(log)
        return ShapeGradient(field=np.concatenate(components), dj=dj, adjoint=adjoint, logs=logs)

    if design.dofs.size == 0:
        raise ContractError("Design map has no control points to lift onto")
    block = SparseSymmetricSystem(lower=aux.lower, free_dofs=design.dofs)
    block_solver = PreparedSolver(block, SolverOptions(solver="direct"))

    def precondition(vec: NDArray[np.float64]) -> NDArray[np.float64]:
        pairs = np.asarray(vec, dtype=float).reshape(-1, 2)
        out = np.empty_like(pairs)
        for comp in (0, 1):
            solved, _ = block_solver.solve(pairs[:, comp])
            out[:, comp] = solved[design.dofs]
        return out.ravel()

    lifted = precondition(design.restrict(dj))
    logs.append(PcgLog(solver="direct", factor_nnz=block_solver.factor_nnz, setup_time=block_solver.setup_time))
    return ShapeGradient(
        field=design.embed(lifted),
        dj=dj,
        adjoint=adjoint,
        logs=logs,
        precondition=precondition,
    )


@dataclass(eq=False)
class DesignState:
    domain: MultiPatchDomain
    design_dofs: NDArray[np.float64]
    iteration: int
    objective: float
    feasibility: dict[int, SignCertificate]
    u: Optional[NDArray[np.float64]] = None
    step: float = 0.0
    shrink_count: int = 0
    payload: Any = None


@dataclass
class LineSearchTrial:
    step: float
    feasible: bool
    objective: Optional[float]


Evaluator = Callable[[MultiPatchDomain], tuple[float, Any]]


def feasibility_line_search(
    domain: MultiPatchDomain,
    dvar_map: DesignVariableMap,
    direction: NDArray[np.float64],
    j_current: float,
    config: OptimizerConfig,
    evaluate: Evaluator,
    slope: float,
    reference: Optional[dict[int, SignCertificate]] = None,
    bounds: Optional[tuple[NDArray[np.float64], NDArray[np.float64]]] = None,
    iteration: int = 0,
) -> DesignState:
    """Shrink the step until the sign record is kept and the objective decreases.

    Raises:
        ContractError: zero or non-descent direction
        LineSearchError: no acceptable step after ``config.max_shrinks`` shrinks
    """
    direction = np.asarray(direction, dtype=float)
    if not np.any(direction):
        raise ContractError("Line search direction is zero")
    if not slope < 0:
        raise ContractError(f"Line search direction is not a descent direction (slope {slope:.3e})")
    if reference is None:
        reference = feasibility_record(domain, dvar_map.monitored)

    trials: list[LineSearchTrial] = []
    step = config.initial_step
    for shrink in range(config.max_shrinks + 1):
        candidate = apply_design_update(domain, dvar_map, direction, step, bounds)
        record = feasibility_record(candidate, dvar_map.monitored)
        if record != reference:
            trials.append(LineSearchTrial(step, False, None))
            logger.info(f"Line search: step {step:.3e} changes the Jacobian sign record, shrinking")
        else:
            try:
                objective, payload = evaluate(candidate)
            except (GeometryError, FeasibilityError) as e:
                trials.append(LineSearchTrial(step, False, None))
                logger.info(f"Line search: step {step:.3e} rejected ({e.message})")
            else:
                trials.append(LineSearchTrial(step, True, objective))
                if objective < j_current:
                    logger.info(f"Line search: accepted step {step:.3e} after {shrink} shrink(s), J={objective:.6e}")
                    positions = global_positions(candidate, dvar_map.dof_map)[dvar_map.dofs].ravel()
                    return DesignState(
                        domain=candidate,
                        design_dofs=positions,
                        iteration=iteration,
                        objective=objective,
                        feasibility=record,
                        u=payload if isinstance(payload, np.ndarray) else getattr(payload, "u", None),
                        payload=payload,
                        step=step,
                        shrink_count=shrink,
                    )
                logger.info(f"Line search: step {step:.3e} gives J={objective:.6e} >= {j_current:.6e}, shrinking")
        step *= config.step_shrink
    raise LineSearchError(
        f"No feasible decreasing step after {config.max_shrinks} shrinks",
        [t.__dict__ for t in trials],
    )


@dataclass
class HistoryRow:
    iteration: int
    objective: float
    step: float
    gradient_norm: float
    shrink_count: int
    feasible: bool


@dataclass(eq=False)
class OptimizationResult:
    history: list[HistoryRow]
    initial: DesignState
    final: DesignState
    profiles: list[AirGapProfile]
    target: TargetFlux
    reason: str = "max_iterations"
    wall_time: float = 0.0
    # accepted geometries, initial first
    geometries: list[MultiPatchDomain] = field(default_factory=list)

    @property
    def accepted_iterations(self) -> int:
        return len(self.history) - 1


Preconditioner = Callable[[NDArray[np.float64]], NDArray[np.float64]]


class LbfgsMemory:
    """Two-loop recursion over the last ``size`` secant pairs.

    Pairs are (step in the design positions, change of the exact gradient dJ).
    The initial inverse Hessian is gamma * M^-1 with M the auxiliary form on the
    design space, so an empty memory reproduces the lifted steepest descent
    direction.
    """

    def __init__(self, size: int, curvature_tol: float = 1e-8):
        self.size = size
        self.curvature_tol = curvature_tol
        self.pairs: list[tuple[NDArray, NDArray, float]] = []

    def reset(self):
        self.pairs.clear()

    def update(self, s: NDArray[np.float64], y: NDArray[np.float64]) -> bool:
        sy = float(s @ y)
        if sy <= self.curvature_tol * float(np.linalg.norm(s) * np.linalg.norm(y)):
            logger.debug(f"L-BFGS: curvature condition failed (s.y={sy:.3e}), update skipped")
            return False
        self.pairs.append((s.copy(), y.copy(), 1.0 / sy))
        if len(self.pairs) > self.size:
            self.pairs.pop(0)
        return True

    def direction(
        self,
        gradient: NDArray[np.float64],
        precondition: Optional[Preconditioner] = None,
    ) -> NDArray[np.float64]:
        apply = precondition if precondition is not None else (lambda v: v.copy())
        q = np.array(gradient, dtype=float)
        coefs = []
        for s, y, rho in reversed(self.pairs):
            a = rho * float(s @ q)
            q -= a * y
            coefs.append(a)
        r = apply(q)
        if self.pairs:
            s, y, _ = self.pairs[-1]
            r *= float(s @ y) / float(y @ apply(y))
        for (s, y, rho), a in zip(self.pairs, reversed(coefs)):
            b = rho * float(y @ r)
            r += (a - b) * s
        return -r


class ShapeOptimizer:
    """Steepest descent or L-BFGS on the design control points."""

    def __init__(self, problem: ShapeProblem, config: OptimizerConfig):
        self.problem = problem
        self.config = config

    def _evaluate(self, domain: MultiPatchDomain) -> tuple[float, StateSolution]:
        state = solve_state(domain, self.problem, check=False)
        return state.objective, state

    def _scaled_norm(self, gradient: NDArray[np.float64], objective: float, l_ref: float) -> float:
        if gradient.size == 0:
            return 0.0
        return float(np.max(np.abs(gradient)) * l_ref / max(abs(objective), 1e-300))

    def run(self, domain: MultiPatchDomain) -> OptimizationResult:
        """Optimize until a stopping rule fires.

        Raises:
            OptimizationFailed: wraps the error and carries the history so far
        """
        cfg, problem = self.config, self.problem
        start = time.perf_counter()
        dvar = build_design_map(domain, problem.dof_map, cfg.design_mode)
        reference = feasibility_record(domain, dvar.monitored)
        if any(c == SignCertificate.MIXED for c in reference.values()):
            raise FeasibilityError("Initial design has a mixed-sign Jacobian")
        l_ref = reference_length(domain, dvar.monitored)
        cap = cfg.max_displacement * l_ref
        bounds = design_bounds(domain, dvar, cfg)

        state = solve_state(domain, problem)
        current = DesignState(
            domain=domain,
            design_dofs=global_positions(domain, problem.dof_map)[dvar.dofs].ravel(),
            iteration=0,
            objective=state.objective,
            feasibility=reference,
            u=state.u,
        )
        result = OptimizationResult(
            history=[HistoryRow(0, state.objective, 0.0, math.nan, 0, True)],
            initial=current,
            final=current,
            profiles=[airgap_profile(domain, problem.dof_map, state.u, problem.q)],
            target=problem.target,
            geometries=[domain],
        )
        logger.info(f"Optimization start: J={state.objective:.6e}, {dvar.size} design variables, L_ref={l_ref:.3e}")

        memory = LbfgsMemory(cfg.memory)
        previous: Optional[tuple[NDArray, NDArray]] = None
        small_changes = 0
        try:
            for it in range(1, cfg.max_iterations + 1):
                grad = compute_shape_gradient(current.domain, current.u, problem.alpha, problem, state, design=dvar)
                exact = dvar.restrict(grad.dj)
                lifted = dvar.restrict(grad.field)
                gnorm = self._scaled_norm(exact, current.objective, l_ref)
                result.history[-1].gradient_norm = gnorm
                if gnorm < cfg.nlp_tol:
                    result.reason = "gradient"
                    break

                if cfg.algorithm == "bfgs":
                    if previous is not None:
                        memory.update(current.design_dofs - previous[0], exact - previous[1])
                    direction = memory.direction(exact, grad.precondition)
                    if float(exact @ direction) >= 0:
                        logger.warning("L-BFGS direction is not a descent direction, resetting memory")
                        memory.reset()
                        direction = -lifted
                    previous = (current.design_dofs.copy(), exact.copy())
                else:
                    direction = -lifted

                if float(exact @ direction) >= 0:
                    logger.warning("Lifted gradient is not a descent direction on the design variables, using dJ")
                    direction = -exact

                peak = float(np.max(np.abs(direction)))
                if cfg.algorithm == "steepest_descent" or not memory.pairs or peak > cap:
                    direction = direction * (cap / peak)

                accepted = feasibility_line_search(
                    current.domain,
                    dvar,
                    direction,
                    current.objective,
                    cfg,
                    self._evaluate,
                    slope=float(exact @ direction),
                    reference=reference,
                    bounds=bounds,
                    iteration=it,
                )
                state = accepted.payload
                change = abs(current.objective - accepted.objective) / max(abs(current.objective), 1e-300)
                current = accepted
                result.history.append(
                    HistoryRow(it, accepted.objective, accepted.step, math.nan, accepted.shrink_count, True)
                )
                result.profiles.append(airgap_profile(current.domain, problem.dof_map, current.u, problem.q))
                result.geometries.append(current.domain)
                result.final = current
                logger.info(
                    f"Iteration {it}: J={accepted.objective:.6e} step={accepted.step:.3e} "
                    f"|g|={gnorm:.3e} shrinks={accepted.shrink_count}"
                )

                small_changes = small_changes + 1 if change < cfg.objective_rel_tol else 0
                if small_changes >= cfg.patience:
                    result.reason = "objective"
                    break
            else:
                result.reason = "max_iterations"
            if math.isnan(result.history[-1].gradient_norm):
                grad = compute_shape_gradient(current.domain, current.u, problem.alpha, problem, state, design=dvar)
                result.history[-1].gradient_norm = self._scaled_norm(dvar.restrict(grad.dj), current.objective, l_ref)
        except IgaError as e:
            result.wall_time = time.perf_counter() - start
            logger.error(f"Optimization stopped after {result.accepted_iterations} iteration(s): {e.message}")
            raise OptimizationFailed(e, result)

        result.wall_time = time.perf_counter() - start
        logger.info(
            f"Optimization finished ({result.reason}): J {result.initial.objective:.6e} -> "
            f"{result.final.objective:.6e} in {result.accepted_iterations} iteration(s)"
        )
        return result


def optimize(domain: MultiPatchDomain, config: OptimizerConfig, problem: ShapeProblem) -> OptimizationResult:
    return ShapeOptimizer(problem, config).run(domain)


def make_problem(
    domain: MultiPatchDomain,
    source: Optional[SourceSpec] = None,
    target: Optional[TargetFlux] = None,
    solver: Optional[SolverOptions] = None,
    alpha: AlphaSpec = None,
    q: Optional[int] = None,
) -> ShapeProblem:
    """Problem for a domain; without a target the four-pole B_d is calibrated on the initial state."""
    dof_map = build_dof_map(domain)
    problem = ShapeProblem(
        dof_map=dof_map,
        source=source or SourceSpec(),
        target=target or TargetFlux(),
        solver=solver or SolverOptions(),
        alpha=alpha,
        q=q,
    )
    if target is None:
        state = solve_state(domain, problem)
        problem.target = calibrate_target(airgap_profile(domain, dof_map, state.u, q))
    return problem


def finite_difference_check(
    domain: MultiPatchDomain,
    problem: ShapeProblem,
    field_vec: NDArray[np.float64],
    steps: Sequence[float] = (1e-2, 1e-3, 1e-4, 1e-5),
    dj: Optional[NDArray[np.float64]] = None,
) -> list[tuple[float, float, float]]:
    """Compare (J(x + t phi) - J(x)) / t with dJ(phi) for a control-point field phi.

    ``field_vec`` is a vector-valued coefficient field (component-major) added to
    the global control positions. Returns (t, quotient, predicted) triples.
    """
    objective, u = evaluate_objective(domain, problem)
    if dj is None:
        dj = compute_shape_gradient(domain, u, problem.alpha, problem).dj
    predicted = float(dj @ field_vec)
    disp = problem.vector_map.split(field_vec)
    rows = []
    for t in steps:
        patches = [
            patch.with_control_points(patch.control_points + t * disp[l2g])
            for patch, l2g in zip(domain.patches, problem.dof_map.local_to_global)
        ]
        moved, _ = evaluate_objective(domain.with_patches(patches), problem)
        rows.append((float(t), (moved - objective) / t, predicted))
    return rows
