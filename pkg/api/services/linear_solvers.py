"""
Linear Solvers - sparse direct baseline, dof-balanced partitioning and IETI-DP.

The tearing solver groups patches into subdomains, keeps the cross-points of
the partition as primal unknowns, glues the remaining interface dofs with fully
redundant Lagrange multipliers and runs PCG on the dual system with a scaled
Dirichlet preconditioner. The recovered solution is checked against the
assembled matrix and corrected by further dual solves until its residual meets
the tolerance. Subdomain work can be spread over a thread pool.
"""

import time
from concurrent.futures import Executor, ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import linalg, sparse
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.sparse.linalg import SuperLU, splu

from api.config.logging import get_logger
from api.services.assembly import SparseSymmetricSystem
from api.services.errors import (
    ContractError,
    ConvergenceError,
    FactorizationError,
    IetiSetupError,
    PartitionError,
)
from api.services.multipatch_topology import GlobalDofMap, MultiPatchDomain, patch_adjacency

logger = get_logger("service.solvers")

BALANCE_BOUND = 1.25
SCALINGS = ("multiplicity", "coefficient")
# pivots below this fraction of the largest one mark a singular matrix
PIVOT_REL_TOL = 1e-13
# residual corrections after the first dual solve
MAX_REFINEMENTS = 4


@dataclass
class PcgLog:
    solver: str
    iterations: int = 0
    residuals: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    setup_time: float = 0.0
    factor_time: float = 0.0
    iterate_time: float = 0.0
    factor_nnz: int = 0
    # largest share held by a single worker; equals factor_nnz for the direct solver
    peak_factor_nnz: int = 0
    workers: int = 1
    rel_residual: Optional[float] = None
    refinements: int = 0
    # largest disagreement between subdomain copies of a dual dof
    interface_jump: Optional[float] = None


def factor_spd(matrix, what: str, error: type[Exception] = FactorizationError) -> SuperLU:
    """Symmetric-mode sparse LU (an LDL^T in disguise) with a positive-pivot check."""
    mat = sparse.csc_matrix(matrix)
    try:
        lu = splu(
            mat,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as e:
        raise error(f"{what}: factorization failed ({e})")
    pivots = lu.U.diagonal()
    floor = PIVOT_REL_TOL * float(np.max(np.abs(pivots))) if pivots.size else 0.0
    if not np.all(np.isfinite(pivots)) or np.any(pivots <= floor):
        raise error(f"{what}: non-positive pivot {np.min(pivots):.3e}; matrix is not SPD")
    return lu


@dataclass
class DirectFactorization:
    lu: Optional[SuperLU]
    n: int

    @classmethod
    def of(cls, matrix) -> "DirectFactorization":
        n = matrix.shape[0]
        return cls(lu=factor_spd(matrix, "Direct solver") if n else None, n=n)

    @property
    def factor_nnz(self) -> int:
        return 0 if self.lu is None else int(self.lu.L.nnz + self.lu.U.nnz)

    def solve(self, rhs: NDArray[np.float64]) -> NDArray[np.float64]:
        if self.lu is None:
            return np.zeros_like(rhs, dtype=float)
        return self.lu.solve(np.asarray(rhs, dtype=float))


def direct_solve(
    system: SparseSymmetricSystem, rhs: Optional[NDArray[np.float64]] = None
) -> tuple[NDArray[np.float64], PcgLog]:
    """Factor the reduced matrix and solve once; returns the full-length solution."""
    start = time.perf_counter()
    fact = DirectFactorization.of(system.reduced)
    factored = time.perf_counter()
    x = fact.solve(system.reduced_rhs(rhs))
    end = time.perf_counter()
    log = PcgLog(
        solver="direct",
        wall_time=end - start,
        setup_time=factored - start,
        factor_time=factored - start,
        iterate_time=end - factored,
        factor_nnz=fact.factor_nnz,
        peak_factor_nnz=fact.factor_nnz,
    )
    logger.debug(f"Direct solve: n={system.n_free} nnz(LU)={fact.factor_nnz} in {log.wall_time:.3f}s")
    return system.expand(x), log


@dataclass(frozen=True)
class Partition:
    subdomains: tuple[tuple[int, ...], ...]
    dof_counts: tuple[int, ...]

    @property
    def n_sub(self) -> int:
        return len(self.subdomains)

    def balance(self) -> float:
        counts = np.asarray(self.dof_counts, dtype=float)
        return float(counts.max() / counts.mean())


def _is_connected(adjacency: sparse.csr_matrix, members: Sequence[int]) -> bool:
    if len(members) <= 1:
        return True
    sub = adjacency[list(members)][:, list(members)]
    n_comp, _ = connected_components(sub, directed=False)
    return n_comp == 1


def _choose_seeds(adjacency, dofs: NDArray, labels: NDArray, n_sub: int) -> list[int]:
    order = sorted(range(dofs.size), key=lambda i: (-dofs[i], i))
    seeds: list[int] = []
    for comp in np.unique(labels):
        seeds.append(next(i for i in order if labels[i] == comp))
    hops = shortest_path(adjacency, unweighted=True, directed=False)
    while len(seeds) < n_sub:
        dist = hops[seeds].min(axis=0)
        dist[seeds] = -1
        dist[~np.isfinite(dist)] = -1
        best = max(range(dofs.size), key=lambda i: (dist[i], dofs[i], -i))
        seeds.append(best)
    return seeds


def partition_balanced(domain: MultiPatchDomain, dof_map: GlobalDofMap, n_sub: int) -> Partition:
    """Greedy dof-balanced grouping of interface-connected patches.

    Raises:
        PartitionError: n_sub outside [#components, #patches]
    """
    n = domain.n_patches
    if not 1 <= n_sub <= n:
        raise PartitionError(f"Number of subdomains must lie in [1, {n}], got {n_sub}")
    adjacency = patch_adjacency(domain)
    n_comp, labels = connected_components(adjacency, directed=False)
    if n_sub < n_comp:
        raise PartitionError(f"{n_comp} disconnected patch groups cannot form {n_sub} connected subdomains")
    dofs = np.array([len(l2g) for l2g in dof_map.local_to_global])

    seeds = _choose_seeds(adjacency, dofs, labels, n_sub)
    owner = np.full(n, -1)
    loads = np.zeros(n_sub)
    for k, s in enumerate(seeds):
        owner[s] = k
        loads[k] = dofs[s]

    while np.any(owner < 0):
        grown = False
        for k in sorted(range(n_sub), key=lambda j: (loads[j], j)):
            members = np.flatnonzero(owner == k)
            links = np.asarray(adjacency[members].sum(axis=0)).ravel()
            links[owner >= 0] = 0
            if links.max() > 0:
                pick = int(np.argmax(links))
                owner[pick] = k
                loads[k] += dofs[pick]
                grown = True
                break
        if not grown:
            raise PartitionError("Patch graph could not be covered by subdomain growth")

    # boundary-patch exchange until the balance bound holds
    for _ in range(4 * n):
        mean = loads.mean()
        heavy = int(np.argmax(loads))
        if loads[heavy] <= BALANCE_BOUND * mean:
            break
        best = None
        members = np.flatnonzero(owner == heavy)
        if members.size > 1:
            for p in members:
                rest = [m for m in members if m != p]
                if not _is_connected(adjacency, rest):
                    continue
                for g in sorted(set(owner[adjacency[p].indices]) - {heavy}):
                    new_max = max(loads[heavy] - dofs[p], loads[g] + dofs[p])
                    if new_max < loads[heavy] and (best is None or new_max < best[0]):
                        best = (new_max, int(p), int(g))
        if best is None:
            break
        _, p, g = best
        owner[p] = g
        loads[heavy] -= dofs[p]
        loads[g] += dofs[p]

    if loads.max() > BALANCE_BOUND * loads.mean():
        logger.warning(
            f"Partition into {n_sub} subdomains misses the balance bound: max/mean={loads.max() / loads.mean():.3f}"
        )
    subdomains = tuple(tuple(int(p) for p in np.flatnonzero(owner == k)) for k in range(n_sub))
    return Partition(subdomains=subdomains, dof_counts=tuple(int(x) for x in loads))


@dataclass(eq=False)
class Subdomain:
    """Local data of one subdomain; positions index into ``dofs`` (reduced numbering)."""

    index: int
    patches: tuple[int, ...]
    dofs: NDArray[np.intp]
    r: NDArray[np.intp]
    pi: NDArray[np.intp]
    pi_coarse: NDArray[np.intp]
    weights: NDArray[np.float64]
    jump: sparse.csr_matrix
    jump_scaled: sparse.csr_matrix
    delta: NDArray[np.intp]
    inner: NDArray[np.intp]
    k_rr: Optional[SuperLU] = None
    k_rpi: Optional[sparse.csr_matrix] = None
    x_pi: Optional[NDArray[np.float64]] = None
    s_pipi: Optional[NDArray[np.float64]] = None
    k_ii: Optional[SuperLU] = None
    k_id: Optional[sparse.csr_matrix] = None
    k_dd: Optional[sparse.csr_matrix] = None
    factor_nnz: int = 0

    def solve_rr(self, rhs: NDArray[np.float64]) -> NDArray[np.float64]:
        if self.k_rr is None:
            return np.zeros(self.r.size)
        return self.k_rr.solve(rhs)

    def schur_dual(self, v: NDArray[np.float64]) -> NDArray[np.float64]:
        """S_dd v = K_dd v - K_di K_ii^{-1} K_id v on the dual dofs."""
        out = self.k_dd @ v
        if self.k_ii is not None and self.inner.size:
            out = out - self.k_id.T @ self.k_ii.solve(self.k_id @ v)
        return out


def _subdomain_matrix(system: SparseSymmetricSystem, reduced_index, patches, dofs) -> sparse.csr_matrix:
    rows, cols, vals = [], [], []
    for p in patches:
        blk = system.patch_blocks[p].tocoo()
        red = reduced_index[system.local_to_global[p]]
        r, c = red[blk.row], red[blk.col]
        keep = (r >= 0) & (c >= 0)
        rows.append(np.searchsorted(dofs, r[keep]))
        cols.append(np.searchsorted(dofs, c[keep]))
        vals.append(blk.data[keep])
    n = dofs.size
    return sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()


def _factor_local(sd: Subdomain, k_local: sparse.csr_matrix) -> Subdomain:
    """Local factorizations, primal coupling and Dirichlet preconditioner blocks."""
    r, pi = sd.r, sd.pi
    where = f"Subdomain {sd.index} (patches {list(sd.patches)})"
    if r.size:
        k_rr = k_local[r][:, r]
        sd.k_rr = factor_spd(k_rr, f"{where}: local block after primal pinning", IetiSetupError)
        sd.factor_nnz += int(sd.k_rr.L.nnz + sd.k_rr.U.nnz)
    sd.k_rpi = k_local[r][:, pi].tocsr()
    k_pipi = k_local[pi][:, pi].toarray()
    if pi.size and r.size:
        sd.x_pi = sd.k_rr.solve(sd.k_rpi.toarray())
        sd.s_pipi = k_pipi - sd.k_rpi.T @ sd.x_pi
    else:
        sd.x_pi = np.zeros((r.size, pi.size))
        sd.s_pipi = k_pipi

    k_r = k_local[r][:, r]
    sd.k_dd = k_r[sd.delta][:, sd.delta].tocsr()
    if sd.inner.size and sd.delta.size:
        sd.k_id = k_r[sd.inner][:, sd.delta].tocsr()
        sd.k_ii = factor_spd(k_r[sd.inner][:, sd.inner], f"{where}: interior block", IetiSetupError)
        sd.factor_nnz += int(sd.k_ii.L.nnz + sd.k_ii.U.nnz)
    return sd


def _pool_map(pool: Optional[Executor], fn: Callable, items: Iterable) -> list:
    if pool is None:
        return [fn(item) for item in items]
    return list(pool.map(fn, items))


@dataclass(eq=False)
class IetiDpOperator:
    subdomains: list[Subdomain]
    n_free: int
    n_lambda: int
    primal_dofs: NDArray[np.intp]
    coarse: Optional[tuple]
    scaling: str
    setup_time: float = 0.0
    factor_time: float = 0.0
    # reduced global matrix, used to check the recovered solution
    matrix: Optional[sparse.csr_matrix] = None

    @property
    def factor_nnz(self) -> int:
        return sum(sd.factor_nnz for sd in self.subdomains) + self.primal_dofs.size ** 2

    def peak_factor_nnz(self, workers: int = 1) -> int:
        """Largest factor share one of ``workers`` ranks holds in a distributed layout.

        Subdomains go to the least loaded rank, largest first; every rank keeps
        a copy of the dense coarse factor.
        """
        loads = np.zeros(max(1, min(workers, len(self.subdomains))), dtype=np.int64)
        for nnz in sorted((sd.factor_nnz for sd in self.subdomains), reverse=True):
            loads[np.argmin(loads)] += nnz
        return int(loads.max()) + self.primal_dofs.size ** 2

    def _coarse_solve(self, g: NDArray[np.float64]) -> NDArray[np.float64]:
        if self.coarse is None:
            return np.zeros(0)
        return linalg.cho_solve(self.coarse, g)

    def apply_tilde_inverse(
        self,
        f_r: Sequence[NDArray[np.float64]],
        f_pi: NDArray[np.float64],
        pool: Optional[Executor] = None,
    ) -> tuple[list[NDArray[np.float64]], NDArray[np.float64]]:
        """Solve the partially assembled system; returns local remainders and primal values."""
        ys = _pool_map(pool, lambda k: self.subdomains[k].solve_rr(f_r[k]), range(len(self.subdomains)))
        g = np.array(f_pi, dtype=float, copy=True)
        for sd, y in zip(self.subdomains, ys):
            if sd.pi.size:
                g[sd.pi_coarse] -= sd.k_rpi.T @ y
        u_pi = self._coarse_solve(g)
        u_r = [y - sd.x_pi @ u_pi[sd.pi_coarse] if sd.pi.size else y for sd, y in zip(self.subdomains, ys)]
        return u_r, u_pi

    def _jump_of(self, u_r: Sequence[NDArray[np.float64]], pool, deterministic: bool) -> NDArray[np.float64]:
        out = np.zeros(self.n_lambda)
        if pool is None or deterministic:
            for sd, u in zip(self.subdomains, u_r):
                out += sd.jump @ u
            return out
        futures = [pool.submit(lambda s, v: s.jump @ v, sd, u) for sd, u in zip(self.subdomains, u_r)]
        for fut in as_completed(futures):
            out += fut.result()
        return out

    def apply_f(self, lam: NDArray[np.float64], pool=None, deterministic: bool = True) -> NDArray[np.float64]:
        f_r = [sd.jump.T @ lam for sd in self.subdomains]
        u_r, _ = self.apply_tilde_inverse(f_r, np.zeros(self.primal_dofs.size), pool)
        return self._jump_of(u_r, pool, deterministic)

    def apply_preconditioner(self, res: NDArray[np.float64], pool=None, deterministic: bool = True) -> NDArray[np.float64]:
        def local(sd: Subdomain) -> NDArray[np.float64]:
            v = (sd.jump_scaled.T @ res)[sd.delta]
            w = np.zeros(sd.r.size)
            w[sd.delta] = sd.schur_dual(v)
            return sd.jump_scaled @ w

        parts = _pool_map(pool, local, self.subdomains)
        out = np.zeros(self.n_lambda)
        for part in parts:
            out += part
        return out

    def split_rhs(self, rhs: NDArray[np.float64]) -> tuple[list[NDArray[np.float64]], NDArray[np.float64]]:
        f_r = [(sd.weights * rhs[sd.dofs])[sd.r] for sd in self.subdomains]
        return f_r, rhs[self.primal_dofs]

    def assemble_solution(self, u_r, u_pi) -> NDArray[np.float64]:
        x = np.zeros(self.n_free)
        for sd, u in zip(self.subdomains, u_r):
            x[sd.dofs[sd.r]] += sd.weights[sd.r] * u
        x[self.primal_dofs] = u_pi
        return x

    def max_jump(self, u_r) -> float:
        if self.n_lambda == 0:
            return 0.0
        return float(np.max(np.abs(self._jump_of(u_r, None, True))))


def cross_points(
    domain: MultiPatchDomain,
    dof_map: GlobalDofMap,
    partition: Partition,
    multiplicity: NDArray[np.intp],
) -> NDArray[np.bool_]:
    """Primal mask on the reduced numbering: the vertices of the subdomain interface graph.

    A shared patch corner is a vertex when three or more subdomains meet there
    or when it does not lie inside a single interface curve, i.e. it is not
    the meeting point of exactly two cross-subdomain patch sides. A subdomain
    without Dirichlet dofs whose interfaces are closed curves has no vertex;
    it is pinned at its lowest shared patch corner.
    """
    reduced_index = dof_map.reduced_index
    n_free = dof_map.n_free
    owner = {p: k for k, patches in enumerate(partition.subdomains) for p in patches}

    corner = np.zeros(n_free, dtype=bool)
    for p, patch in enumerate(domain.patches):
        red = reduced_index[dof_map.local_to_global[p][patch.corner_indices()]]
        corner[red[red >= 0]] = True

    ends = np.zeros(n_free, dtype=np.intp)
    for itf in domain.interfaces:
        if owner[itf.patch_a] == owner[itf.patch_b]:
            continue
        side = domain.patches[itf.patch_a].side_indices(itf.side_a)
        red = reduced_index[dof_map.local_to_global[itf.patch_a][side[[0, -1]]]]
        ends[red[red >= 0]] += 1

    shared_corner = corner & (multiplicity >= 2)
    primal = shared_corner & ((multiplicity >= 3) | (ends != 2))

    for k, patches in enumerate(partition.subdomains):
        red = np.concatenate([reduced_index[dof_map.local_to_global[p]] for p in patches])
        dofs = np.unique(red[red >= 0])
        if red.min() < 0 or primal[dofs].any():
            continue
        candidates = dofs[shared_corner[dofs]]
        if candidates.size:
            primal[candidates[0]] = True
            logger.info(f"Subdomain {k} has no interface vertex, pinned at dof {candidates[0]}")
    return primal


def ieti_setup(
    system: SparseSymmetricSystem,
    domain: MultiPatchDomain,
    dof_map: GlobalDofMap,
    partition: Partition,
    scaling: str = "multiplicity",
    n_workers: int = 1,
) -> IetiDpOperator:
    """Build subdomain matrices, primal/dual splitting, jump operators and factorizations.

    Raises:
        ContractError: the system carries no per-patch blocks or does not fit the dof map
        IetiSetupError: a local or coarse matrix is singular
    """
    start = time.perf_counter()
    if scaling not in SCALINGS:
        raise ContractError(f"Unknown scaling '{scaling}', choose one of {SCALINGS}")
    if len(system.patch_blocks) != domain.n_patches or system.n != dof_map.n_global:
        raise ContractError("IETI-DP needs a system assembled patch by patch on the given dof map")
    covered = sorted(p for sd in partition.subdomains for p in sd)
    if covered != list(range(domain.n_patches)):
        raise ContractError("Partition must cover every patch exactly once")

    reduced_index = dof_map.reduced_index
    n_free = dof_map.n_free
    coefficients = np.asarray(system.patch_coefficients or [1.0] * domain.n_patches, dtype=float)

    sd_dofs = []
    for patches in partition.subdomains:
        red = np.concatenate([reduced_index[dof_map.local_to_global[p]] for p in patches])
        sd_dofs.append(np.unique(red[red >= 0]))

    multiplicity = np.zeros(n_free, dtype=np.intp)
    for dofs in sd_dofs:
        multiplicity[dofs] += 1

    primal_mask = cross_points(domain, dof_map, partition, multiplicity)
    dual_mask = (multiplicity >= 2) & ~primal_mask
    primal_dofs = np.flatnonzero(primal_mask)
    coarse_index = np.full(n_free, -1, dtype=np.intp)
    coarse_index[primal_dofs] = np.arange(primal_dofs.size)

    # scaling weights rho_k(g) / sum_j rho_j(g)
    rho = []
    for patches, dofs in zip(partition.subdomains, sd_dofs):
        local_rho = np.zeros(dofs.size)
        for p in patches:
            red = reduced_index[dof_map.local_to_global[p]]
            pos = np.searchsorted(dofs, red[red >= 0])
            value = coefficients[p] if scaling == "coefficient" else 1.0
            local_rho[pos] = np.maximum(local_rho[pos], value)
        rho.append(local_rho)
    rho_total = np.zeros(n_free)
    for dofs, local_rho in zip(sd_dofs, rho):
        rho_total[dofs] += local_rho

    subdomains: list[Subdomain] = []
    for k, (patches, dofs) in enumerate(zip(partition.subdomains, sd_dofs)):
        is_primal = primal_mask[dofs]
        r = np.flatnonzero(~is_primal)
        pi = np.flatnonzero(is_primal)
        r_dofs = dofs[r]
        subdomains.append(
            Subdomain(
                index=k,
                patches=tuple(patches),
                dofs=dofs,
                r=r,
                pi=pi,
                pi_coarse=coarse_index[dofs[pi]],
                weights=rho[k] / rho_total[dofs],
                jump=sparse.csr_matrix((0, r.size)),
                jump_scaled=sparse.csr_matrix((0, r.size)),
                delta=np.flatnonzero(dual_mask[r_dofs]),
                inner=np.flatnonzero(multiplicity[r_dofs] == 1),
            )
        )

    # fully redundant multipliers: one row per pair of subdomains sharing a dual dof
    owners: dict[int, list[tuple[int, int]]] = {}
    for sd in subdomains:
        r_dofs = sd.dofs[sd.r]
        for pos in sd.delta:
            owners.setdefault(int(r_dofs[pos]), []).append((sd.index, int(pos)))
    entries: list[list[tuple[int, int, float, float]]] = [[] for _ in subdomains]
    n_lambda = 0
    for g in sorted(owners):
        sharing = owners[g]
        for a in range(len(sharing)):
            for b in range(a + 1, len(sharing)):
                (ka, pa), (kb, pb) = sharing[a], sharing[b]
                wa = subdomains[ka].weights[subdomains[ka].r[pa]]
                wb = subdomains[kb].weights[subdomains[kb].r[pb]]
                entries[ka].append((n_lambda, pa, 1.0, wb))
                entries[kb].append((n_lambda, pb, -1.0, -wa))
                n_lambda += 1
    for sd, rows in zip(subdomains, entries):
        lam = [e[0] for e in rows]
        pos = [e[1] for e in rows]
        sd.jump = sparse.csr_matrix(([e[2] for e in rows], (lam, pos)), shape=(n_lambda, sd.r.size))
        sd.jump_scaled = sparse.csr_matrix(([e[3] for e in rows], (lam, pos)), shape=(n_lambda, sd.r.size))

    factor_start = time.perf_counter()
    local_mats = [_subdomain_matrix(system, reduced_index, sd.patches, sd.dofs) for sd in subdomains]
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            subdomains = list(pool.map(_factor_local, subdomains, local_mats))
    else:
        subdomains = [_factor_local(sd, mat) for sd, mat in zip(subdomains, local_mats)]

    coarse = None
    if primal_dofs.size:
        s_coarse = np.zeros((primal_dofs.size, primal_dofs.size))
        for sd in subdomains:
            if sd.pi.size:
                s_coarse[np.ix_(sd.pi_coarse, sd.pi_coarse)] += sd.s_pipi
        s_coarse = 0.5 * (s_coarse + s_coarse.T)
        try:
            coarse = linalg.cho_factor(s_coarse, lower=True)
        except linalg.LinAlgError as e:
            raise IetiSetupError(f"Coarse primal problem is not SPD ({e})")
    end = time.perf_counter()

    op = IetiDpOperator(
        subdomains=subdomains,
        n_free=n_free,
        n_lambda=n_lambda,
        primal_dofs=primal_dofs,
        coarse=coarse,
        scaling=scaling,
        setup_time=end - start,
        factor_time=end - factor_start,
        matrix=system.reduced,
    )
    logger.info(
        f"IETI-DP setup: {len(subdomains)} subdomains, {primal_dofs.size} primal dofs, "
        f"{n_lambda} multipliers, {op.factor_nnz} factor entries in {op.setup_time:.3f}s"
    )
    return op


def _pcg(
    op: IetiDpOperator, d, tol, max_it, pool, deterministic, norm_ref: Optional[float] = None
) -> tuple[NDArray[np.float64], list[float]]:
    """PCG on F lam = d until |res| <= tol |d|; the history is relative to ``norm_ref`` (default |d|)."""
    lam = np.zeros(op.n_lambda)
    if op.n_lambda == 0:
        return lam, []
    norm_d = float(np.linalg.norm(d))
    if norm_d == 0.0:
        return lam, [0.0]
    ref = norm_ref or norm_d

    residuals = [norm_d / ref]
    res = d.copy()
    z = op.apply_preconditioner(res, pool, deterministic)
    rz = float(res @ z)
    direction = z.copy()
    for it in range(1, max_it + 1):
        if rz <= 0:
            logger.error(
                f"PCG breakdown at iteration {it}: r^T z = {rz:.3e}, |r| = {np.linalg.norm(res):.3e}, "
                f"history = {residuals[-5:]}"
            )
            raise ConvergenceError("PCG breakdown: preconditioned residual lost positivity", residuals)
        q = op.apply_f(direction, pool, deterministic)
        curvature = float(direction @ q)
        if curvature <= 0:
            logger.error(f"PCG breakdown at iteration {it}: p^T F p = {curvature:.3e}")
            raise ConvergenceError("PCG breakdown: dual operator lost positivity", residuals)
        step = rz / curvature
        lam += step * direction
        res -= step * q
        norm_res = float(np.linalg.norm(res))
        residuals.append(norm_res / ref)
        logger.debug(f"PCG iteration {it}: relative residual {norm_res / norm_d:.3e}")
        if norm_res <= tol * norm_d:
            return lam, residuals
        z = op.apply_preconditioner(res, pool, deterministic)
        rz_new = float(res @ z)
        direction = z + (rz_new / rz) * direction
        rz = rz_new
    raise ConvergenceError(f"IETI-DP did not converge in {max_it} iterations (residual {residuals[-1]:.3e})", residuals)


def _dual_pass(op, rhs, tol, max_it, pool, deterministic, norm_ref=None):
    """One dual solve; returns the assembled solution, the dual history, |d| and the jump of the local solutions."""
    f_r, f_pi = op.split_rhs(rhs)
    u_r, _ = op.apply_tilde_inverse(f_r, f_pi, pool)
    d = op._jump_of(u_r, pool, deterministic)
    lam, residuals = _pcg(op, d, tol, max_it, pool, deterministic, norm_ref)
    if op.n_lambda:
        f_r = [f - sd.jump.T @ lam for f, sd in zip(f_r, op.subdomains)]
    u_r, u_pi = op.apply_tilde_inverse(f_r, f_pi, pool)
    jump = op._jump_of(u_r, pool, deterministic)
    return op.assemble_solution(u_r, u_pi), residuals, float(np.linalg.norm(d)), jump


def _ieti_run(op, rhs, tol, max_it, pool, deterministic, workers) -> tuple[NDArray[np.float64], PcgLog]:
    """Dual solve plus correction passes on A x = b until |b - A x| <= tol |b|.

    Each correction pass solves for the current primal residual.
    """
    start = time.perf_counter()
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (op.n_free,):
        raise ContractError(f"Right-hand side must have length {op.n_free}, got {rhs.shape}")
    norm_b = float(np.linalg.norm(rhs))

    x = np.zeros(op.n_free)
    jump = np.zeros(op.n_lambda)
    history: list[float] = []
    d_ref: Optional[float] = None
    residual_rhs = rhs
    rel = 0.0
    refinements = 0
    while norm_b > 0:
        used = max(len(history) - 1, 0)
        try:
            dx, residuals, norm_d, dj = _dual_pass(
                op, residual_rhs, tol, max_it - used, pool, deterministic, d_ref
            )
        except ConvergenceError as e:
            raise ConvergenceError(e.message, history + (e.residuals[1:] if history else e.residuals))
        # correction passes continue the first history and drop their starting entry
        history.extend(residuals[1:] if history else residuals)
        if d_ref is None:
            d_ref = norm_d or None
        x += dx
        jump += dj
        if op.matrix is None:
            break
        residual_rhs = rhs - op.matrix @ x
        rel = float(np.linalg.norm(residual_rhs)) / norm_b
        if rel <= tol or refinements == MAX_REFINEMENTS:
            break
        refinements += 1
        logger.debug(f"IETI-DP: primal residual {rel:.3e} above {tol:.1e}, correction pass {refinements}")
    if rel > 10.0 * tol:
        raise ConvergenceError(
            f"IETI-DP primal residual {rel:.3e} stays above {10.0 * tol:.1e} after {refinements} correction(s)",
            history,
        )

    elapsed = time.perf_counter() - start
    log = PcgLog(
        solver="ieti",
        iterations=max(len(history) - 1, 0),
        residuals=history,
        wall_time=op.setup_time + elapsed,
        setup_time=op.setup_time,
        factor_time=op.factor_time,
        iterate_time=elapsed,
        factor_nnz=op.factor_nnz,
        peak_factor_nnz=op.peak_factor_nnz(workers),
        workers=workers,
        rel_residual=rel if op.matrix is not None else None,
        refinements=refinements,
        interface_jump=float(np.max(np.abs(jump))) if op.n_lambda else 0.0,
    )
    logger.info(
        f"IETI-DP solve: {log.iterations} iterations, {refinements} correction(s), "
        f"primal residual {rel:.2e}, {elapsed:.3f}s with {workers} worker(s)"
    )
    return x, log


def ieti_solve(
    op: IetiDpOperator, rhs: NDArray[np.float64], tol: float = 1e-8, max_it: int = 500
) -> tuple[NDArray[np.float64], PcgLog]:
    """Sequential PCG on the dual system; ``rhs`` and the result live in the reduced space."""
    return _ieti_run(op, rhs, tol, max_it, None, True, 1)


def solve_parallel(
    op: IetiDpOperator,
    rhs: NDArray[np.float64],
    tol: float = 1e-8,
    n_workers: int = 1,
    max_it: int = 500,
    deterministic: bool = True,
) -> tuple[NDArray[np.float64], PcgLog]:
    """As ieti_solve with subdomain work on a thread pool; reductions keep a fixed order when deterministic."""
    if n_workers <= 1:
        return ieti_solve(op, rhs, tol, max_it)
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return _ieti_run(op, rhs, tol, max_it, pool, deterministic, n_workers)


@dataclass(frozen=True)
class SolverOptions:
    solver: str = "direct"
    workers: int = 1
    tol: float = 1e-8
    max_iterations: int = 500
    n_subdomains: int = 0
    scaling: str = "multiplicity"
    deterministic: bool = True

    def __post_init__(self):
        if self.solver not in ("direct", "ieti"):
            raise ContractError(f"Unknown solver '{self.solver}'")
        if self.workers < 1:
            raise ContractError("workers must be at least 1")

    def subdomain_count(self, n_patches: int) -> int:
        wanted = self.n_subdomains or max(self.workers, 4)
        return max(1, min(wanted, n_patches))


class PreparedSolver:
    """A factorized system that can be solved for several right-hand sides."""

    def __init__(
        self,
        system: SparseSymmetricSystem,
        options: SolverOptions,
        domain: Optional[MultiPatchDomain] = None,
        dof_map: Optional[GlobalDofMap] = None,
        partition: Optional[Partition] = None,
    ):
        self.system = system
        self.options = options
        self.direct: Optional[DirectFactorization] = None
        self.operator: Optional[IetiDpOperator] = None
        start = time.perf_counter()
        if options.solver == "direct":
            self.direct = DirectFactorization.of(system.reduced)
        else:
            if domain is None or dof_map is None:
                raise ContractError("IETI-DP needs the domain and its dof map")
            partition = partition or partition_balanced(domain, dof_map, options.subdomain_count(domain.n_patches))
            self.operator = ieti_setup(system, domain, dof_map, partition, options.scaling, options.workers)
        self.setup_time = time.perf_counter() - start

    @property
    def factor_nnz(self) -> int:
        if self.direct is not None:
            return self.direct.factor_nnz
        return self.operator.factor_nnz if self.operator is not None else 0

    def solve(self, rhs: Optional[NDArray[np.float64]] = None) -> tuple[NDArray[np.float64], PcgLog]:
        b = self.system.reduced_rhs(rhs)
        if self.direct is not None:
            start = time.perf_counter()
            x = self.direct.solve(b)
            elapsed = time.perf_counter() - start
            log = PcgLog(
                solver="direct",
                wall_time=self.setup_time + elapsed,
                setup_time=self.setup_time,
                factor_time=self.setup_time,
                iterate_time=elapsed,
                factor_nnz=self.direct.factor_nnz,
                peak_factor_nnz=self.direct.factor_nnz,
            )
        else:
            opts = self.options
            x, log = solve_parallel(self.operator, b, opts.tol, opts.workers, opts.max_iterations, opts.deterministic)
        norm_b = float(np.linalg.norm(b))
        if norm_b > 0:
            log.rel_residual = float(np.linalg.norm(self.system.reduced @ x - b) / norm_b)
        else:
            log.rel_residual = 0.0
        return self.system.expand(x), log


def solve_system(
    system: SparseSymmetricSystem,
    options: SolverOptions,
    domain: Optional[MultiPatchDomain] = None,
    dof_map: Optional[GlobalDofMap] = None,
    rhs: Optional[NDArray[np.float64]] = None,
) -> tuple[NDArray[np.float64], PcgLog]:
    return PreparedSolver(system, options, domain, dof_map).solve(rhs)
