"""
Export Service - VTK and CSV writers for solutions, profiles and benchmarks.
"""

import csv
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from api.config.logging import get_logger
from api.services.assembly import AirGapProfile, PatchField, TargetFlux

logger = get_logger("service.export")

PROFILE_COLUMNS = ("s", "x", "y", "b_n", "b_d")
HISTORY_COLUMNS = ("iteration", "objective", "step", "gradient_norm", "shrink_count", "feasible")
BENCH_COLUMNS = (
    "dofs", "solver", "workers", "setup_s", "solve_s", "iterations", "rel_residual", "rate", "factor_nnz",
    "peak_factor_nnz",
)

PathLike = Union[str, Path]


def _prepare(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _fmt(value) -> str:
    """Exact text for floats, empty for missing values."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return "" if np.isnan(value) else repr(float(value))
    return str(value)


def write_csv(path: PathLike, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = _prepare(path)
    with open(path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(columns)
        count = 0
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
            count += 1
    logger.debug(f"Wrote {count} rows to {path}")
    return path


def write_vtk_patch(path: PathLike, field: PatchField, title: str = "iga field") -> Path:
    """Legacy ASCII structured grid of one patch with point scalars u and B_abs.

    The sample grid is stored with v varying fastest, so the grid dimensions
    are written as (n_v, n_u, 1).
    """
    n_u, n_v = field.shape
    path = _prepare(path)
    n_points = n_u * n_v
    with open(path, "w", encoding="utf-8") as fp:
        fp.write("# vtk DataFile Version 3.0\n")
        fp.write(f"{title}\n")
        fp.write("ASCII\nDATASET STRUCTURED_GRID\n")
        fp.write(f"DIMENSIONS {n_v} {n_u} 1\n")
        fp.write(f"POINTS {n_points} double\n")
        for x, y in field.points:
            fp.write(f"{x:.16e} {y:.16e} 0.0\n")
        fp.write(f"POINT_DATA {n_points}\n")
        for name, values in (("u", field.u), ("B_abs", field.b_abs)):
            fp.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for v in values:
                fp.write(f"{v:.16e}\n")
    return path


def write_vtk_fields(out_dir: PathLike, fields: Sequence[PatchField], prefix: str = "field") -> list[Path]:
    out_dir = Path(out_dir)
    paths = [write_vtk_patch(out_dir / f"{prefix}_patch{i:03d}.vtk", f, f"{prefix} patch {i}") for i, f in enumerate(fields)]
    logger.info(f"Wrote {len(paths)} VTK patch files to {out_dir}")
    return paths


def profile_rows(profile: AirGapProfile, target: Optional[TargetFlux]) -> list[tuple[float, float, float, float, float]]:
    b_d = target(profile.s) if target is not None else np.zeros_like(profile.s)
    return [
        (float(s), float(p[0]), float(p[1]), float(bn), float(bd))
        for s, p, bn, bd in zip(profile.s, profile.points, profile.b_n, b_d)
    ]


def write_profile_csv(path: PathLike, profile: AirGapProfile, target: Optional[TargetFlux]) -> Path:
    return write_csv(path, PROFILE_COLUMNS, profile_rows(profile, target))


def write_history_csv(path: PathLike, history: Sequence) -> Path:
    return write_csv(path, HISTORY_COLUMNS, (
        (h.iteration, h.objective, h.step, h.gradient_norm, h.shrink_count, h.feasible) for h in history
    ))


def write_bench_csv(path: PathLike, rows: Sequence[dict]) -> Path:
    return write_csv(path, BENCH_COLUMNS, ([row.get(c) for c in BENCH_COLUMNS] for row in rows))


def write_coefficients(path: PathLike, coeffs: NDArray[np.float64]) -> Path:
    return write_csv(path, ("dof", "u"), enumerate(np.asarray(coeffs, dtype=float)))
