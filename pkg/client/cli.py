"""
Command-line entry point: generate, simulate, optimize and bench.

Exit codes: 0 success, 1 violated precondition, 2 parse/config, 3 topology,
4 geometry, 5 solver, 6 infeasible line search.
"""

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from api.config.logging import configure_logging, get_logger
from api.config.settings import AppSettings, get_settings
from api.models.schemas import RunConfig
from api.services.benchmark_service import KINDS, generate_benchmark
from api.services.errors import ContractError, IgaError, OptimizationFailed
from api.services.geometry_io import (
    geometry_json,
    geometry_to_domain,
    load_geometry,
    load_run_config,
    save_geometry,
)
from api.services.simulation_service import BenchService, OptimizationService, SimulationService

logger = get_logger("cli")


def _parse_workers(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid worker list '{text}'")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"worker counts must be positive, got '{text}'")
    return values


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--geometry", required=True, help="Geometry JSON file")
    p.add_argument("--config", default=None, help="Run config JSON file")
    p.add_argument("--out", default=None, help="Output directory")
    p.add_argument("--solver", choices=["direct", "ieti"], default=None)
    p.add_argument("--workers", type=_parse_workers, default=None, help="Worker count, or comma list for bench")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="Fixed-order reductions in the parallel solver")
    p.add_argument("--seed", type=int, default=None, help="Seed for numpy's global generator")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iga-shapeopt", description="Multipatch IgA magnetostatics and shape optimization")
    ap.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Solve the state problem and export fields")
    _add_run_args(p)
    p.add_argument("--manufactured", action="store_true",
                   help="Use the sin(pi x) sin(pi y) forcing and print the L2 error")

    p = sub.add_parser("optimize", help="Run the shape optimizer")
    _add_run_args(p)

    p = sub.add_parser("bench", help="Strong-scaling benchmark of the solvers")
    _add_run_args(p)

    p = sub.add_parser("generate", help="Write a benchmark geometry")
    p.add_argument("--kind", choices=list(KINDS), required=True)
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--n", type=int, default=2, help="Patches per direction for square_grid")
    p.add_argument("--degree", type=int, default=1, help="Spline degree for square_grid")
    p.add_argument("--out", default=None, help="Output file; stdout when omitted")
    return ap


def _overrides(args: argparse.Namespace, single_worker: bool = True) -> dict:
    workers = args.workers
    if workers is not None and single_worker:
        if len(workers) != 1:
            raise ContractError("--workers takes a single count for this command")
        workers = workers[0]
    return {
        "solver": args.solver,
        "workers": workers if single_worker else None,
        "deterministic": args.deterministic,
    }


def _out_dir(args: argparse.Namespace, config: RunConfig, settings: AppSettings) -> Path:
    return Path(args.out or config.output_dir or settings.output_dir)


def _load(args: argparse.Namespace):
    config = load_run_config(args.config)
    domain = geometry_to_domain(load_geometry(args.geometry))
    if args.seed is not None:
        np.random.seed(args.seed)
    return domain, config


def cmd_simulate(args: argparse.Namespace, settings: AppSettings) -> int:
    domain, config = _load(args)
    service = SimulationService(settings)
    outcome = service.simulate(domain, config, _overrides(args), manufactured=args.manufactured)
    out = _out_dir(args, config, settings)
    service.write_outputs(outcome, out, config.sample_grid)
    print(f"dofs={outcome.dof_map.n_global} solver={outcome.log.solver} iterations={outcome.log.iterations}")
    if outcome.objective is not None:
        print(f"J={outcome.objective:.12e}")
    if outcome.l2_error is not None:
        print(f"L2_error={outcome.l2_error:.12e}")
    return 0


def cmd_optimize(args: argparse.Namespace, settings: AppSettings) -> int:
    domain, config = _load(args)
    service = OptimizationService(settings)
    out = _out_dir(args, config, settings)
    try:
        result = service.optimize(domain, config, _overrides(args))
    except OptimizationFailed as e:
        service.write_failure(e, out)
        raise
    service.write_outputs(result, out)
    print(f"J_initial={result.initial.objective:.12e} J_final={result.final.objective:.12e} "
          f"iterations={result.accepted_iterations} reason={result.reason}")
    return 0


def cmd_bench(args: argparse.Namespace, settings: AppSettings) -> int:
    domain, config = _load(args)
    service = BenchService(settings)
    rows = service.bench(domain, config, args.workers, _overrides(args, single_worker=False))
    path = service.write_outputs(rows, _out_dir(args, config, settings))
    for row in rows:
        rate = "--" if row["rate"] is None else f"{row['rate']:.2f}"
        print(f"{row['solver']:>6} workers={row['workers']} setup={row['setup_s']:.3f}s "
              f"solve={row['solve_s']:.3f}s iterations={row['iterations']} rate={rate}")
    logger.info(f"Bench table written to {path}")
    return 0


def cmd_generate(args: argparse.Namespace, settings: AppSettings) -> int:
    doc = generate_benchmark(args.kind, args.level, args.n, args.degree)
    if args.out:
        save_geometry(doc, args.out)
    else:
        print(geometry_json(doc))
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "bench": cmd_bench,
    "generate": cmd_generate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    configure_logging(args.log_level or settings.log_level)
    try:
        return COMMANDS[args.command](args, settings)
    except IgaError as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        print(f"error: {e.message}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
