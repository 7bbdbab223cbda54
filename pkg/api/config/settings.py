"""
Settings resolution: APP_ENV picks one of the environment modules, IGA_* variables override fields.

The resolved instance goes through check_settings before it is cached.
"""

import importlib
import os
import sys
from functools import lru_cache
from typing import Dict

from api.services.errors import ConfigurationError

from . import settings_base as _settings_base

if "api.config.settings_base" in sys.modules:
    _settings_base = importlib.reload(_settings_base)

AppSettings = _settings_base.AppSettings

SOLVERS = ("direct", "ieti")
SCALINGS = ("multiplicity", "coefficient")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

_SETTINGS_MODULES: Dict[str, str] = {
    "dev": "api.config.settings_dev",
    "qa": "api.config.settings_qa",
    "prod": "api.config.settings_prod",
}


def check_settings(resolved: AppSettings) -> AppSettings:
    """Reject values the solvers cannot run with.

    Raises:
        ConfigurationError: unknown solver, scaling or log level, or a non-positive count
    """
    problems = []
    if resolved.solver not in SOLVERS:
        problems.append(f"IGA_SOLVER must be one of {SOLVERS}, got '{resolved.solver}'")
    if resolved.ieti_scaling not in SCALINGS:
        problems.append(f"IGA_IETI_SCALING must be one of {SCALINGS}, got '{resolved.ieti_scaling}'")
    if str(resolved.log_level).upper() not in LOG_LEVELS:
        problems.append(f"IGA_LOG_LEVEL '{resolved.log_level}' is not a logging level")
    if resolved.workers < 1:
        problems.append(f"IGA_WORKERS must be at least 1, got {resolved.workers}")
    if resolved.shapeopt_threads is not None and resolved.shapeopt_threads < 1:
        problems.append(f"IGA_SHAPEOPT_THREADS must be at least 1, got {resolved.shapeopt_threads}")
    if not resolved.tol > 0:
        problems.append(f"IGA_TOL must be positive, got {resolved.tol}")
    if resolved.max_solver_iterations < 1:
        problems.append(f"IGA_MAX_SOLVER_ITERATIONS must be at least 1, got {resolved.max_solver_iterations}")
    if resolved.quadrature_extra < 0 or resolved.n_subdomains < 0:
        problems.append("IGA_QUADRATURE_EXTRA and IGA_N_SUBDOMAINS must be non-negative")
    if problems:
        raise ConfigurationError("; ".join(problems))
    return resolved


def _load_settings(env: str) -> AppSettings:
    module_path = _SETTINGS_MODULES.get(env)
    if module_path is None:
        available = ", ".join(sorted(_SETTINGS_MODULES))
        raise ValueError(f"Unsupported APP_ENV '{env}'. Choose one of: {available}.")

    # reload so IGA_* variables set after the first import are honored
    module = importlib.reload(importlib.import_module(module_path))
    env_settings = getattr(module, "settings", None)
    if not isinstance(env_settings, AppSettings):
        raise TypeError(f"Module '{module_path}' must expose a 'settings' instance of AppSettings.")
    return check_settings(env_settings)


@lru_cache(maxsize=None)
def get_settings(env: str | None = None) -> AppSettings:
    """Settings for ``env``, or for APP_ENV (dev when unset)."""
    return _load_settings((env or os.getenv("APP_ENV") or "dev").lower())


settings = get_settings()
