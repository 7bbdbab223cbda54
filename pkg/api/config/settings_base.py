from typing import Optional

try:
    from pydantic_settings import BaseSettings  # type: ignore
except ImportError:
    from pydantic import BaseSettings  # type: ignore


class AppSettings(BaseSettings):
    """Common application settings with sensible defaults."""

    solver: str = "direct"
    workers: int = 1
    # read from IGA_SHAPEOPT_THREADS; used when neither a flag nor the run config sets workers
    shapeopt_threads: Optional[int] = None
    tol: float = 1e-8
    max_solver_iterations: int = 500
    quadrature_extra: int = 0
    deterministic: bool = True
    n_subdomains: int = 0
    ieti_scaling: str = "multiplicity"
    output_dir: str = "out"
    log_level: str = "INFO"
    host: str = "0.0.0.0"
    port: int = 8000

    class Config:
        env_prefix = "IGA_"

    @property
    def default_workers(self) -> int:
        return self.shapeopt_threads or self.workers
