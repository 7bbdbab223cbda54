"""
Simulation Controller - HTTP endpoint handlers.
"""

from fastapi import APIRouter, Depends, HTTPException

from api.config.logging import get_logger
from api.config.settings import settings
from api.models.schemas import GenerateRequest, GeometryFile, SimulateRequest, SimulationSummary
from api.services.benchmark_service import generate_benchmark
from api.services.errors import IgaError
from api.services.geometry_io import geometry_to_domain
from api.services.simulation_service import SimulationService

logger = get_logger("controller.simulation")
router = APIRouter()


def get_simulation_service() -> SimulationService:
    """Dependency: Get simulation service instance."""
    return SimulationService(settings)


def _http_error(e: IgaError) -> HTTPException:
    logger.warning(f"{type(e).__name__}: {e.message}")
    return HTTPException(status_code=e.status_code, detail=e.message)


@router.post("/simulate", response_model=SimulationSummary)
def simulate(
    req: SimulateRequest,
    service: SimulationService = Depends(get_simulation_service),
):
    """
    Solve the state problem for a posted geometry.

    Args:
        req: Geometry document, optional run config and manufactured flag
        service: Simulation service (injected)

    Returns:
        Objective, dof count, solver statistics and the air-gap profile

    Raises:
        HTTPException: status from the domain error (422 invalid input, 500 solver failure)
    """
    try:
        domain = geometry_to_domain(req.geometry)
        outcome = service.simulate(domain, req.config, manufactured=req.manufactured)
    except IgaError as e:
        raise _http_error(e) from e
    return service.summary(outcome)


@router.post("/generate", response_model=GeometryFile)
def generate(req: GenerateRequest):
    """Generate a benchmark geometry document."""
    try:
        return generate_benchmark(req.kind, req.level, req.n, req.degree)
    except IgaError as e:
        raise _http_error(e) from e
