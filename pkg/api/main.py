from contextlib import asynccontextmanager

from fastapi import FastAPI

from api.config.logging import configure_logging, get_logger
from api.config.settings import settings
from api.controllers.simulation_controller import router as simulation_router


@asynccontextmanager
async def app_lifespan(_app: FastAPI):
    """Configure logging and initialize application."""
    configure_logging(settings.log_level)
    logger = get_logger("startup")
    logger.info("Application starting up")
    logger.info(f"Solver: {settings.solver}, workers: {settings.default_workers}, tol: {settings.tol:g}")
    yield


# Initialize FastAPI server
app = FastAPI(
    title="IgA Shape Optimization Service",
    version="0.1.0",
    description="Multipatch isogeometric magnetostatics with adjoint shape optimization",
    lifespan=app_lifespan,
)

app.include_router(simulation_router, tags=["Simulation"])


@app.get("/health", tags=["Health"])
def health():
    """Health check endpoint."""
    return {"status": "ok"}
