from typing import Any, Dict, List, Literal, Optional, Type, TypeVar

try:
    # Pydantic v2
    from pydantic import BaseModel, Field, ConfigDict
    HAS_V2 = True
except ImportError:
    # Pydantic v1 fallback
    from pydantic import BaseModel, Field  # type: ignore
    HAS_V2 = False

ModelT = TypeVar("ModelT", bound=BaseModel)


class StrictModel(BaseModel):
    """Base for file documents: unknown keys are errors, not silently dropped."""

    if HAS_V2:
        model_config = ConfigDict(extra="forbid", protected_namespaces=())
    else:
        class Config:
            # for Pydantic v1
            extra = "forbid"


class PatchSchema(StrictModel):
    degree_u: int = Field(ge=0)
    degree_v: int = Field(ge=0)
    knots_u: List[float]
    knots_v: List[float]
    # row-major over (u, v): index i * n_v + j
    control_points: List[List[float]]


class MaterialSchema(StrictModel):
    patch: int = Field(ge=0)
    kind: Literal["Ferromagnetic", "Air", "Magnet", "AirGap"]
    reluctivity: float = Field(gt=0)
    magnetization: Optional[List[float]] = None


class SideRef(StrictModel):
    patch: int = Field(ge=0)
    side: int = Field(ge=0, le=3)


class AirGapSegmentSchema(StrictModel):
    patch: int = Field(ge=0)
    axis: int = Field(ge=0, le=1)
    iso: float
    start: float
    end: float


class AirGapSchema(StrictModel):
    segments: List[AirGapSegmentSchema]


class GeometryFile(StrictModel):
    version: int = 1
    patches: List[PatchSchema]
    materials: List[MaterialSchema]
    dirichlet: List[SideRef] = Field(default_factory=list)
    design: List[int] = Field(default_factory=list)
    airgap: Optional[AirGapSchema] = None


class OptimizerBlock(StrictModel):
    algorithm: Literal["steepest_descent", "bfgs"] = "steepest_descent"
    nlp_tol: float = Field(1e-6, gt=0)
    objective_rel_tol: float = Field(1e-6, gt=0)
    patience: int = Field(3, ge=1)
    max_iterations: int = Field(50, ge=0)
    initial_step: float = Field(1.0, gt=0)
    step_shrink: float = Field(0.5, gt=0, lt=1)
    max_shrinks: int = Field(30, ge=0)
    bound_relax: float = Field(0.0, ge=0)
    bound_radius: float = Field(0.1, gt=0)
    max_displacement: float = Field(0.1, gt=0)
    design_mode: Literal["global", "interface"] = "global"
    memory: int = Field(5, ge=1)


class TargetFluxSpec(StrictModel):
    """B_d along the air gap; ``four_pole`` without amplitude is calibrated on the initial design."""

    kind: Literal["four_pole", "constant", "fourier"] = "four_pole"
    amplitude: Optional[float] = None
    value: float = 0.0
    cos: List[float] = Field(default_factory=list)
    sin: List[float] = Field(default_factory=list)
    period: Optional[float] = Field(None, gt=0)


class RunConfig(StrictModel):
    """Per-run settings; unset fields fall back to the application settings."""

    solver: Optional[Literal["direct", "ieti"]] = None
    workers: Optional[int] = Field(None, ge=1)
    tol: Optional[float] = Field(None, gt=0)
    max_solver_iterations: Optional[int] = Field(None, ge=1)
    quadrature_order: Optional[int] = Field(None, ge=1)
    n_subdomains: Optional[int] = Field(None, ge=0)
    scaling: Optional[Literal["multiplicity", "coefficient"]] = None
    deterministic: Optional[bool] = None
    optimizer: OptimizerBlock = Field(default_factory=OptimizerBlock)
    target: TargetFluxSpec = Field(default_factory=TargetFluxSpec)
    # scalar or one value per patch; None means squared patch diameters
    alpha: Optional[Any] = None
    current_density: List[float] = Field(default_factory=list)
    output_dir: Optional[str] = None
    sample_grid: int = Field(10, ge=2)
    bench_repeats: int = Field(3, ge=1)
    # None: doubling counts up to IGA_SHAPEOPT_THREADS (or IGA_WORKERS), 1, 2, 4 when neither is set
    bench_workers: Optional[List[int]] = None


class SimulateRequest(StrictModel):
    geometry: GeometryFile
    config: Optional[RunConfig] = None
    manufactured: bool = False


class ProfilePoint(BaseModel):
    s: float
    x: float
    y: float
    b_n: float
    b_d: float


class SimulationSummary(BaseModel):
    objective: Optional[float] = None
    n_dofs: int
    solver: str
    iterations: int = 0
    rel_residual: Optional[float] = None
    l2_error: Optional[float] = None
    profile: List[ProfilePoint] = Field(default_factory=list)


class GenerateRequest(StrictModel):
    kind: Literal["motor_like", "square_grid"]
    level: int = Field(0, ge=0)
    n: int = Field(2, ge=1)
    degree: int = Field(1, ge=1)


def parse_model(cls: Type[ModelT], data: Any) -> ModelT:
    if HAS_V2:
        return cls.model_validate(data)
    return cls.parse_obj(data)  # type: ignore[attr-defined]


def dump_model(model: BaseModel, exclude_none: bool = False) -> Dict[str, Any]:
    if HAS_V2:
        return model.model_dump(exclude_none=exclude_none)
    return model.dict(exclude_none=exclude_none)  # type: ignore[attr-defined]
