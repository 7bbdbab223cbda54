"""
Geometry IO - JSON geometry and run-config documents.

Parsing is two-staged: the pydantic schema checks the document layout, then
the spline and topology constructors check the numbers. Errors from either
stage are reported as ParseError addressed by field path.
"""

import json
from pathlib import Path
from typing import Optional, Type, TypeVar, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from api.config.logging import get_logger
from api.models.schemas import (
    AirGapSchema,
    AirGapSegmentSchema,
    GeometryFile,
    MaterialSchema,
    PatchSchema,
    RunConfig,
    SideRef,
    dump_model,
    parse_model,
)
from api.services.errors import ConfigurationError, GeometryError, ParseError
from api.services.multipatch_topology import (
    AirGapCurve,
    AirGapSegment,
    MaterialTag,
    MultiPatchDomain,
    build_topology,
)
from api.services.spline_geometry import KnotVector, Patch

logger = get_logger("service.geometry_io")

GEOMETRY_VERSION = 1

DocT = TypeVar("DocT", bound=BaseModel)


def _format_validation(exc: ValidationError, source: str) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err.get("loc", ()))
        parts.append(f"{loc}: {err.get('msg', 'invalid value')}")
    return f"{source}: " + "; ".join(parts)


def _parse_document(cls: Type[DocT], text: str, source: str) -> DocT:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{source}:{e.lineno}:{e.colno}: {e.msg}") from e
    try:
        return parse_model(cls, data)
    except ValidationError as e:
        raise ParseError(_format_validation(e, source)) from e


def _read_text(path: Union[str, Path]) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"Cannot read {path}: {e.strerror or e}") from e


def parse_geometry(text: str, source: str = "<geometry>") -> GeometryFile:
    """Parse a geometry document from JSON text.

    Raises:
        ParseError: malformed JSON (with line and column) or a schema violation
    """
    doc = _parse_document(GeometryFile, text, source)
    if doc.version != GEOMETRY_VERSION:
        raise ParseError(f"{source}: version: unsupported geometry version {doc.version}")
    return doc


def load_geometry(path: Union[str, Path]) -> GeometryFile:
    return parse_geometry(_read_text(path), str(path))


def load_run_config(path: Optional[Union[str, Path]]) -> RunConfig:
    if path is None:
        return RunConfig()
    return _parse_document(RunConfig, _read_text(path), str(path))


def _build_patch(i: int, spec: PatchSchema) -> Patch:
    try:
        kv_u = KnotVector(spec.degree_u, np.asarray(spec.knots_u, dtype=float))
        kv_v = KnotVector(spec.degree_v, np.asarray(spec.knots_v, dtype=float))
        cps = np.asarray(spec.control_points, dtype=float)
        if cps.ndim != 2 or cps.shape[1] != 2:
            raise GeometryError(f"control points must be pairs, got shape {cps.shape}")
        if not np.all(np.isfinite(cps)):
            raise GeometryError("control points must be finite")
        return Patch.from_net(kv_u, kv_v, cps)
    except (GeometryError, ValueError) as e:
        raise ParseError(f"patches.{i}: {e}") from e


def _build_materials(doc: GeometryFile) -> list[MaterialTag]:
    n = len(doc.patches)
    tags: list[Optional[MaterialTag]] = [None] * n
    for i, spec in enumerate(doc.materials):
        if spec.patch >= n:
            raise ParseError(f"materials.{i}.patch: no patch {spec.patch}")
        if tags[spec.patch] is not None:
            raise ParseError(f"materials.{i}.patch: patch {spec.patch} already has a material")
        try:
            tags[spec.patch] = MaterialTag(spec.kind, spec.reluctivity, spec.magnetization)  # type: ignore[arg-type]
        except ConfigurationError as e:
            raise ParseError(f"materials.{i}: {e}") from e
    missing = [p for p, tag in enumerate(tags) if tag is None]
    if missing:
        raise ParseError(f"materials: patches {missing} have no material")
    return [tag for tag in tags if tag is not None]


def geometry_to_domain(doc: GeometryFile) -> MultiPatchDomain:
    """Build the multipatch domain described by a parsed document.

    Raises:
        ParseError: inconsistent numbers inside the document
        TopologyError: sides that touch without matching
        ConfigurationError: an invalid air-gap curve
    """
    patches = [_build_patch(i, spec) for i, spec in enumerate(doc.patches)]
    materials = _build_materials(doc)
    bad_design = [d for d in doc.design if not 0 <= d < len(patches)]
    if bad_design:
        raise ParseError(f"design: no patches {bad_design}")
    curve = None
    if doc.airgap is not None:
        for i, seg in enumerate(doc.airgap.segments):
            if seg.patch >= len(patches):
                raise ParseError(f"airgap.segments.{i}.patch: no patch {seg.patch}")
        curve = AirGapCurve(tuple(
            AirGapSegment(s.patch, s.axis, s.iso, s.start, s.end) for s in doc.airgap.segments
        ))
    domain = build_topology(
        patches,
        materials,
        [(d.patch, d.side) for d in doc.dirichlet],
        doc.design,
        curve,
    )
    logger.debug(f"Loaded domain with {domain.n_patches} patches and {len(domain.interfaces)} interfaces")
    return domain


def domain_to_geometry(domain: MultiPatchDomain) -> GeometryFile:
    """Serialize a domain; floats are carried unchanged."""
    patches = [
        PatchSchema(
            degree_u=p.kv_u.degree,
            degree_v=p.kv_v.degree,
            knots_u=p.kv_u.knots.tolist(),
            knots_v=p.kv_v.knots.tolist(),
            control_points=p.control_points.tolist(),
        )
        for p in domain.patches
    ]
    materials = [
        MaterialSchema(
            patch=i,
            kind=m.kind.value,
            reluctivity=m.reluctivity,
            magnetization=list(m.magnetization) if m.magnetization is not None else None,
        )
        for i, m in enumerate(domain.materials)
    ]
    airgap = None
    if domain.airgap_curve is not None:
        airgap = AirGapSchema(segments=[
            AirGapSegmentSchema(patch=s.patch, axis=s.axis, iso=s.iso, start=s.start, end=s.end)
            for s in domain.airgap_curve.segments
        ])
    return GeometryFile(
        version=GEOMETRY_VERSION,
        patches=patches,
        materials=materials,
        dirichlet=[SideRef(patch=p, side=s) for p, s in domain.dirichlet_sides],
        design=sorted(domain.design_patches),
        airgap=airgap,
    )


def geometry_json(doc: GeometryFile) -> str:
    return json.dumps(dump_model(doc, exclude_none=True), indent=2)


def save_geometry(doc: Union[GeometryFile, MultiPatchDomain], path: Union[str, Path]) -> Path:
    if isinstance(doc, MultiPatchDomain):
        doc = domain_to_geometry(doc)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(geometry_json(doc) + "\n", encoding="utf-8")
    logger.info(f"Wrote geometry with {len(doc.patches)} patches to {path}")
    return path
