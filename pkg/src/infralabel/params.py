"""Tunable parameters for every pipeline stage, plus dict (de)serialization.

All of these live in the scenario document; ``from_doc`` enforces field
types and reports the dotted path of anything wrong.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any


class ScenarioError(ValueError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


class SchemaError(ScenarioError):
    """A field is missing, unknown, or has the wrong type."""


class ValidationError(ScenarioError):
    """A field is well-typed but violates an invariant."""


Region = tuple[tuple[float, float], tuple[float, float]]


@dataclass(frozen=True)
class DiscoveryParams:
    num_segments: int = 10
    pp_radius: float = 0.3
    pp_threshold: float = 0.5
    pp_voxel: float = 0.0
    dbscan_eps: float = 0.3
    dbscan_min_pts: int = 2
    min_box_points: int = 5
    volume_range: tuple[float, float] = (0.5, 20.0)
    top_min: float = 0.5
    bottom_max: float = 2.5
    track_gate: float = 2.0
    track_min_len: int = 3
    track_refine: bool = True
    ransac_iterations: int = 200
    ransac_threshold: float = 0.15
    ground_percentile: float = 30.0
    score_points: int = 50

    def validate(self, path: str = "discovery") -> None:
        if self.num_segments < 2:
            raise ValidationError(f"{path}.num_segments", "must be >= 2")
        for name in ("pp_radius", "dbscan_eps", "track_gate", "ransac_threshold"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{path}.{name}", "must be positive")
        if not 0.0 <= self.pp_voxel < self.pp_radius:
            raise ValidationError(f"{path}.pp_voxel", "must lie in [0, pp_radius)")
        if not 0.0 <= self.pp_threshold <= 1.0:
            raise ValidationError(f"{path}.pp_threshold", "must lie in [0, 1]")
        lo, hi = self.volume_range
        if not 0 <= lo < hi:
            raise ValidationError(f"{path}.volume_range", "need 0 <= low < high")
        if self.dbscan_min_pts < 1 or self.min_box_points < 1 or self.track_min_len < 1:
            raise ValidationError(path, "point/length minimums must be >= 1")


@dataclass(frozen=True)
class ChannelParams:
    d_max: float = 160.0
    sigma_pos: float = 0.2
    sigma_yaw: float = 0.05
    delay: float = 0.1
    noise_enabled: bool = True

    def validate(self, path: str = "channel") -> None:
        if not self.d_max > 0:
            raise ValidationError(f"{path}.d_max", "must be positive")
        if self.sigma_pos < 0 or self.sigma_yaw < 0:
            raise ValidationError(path, "sigmas must be >= 0")
        if self.delay < 0:
            raise ValidationError(f"{path}.delay", "must be >= 0")

    def delay_frames(self, frame_rate: float) -> int:
        return int(round(self.delay * frame_rate))


@dataclass(frozen=True)
class ClassTemplate:
    label: str
    size: tuple[float, float, float]

    def __post_init__(self) -> None:
        if not all(v > 0 for v in self.size):
            raise ValueError(f"template {self.label} needs positive dims")


DEFAULT_TEMPLATES = (
    ClassTemplate("Car", (3.99, 1.89, 1.59)),
    ClassTemplate("Pedestrian", (0.50, 0.50, 1.80)),
    ClassTemplate("Cyclist", (1.80, 0.60, 1.70)),
)


@dataclass(frozen=True)
class RefineParams:
    enabled: bool = False
    grid_radius: float = 0.4
    grid_step: float = 0.1
    boundary_weight: float = 0.5
    boundary_eps: float = 0.1
    min_points: int = 5

    def grid(self) -> list[tuple[float, float]]:
        n = int(round(self.grid_radius / self.grid_step))
        steps = [round(i * self.grid_step, 10) for i in range(-n, n + 1)]
        return [(dx, dy) for dx in steps for dy in steps]


@dataclass(frozen=True)
class PipelineParams:
    discovery: DiscoveryParams = field(default_factory=DiscoveryParams)
    refine: RefineParams = field(default_factory=RefineParams)
    templates: tuple[ClassTemplate, ...] = DEFAULT_TEMPLATES
    class_cutoff: float = 3.0
    nms_iou: float = 0.1
    ego_min_points: int = 1
    ego_region: Region = ((-80.0, 80.0), (-40.0, 40.0))
    rsu_region: Region = ((-80.0, 80.0), (-80.0, 80.0))

    def validate(self, path: str = "pipeline") -> None:
        self.discovery.validate(f"{path}.discovery")
        if not self.templates:
            raise ValidationError(f"{path}.templates", "need at least one template")
        if not 0 <= self.nms_iou <= 1:
            raise ValidationError(f"{path}.nms_iou", "must lie in [0, 1]")
        if self.refine.grid_step <= 0 or self.refine.grid_radius < 0:
            raise ValidationError(f"{path}.refine", "grid radius/step invalid")
        for name in ("ego_region", "rsu_region"):
            (x0, x1), (y0, y1) = getattr(self, name)
            if not (x0 < x1 and y0 < y1):
                raise ValidationError(f"{path}.{name}", "empty region")


# -- generic dict <-> dataclass ----------------------------------------------------


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _coerce(value: Any, default: Any, path: str) -> Any:
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise SchemaError(path, "expected an object")
        return from_doc(type(default), value, path)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise SchemaError(path, "expected a boolean")
        return value
    if isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise SchemaError(path, "expected an integer")
        return value
    if isinstance(default, float):
        if not _is_number(value):
            raise SchemaError(path, "expected a number")
        if not math.isfinite(value):
            raise ValidationError(path, "must be finite")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise SchemaError(path, "expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise SchemaError(path, f"expected a list of length {len(default)}")
        return tuple(_coerce(v, d, f"{path}[{i}]") for i, (v, d) in enumerate(zip(value, default)))
    raise SchemaError(path, f"unsupported field type {type(default).__name__}")


def parse_templates(value: Any, path: str) -> tuple[ClassTemplate, ...]:
    if not isinstance(value, list):
        raise SchemaError(path, "expected a list of templates")
    out = []
    for i, item in enumerate(value):
        p = f"{path}[{i}]"
        if not isinstance(item, dict) or "class" not in item or "size" not in item:
            raise SchemaError(p, "template needs 'class' and 'size'")
        label = item["class"]
        if label not in ("Car", "Pedestrian", "Cyclist"):
            raise ValidationError(f"{p}.class", f"unknown class {label!r}")
        size = _coerce(item["size"], (0.0, 0.0, 0.0), f"{p}.size")
        if not all(v > 0 for v in size):
            raise ValidationError(f"{p}.size", "dimensions must be positive")
        out.append(ClassTemplate(label, size))
    return tuple(out)


def from_doc(cls, doc: dict, path: str):
    """Build dataclass ``cls`` from ``doc``, filling defaults for absent keys."""
    if not isinstance(doc, dict):
        raise SchemaError(path, "expected an object")
    proto = cls() if cls is not ClassTemplate else None
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        sub = f"{path}.{key}"
        if key not in names:
            raise SchemaError(sub, "unknown field")
        if key == "templates":
            kwargs[key] = parse_templates(value, sub)
        else:
            kwargs[key] = _coerce(value, getattr(proto, key), sub)
    return cls(**kwargs)


def to_doc(obj) -> Any:
    if isinstance(obj, ClassTemplate):
        return {"class": obj.label, "size": list(obj.size)}
    if dataclasses.is_dataclass(obj):
        return {f.name: to_doc(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [to_doc(v) for v in obj]
    return obj


def params_hash(obj) -> str:
    blob = json.dumps(to_doc(obj), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
