"""Scenario document loading and validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..geom import OrientedBox, Pose
from ..params import (
    ChannelParams,
    PipelineParams,
    SchemaError,
    ValidationError,
    from_doc,
)

ACTOR_CLASSES = ("Car", "Pedestrian", "Cyclist")

# Prototype sizes of simulator actors; the class templates mirror these.
DEFAULT_ACTOR_SIZE = {
    "Car": (3.99, 1.89, 1.59),
    "Pedestrian": (0.50, 0.50, 1.80),
    "Cyclist": (1.80, 0.60, 1.70),
}

# Lowest slice of an actor box that rays pass through (vehicle underbody,
# gaps between legs/wheels). Ground truth boxes still rest on z=0.
DEFAULT_CLEARANCE = 0.35

RSU_DEFAULTS = dict(mount_height=7.5, beams=128, azimuth_steps=900, vfov=(-45.0, 5.0),
                    max_range=120.0, range_noise_sigma=0.01)
EGO_DEFAULTS = dict(mount_height=1.8, beams=64, azimuth_steps=900, vfov=(-25.0, 5.0),
                    max_range=120.0, range_noise_sigma=0.01)


@dataclass(frozen=True)
class Actor:
    id: int
    label: str
    size: tuple[float, float, float]
    waypoints: tuple[tuple[int, float, float], ...]
    clearance: float = DEFAULT_CLEARANCE

    @property
    def first_frame(self) -> int:
        return self.waypoints[0][0]

    @property
    def last_frame(self) -> int:
        return self.waypoints[-1][0]


@dataclass(frozen=True)
class SensorRig:
    sensor_id: str
    mount_height: float
    beams: int
    azimuth_steps: int
    vfov: tuple[float, float]
    max_range: float
    range_noise_sigma: float
    elevations: tuple[float, ...] | None = None

    def beam_key(self) -> tuple:
        return (self.beams, self.azimuth_steps, self.vfov, self.elevations)


@dataclass(frozen=True)
class RSU:
    rig: SensorRig
    x: float
    y: float
    yaw: float = 0.0

    @property
    def sensor_id(self) -> str:
        return self.rig.sensor_id

    @property
    def pose(self) -> Pose:
        return Pose(self.x, self.y, self.rig.mount_height, self.yaw)


@dataclass(frozen=True)
class Ego:
    rig: SensorRig
    waypoints: tuple[tuple[int, float, float], ...]

    @property
    def sensor_id(self) -> str:
        return self.rig.sensor_id


@dataclass
class Scenario:
    seed: int
    num_frames: int
    actors: list[Actor]
    static_boxes: list[OrientedBox]
    rsus: list[RSU]
    ego: Ego | None
    frame_rate: float = 10.0
    channel: ChannelParams = field(default_factory=ChannelParams)
    pipeline: PipelineParams = field(default_factory=PipelineParams)
    name: str = ""

    def rsu(self, sensor_id: str) -> RSU:
        for r in self.rsus:
            if r.sensor_id == sensor_id:
                return r
        raise KeyError(sensor_id)

    @property
    def sensor_ids(self) -> list[str]:
        ids = [r.sensor_id for r in self.rsus]
        if self.ego is not None:
            ids.append(self.ego.sensor_id)
        return ids


# -- parsing helpers ------------------------------------------------------------------


def _require(doc: dict, key: str, path: str) -> Any:
    if key not in doc:
        raise SchemaError(f"{path}.{key}", "missing required field")
    return doc[key]


def _number(v: Any, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(path, "expected a number")
    return float(v)


def _integer(v: Any, path: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise SchemaError(path, "expected an integer")
    return v


def _check_keys(doc: dict, allowed: set[str], path: str) -> None:
    if not isinstance(doc, dict):
        raise SchemaError(path, "expected an object")
    for k in doc:
        if k not in allowed:
            raise SchemaError(f"{path}.{k}", "unknown field")


def _waypoints(value: Any, path: str, num_frames: int) -> tuple[tuple[int, float, float], ...]:
    if not isinstance(value, list) or not value:
        raise SchemaError(path, "expected a non-empty list of [frame, x, y]")
    out = []
    for i, wp in enumerate(value):
        p = f"{path}[{i}]"
        if not isinstance(wp, list) or len(wp) != 3:
            raise SchemaError(p, "expected [frame, x, y]")
        out.append((_integer(wp[0], f"{p}[0]"), _number(wp[1], f"{p}[1]"), _number(wp[2], f"{p}[2]")))
    frames = [w[0] for w in out]
    if any(b <= a for a, b in zip(frames, frames[1:])):
        raise ValidationError(path, "waypoint frames must be strictly increasing")
    if frames[0] < 0 or frames[-1] >= num_frames:
        raise ValidationError(path, f"waypoint frames must lie in [0, {num_frames})")
    return tuple(out)


_RIG_KEYS = {"sensor_id", "mount_height", "beams", "azimuth_steps", "vfov", "max_range",
             "range_noise_sigma", "elevations"}


def _rig(doc: dict, path: str, defaults: dict) -> SensorRig:
    sid = _require(doc, "sensor_id", path)
    if not isinstance(sid, str) or not sid or "/" in sid:
        raise SchemaError(f"{path}.sensor_id", "expected a non-empty string without '/'")
    vals = dict(defaults)
    for key in ("mount_height", "max_range", "range_noise_sigma"):
        if key in doc:
            vals[key] = _number(doc[key], f"{path}.{key}")
    for key in ("beams", "azimuth_steps"):
        if key in doc:
            vals[key] = _integer(doc[key], f"{path}.{key}")
    if "vfov" in doc:
        v = doc["vfov"]
        if not isinstance(v, list) or len(v) != 2:
            raise SchemaError(f"{path}.vfov", "expected [min_deg, max_deg]")
        vals["vfov"] = (_number(v[0], f"{path}.vfov[0]"), _number(v[1], f"{path}.vfov[1]"))
    if "elevations" in doc:
        ev = doc["elevations"]
        if not isinstance(ev, list) or not ev:
            raise SchemaError(f"{path}.elevations", "expected a non-empty list of degrees")
        els = tuple(sorted(_number(v, f"{path}.elevations[{i}]") for i, v in enumerate(ev)))
        if "beams" in doc and doc["beams"] != len(els):
            raise ValidationError(f"{path}.beams", "must equal len(elevations)")
        vals.update(elevations=els, beams=len(els), vfov=(els[0], els[-1]))
    rig = SensorRig(sensor_id=sid, **vals)
    if rig.beams < 1:
        raise ValidationError(f"{path}.beams", "must be >= 1")
    if rig.azimuth_steps < 1:
        raise ValidationError(f"{path}.azimuth_steps", "must be >= 1")
    if not rig.max_range > 0:
        raise ValidationError(f"{path}.max_range", "must be positive")
    if rig.range_noise_sigma < 0:
        raise ValidationError(f"{path}.range_noise_sigma", "must be >= 0")
    if not -90.0 <= rig.vfov[0] <= rig.vfov[1] <= 90.0:
        raise ValidationError(f"{path}.vfov", "need -90 <= min <= max <= 90")
    if rig.mount_height <= 0:
        raise ValidationError(f"{path}.mount_height", "must be positive")
    return rig


def _actor(doc: dict, path: str, num_frames: int) -> Actor:
    _check_keys(doc, {"id", "class", "size", "waypoints", "clearance"}, path)
    aid = _integer(_require(doc, "id", path), f"{path}.id")
    if aid <= 0:
        raise ValidationError(f"{path}.id", "actor ids must be positive")
    label = _require(doc, "class", path)
    if label not in ACTOR_CLASSES:
        raise ValidationError(f"{path}.class", f"must be one of {ACTOR_CLASSES}")
    size = DEFAULT_ACTOR_SIZE[label]
    if "size" in doc:
        s = doc["size"]
        if not isinstance(s, list) or len(s) != 3:
            raise SchemaError(f"{path}.size", "expected [length, width, height]")
        size = tuple(_number(v, f"{path}.size[{i}]") for i, v in enumerate(s))
    if not all(v > 0 for v in size):
        raise ValidationError(f"{path}.size", "dimensions must be positive")
    if size[0] < size[1]:
        raise ValidationError(f"{path}.size", "length must be >= width")
    clearance = DEFAULT_CLEARANCE
    if "clearance" in doc:
        clearance = _number(doc["clearance"], f"{path}.clearance")
    if not 0 <= clearance < size[2]:
        raise ValidationError(f"{path}.clearance", "must lie in [0, height)")
    wps = _waypoints(_require(doc, "waypoints", path), f"{path}.waypoints", num_frames)
    return Actor(aid, label, size, wps, clearance)


def _static_box(doc: dict, path: str) -> OrientedBox:
    _check_keys(doc, {"x", "y", "length", "width", "height", "yaw"}, path)
    x = _number(_require(doc, "x", path), f"{path}.x")
    y = _number(_require(doc, "y", path), f"{path}.y")
    dims = [_number(_require(doc, k, path), f"{path}.{k}") for k in ("length", "width", "height")]
    yaw = _number(doc.get("yaw", 0.0), f"{path}.yaw")
    if not all(d > 0 for d in dims):
        raise ValidationError(path, "dimensions must be positive")
    return OrientedBox.canonical(x, y, dims[2] / 2, dims[0], dims[1], dims[2], yaw)


TOP_KEYS = {"name", "seed", "frame_rate", "num_frames", "actors", "static_boxes", "rsus",
            "ego", "channel", "pipeline"}


def load_scenario(document: dict | str | Path) -> Scenario:
    """Parse and validate a scenario from a dict, a JSON string, or a JSON file path."""
    if isinstance(document, Path) or (isinstance(document, str) and not document.lstrip().startswith("{")):
        text = Path(document).read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"invalid JSON: {exc}") from exc
    elif isinstance(document, str):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"invalid JSON: {exc}") from exc
    else:
        doc = document
    _check_keys(doc, TOP_KEYS, "$")

    seed = _integer(_require(doc, "seed", "$"), "$.seed")
    if not 0 <= seed < 2**64:
        raise ValidationError("$.seed", "must be a 64-bit unsigned integer")
    num_frames = _integer(_require(doc, "num_frames", "$"), "$.num_frames")
    if num_frames < 1:
        raise ValidationError("$.num_frames", "must be >= 1")
    frame_rate = _number(doc.get("frame_rate", 10.0), "$.frame_rate")
    if frame_rate <= 0:
        raise ValidationError("$.frame_rate", "must be positive")

    actors_doc = _require(doc, "actors", "$")
    if not isinstance(actors_doc, list):
        raise SchemaError("$.actors", "expected a list")
    actors = [_actor(a, f"$.actors[{i}]", num_frames) for i, a in enumerate(actors_doc)]
    seen: set[int] = set()
    for i, a in enumerate(actors):
        if a.id in seen:
            raise ValidationError(f"$.actors[{i}].id", f"duplicate actor id {a.id}")
        seen.add(a.id)

    statics_doc = doc.get("static_boxes", [])
    if not isinstance(statics_doc, list):
        raise SchemaError("$.static_boxes", "expected a list")
    statics = [_static_box(b, f"$.static_boxes[{i}]") for i, b in enumerate(statics_doc)]

    rsus_doc = _require(doc, "rsus", "$")
    if not isinstance(rsus_doc, list):
        raise SchemaError("$.rsus", "expected a list")
    rsus = []
    for i, r in enumerate(rsus_doc):
        p = f"$.rsus[{i}]"
        _check_keys(r, _RIG_KEYS | {"x", "y", "yaw"}, p)
        rig = _rig(r, p, RSU_DEFAULTS)
        rsus.append(RSU(rig, _number(_require(r, "x", p), f"{p}.x"),
                        _number(_require(r, "y", p), f"{p}.y"),
                        _number(r.get("yaw", 0.0), f"{p}.yaw")))

    ego = None
    if doc.get("ego") is not None:
        e = doc["ego"]
        _check_keys(e, _RIG_KEYS | {"waypoints"}, "$.ego")
        rig = _rig(e, "$.ego", EGO_DEFAULTS)
        wps = _waypoints(_require(e, "waypoints", "$.ego"), "$.ego.waypoints", num_frames)
        if wps[0][0] != 0 or wps[-1][0] != num_frames - 1:
            raise ValidationError("$.ego.waypoints", "ego trajectory must span every frame")
        ego = Ego(rig, wps)

    ids = [r.sensor_id for r in rsus] + ([ego.sensor_id] if ego else [])
    dupes = sorted({s for s in ids if ids.count(s) > 1})
    if dupes:
        raise ValidationError("$.rsus", f"duplicate sensor_id {dupes[0]!r}")

    channel = from_doc(ChannelParams, doc.get("channel", {}), "$.channel")
    channel.validate("$.channel")
    pipeline = from_doc(PipelineParams, doc.get("pipeline", {}), "$.pipeline")
    pipeline.validate("$.pipeline")

    name = doc.get("name", "")
    if not isinstance(name, str):
        raise SchemaError("$.name", "expected a string")
    return Scenario(seed, num_frames, actors, statics, rsus, ego, frame_rate, channel, pipeline, name)
