"""On-disk formats: CVPC point-cloud files and JSON-lines label files."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .geom import OrientedBox, PointCloud
from .labels import LabelSet

MAGIC = b"CVPC"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_POINT = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("tag", "<u4")])


class FormatError(ValueError):
    pass


def encode_cloud(cloud: PointCloud) -> bytes:
    rec = np.empty(len(cloud), dtype=_POINT)
    rec["x"], rec["y"], rec["z"] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    rec["tag"] = cloud.tags
    return _HEADER.pack(MAGIC, VERSION, len(cloud)) + rec.tobytes()


def decode_cloud(data: bytes, frame: int = 0, sensor_id: str = "") -> PointCloud:
    if len(data) < _HEADER.size:
        raise FormatError("truncated CVPC header")
    magic, version, n = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported CVPC version {version}")
    if len(data) != _HEADER.size + n * _POINT.itemsize:
        raise FormatError("CVPC payload size does not match point count")
    rec = np.frombuffer(data, dtype=_POINT, count=n, offset=_HEADER.size)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    return PointCloud(xyz, rec["tag"].astype(np.uint32), frame, sensor_id)


def write_cloud(path: Path, cloud: PointCloud) -> None:
    Path(path).write_bytes(encode_cloud(cloud))


def read_cloud(path: Path, frame: int = 0, sensor_id: str = "") -> PointCloud:
    return decode_cloud(Path(path).read_bytes(), frame, sensor_id)


def cloud_path(root: Path, sensor_id: str, frame: int) -> Path:
    return Path(root) / "clouds" / sensor_id / f"{frame:06d}.cvpc"


# -- labels -----------------------------------------------------------------

_FLOAT_KEYS = ("cx", "cy", "cz", "length", "width", "height", "yaw", "score")


def box_record(frame: int, sensor_id: str, b: OrientedBox, extra: bool = False) -> dict:
    rec = {"frame": int(frame), "sensor_id": sensor_id}
    for k in _FLOAT_KEYS:
        rec[k] = round(float(getattr(b, k)), 9)
    rec["class"] = b.label
    if extra:
        if b.actor_id:
            rec["actor_id"] = int(b.actor_id)
        if b.source_id:
            rec["source_id"] = b.source_id
            rec["source_frame"] = int(b.source_frame)
            rec["source_distance"] = round(float(b.source_distance), 9)
    return rec


def dumps_labels(sets: Iterable[LabelSet], extra: bool = True) -> str:
    lines = []
    for ls in sorted(sets, key=lambda s: (s.frame, s.sensor_id)):
        for b in ls.boxes:
            lines.append(json.dumps(box_record(ls.frame, ls.sensor_id, b, extra), sort_keys=False))
    return "".join(line + "\n" for line in lines)


def write_labels(path: Path, sets: Iterable[LabelSet], extra: bool = True) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps_labels(sets, extra), encoding="utf-8")


def parse_labels(text: str, source: str = "<labels>") -> dict[int, LabelSet]:
    """Parse JSON-lines labels into frame-indexed label sets (one sensor per file)."""
    out: dict[int, LabelSet] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            box = OrientedBox(
                *(float(rec[k]) for k in ("cx", "cy", "cz", "length", "width", "height", "yaw")),
                score=float(rec.get("score", 1.0)),
                label=rec.get("class", "Unknown"),
                source_id=rec.get("source_id", ""),
                source_distance=float(rec.get("source_distance", 0.0)),
                actor_id=int(rec.get("actor_id", 0)),
                source_frame=int(rec.get("source_frame", -1)),
            )
            frame = int(rec["frame"])
            sensor = str(rec.get("sensor_id", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{source}:{lineno}: {exc}") from exc
        out.setdefault(frame, LabelSet(frame, sensor, [])).boxes.append(box)
    return out


def read_labels(path: Path) -> dict[int, LabelSet]:
    return parse_labels(Path(path).read_text(encoding="utf-8"), str(path))


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
