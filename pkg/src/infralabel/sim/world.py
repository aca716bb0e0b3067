"""Actor motion, world snapshots and ground-truth labels."""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..geom import OrientedBox, Pose, pose_invert, transform_box
from ..labels import LabelSet
from ..params import Region
from .scenario import Actor, Scenario


class OutOfSpan(ValueError):
    """The requested frame lies outside an actor's waypoint span."""


@dataclass(frozen=True)
class Placed:
    """A box in the world frame plus the underbody slice that rays pass through."""

    box: OrientedBox
    clearance: float = 0.0

    @property
    def actor_id(self) -> int:
        return self.box.actor_id


def _heading(wps, i: int) -> float | None:
    (_, x0, y0), (_, x1, y1) = wps[i], wps[i + 1]
    if x0 == x1 and y0 == y1:
        return None
    return math.atan2(y1 - y0, x1 - x0)


def trajectory_pose(waypoints, frame: float) -> tuple[float, float, float]:
    """Linear interpolation along (frame, x, y) waypoints; returns (x, y, yaw).

    Yaw follows the segment the frame falls in (the outgoing segment at a
    waypoint, the incoming one at the last waypoint). A stationary segment
    keeps the heading of the most recent moving one; with none before it,
    the next moving heading is used.
    """
    first, last = waypoints[0][0], waypoints[-1][0]
    if not first <= frame <= last:
        raise OutOfSpan(f"frame {frame} outside [{first}, {last}]")
    if len(waypoints) == 1:
        return waypoints[0][1], waypoints[0][2], 0.0
    seg = 0
    while seg < len(waypoints) - 2 and frame >= waypoints[seg + 1][0]:
        seg += 1
    (f0, x0, y0), (f1, x1, y1) = waypoints[seg], waypoints[seg + 1]
    a = (frame - f0) / (f1 - f0)
    if frame == f0:
        x, y = x0, y0
    elif frame == f1:
        x, y = x1, y1
    else:
        x, y = x0 + a * (x1 - x0), y0 + a * (y1 - y0)

    yaw = None
    for i in range(seg, -1, -1):
        yaw = _heading(waypoints, i)
        if yaw is not None:
            break
    if yaw is None:
        for i in range(seg + 1, len(waypoints) - 1):
            yaw = _heading(waypoints, i)
            if yaw is not None:
                break
    return x, y, 0.0 if yaw is None else yaw


def actor_pose_at(actor: Actor, frame: int) -> Pose:
    x, y, yaw = trajectory_pose(actor.waypoints, frame)
    return Pose(x, y, 0.0, yaw)


def actor_box(actor: Actor, frame: int) -> OrientedBox:
    p = actor_pose_at(actor, frame)
    length, width, height = actor.size
    return OrientedBox(p.x, p.y, height / 2, length, width, height, p.yaw,
                       label=actor.label, actor_id=actor.id)


def world_snapshot(s: Scenario, frame: int) -> list[Placed]:
    """Static geometry followed by every actor whose span contains ``frame``."""
    placed = [Placed(b, 0.0) for b in s.static_boxes]
    for a in s.actors:
        if a.first_frame <= frame <= a.last_frame:
            placed.append(Placed(actor_box(a, frame), a.clearance))
    return placed


def rsu_pose(s: Scenario, sensor_id: str) -> Pose:
    return s.rsu(sensor_id).pose


def ego_pose(s: Scenario, frame: int) -> Pose:
    if s.ego is None:
        raise ValueError("scenario has no ego")
    x, y, yaw = trajectory_pose(s.ego.waypoints, frame)
    return Pose(x, y, s.ego.rig.mount_height, yaw)


def sensor_pose(s: Scenario, sensor_id: str, frame: int) -> Pose:
    if s.ego is not None and sensor_id == s.ego.sensor_id:
        return ego_pose(s, frame)
    return rsu_pose(s, sensor_id)


def in_region(x: float, y: float, region: Region) -> bool:
    (x0, x1), (y0, y1) = region
    return x0 <= x <= x1 and y0 <= y <= y1


def gt_labels(snapshot, pose: Pose, region: Region, frame: int = 0, sensor_id: str = "") -> LabelSet:
    """Dynamic-actor boxes in the sensor frame whose centers fall inside ``region``."""
    to_sensor = pose_invert(pose)
    boxes = []
    for item in snapshot:
        b = item.box if isinstance(item, Placed) else item
        if b.actor_id <= 0:
            continue
        local = transform_box(to_sensor, b).replace(score=1.0)
        if in_region(local.cx, local.cy, region):
            boxes.append(local)
    return LabelSet(frame, sensor_id, boxes)
