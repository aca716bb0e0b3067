"""Deterministic synthetic town: scenarios, actor motion and ray-cast LiDAR."""

from .lidar import Scanner, lidar_scan
from .scenario import (
    RSU,
    Actor,
    Ego,
    Scenario,
    SensorRig,
    load_scenario,
)
from .world import (
    OutOfSpan,
    Placed,
    actor_pose_at,
    ego_pose,
    gt_labels,
    rsu_pose,
    sensor_pose,
    world_snapshot,
)

__all__ = [
    "RSU", "Actor", "Ego", "OutOfSpan", "Placed", "Scanner", "Scenario", "SensorRig",
    "actor_pose_at", "ego_pose", "gt_labels", "lidar_scan", "load_scenario", "rsu_pose",
    "sensor_pose", "world_snapshot",
]
