"""Sharing roadside labels with the ego vehicle.

Each tick the ego collects the label sets of every roadside unit in range,
after they have crossed a simulated channel (fixed delay plus optional
Gaussian pose noise). Boxes are moved into the ego frame, duplicates are
resolved in favor of the sensor that was closest to the object, and the
survivors are checked against the ego's own scan and given a class.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .geom import OrientedBox, PointCloud, Pose, bev_iou, box_to_local, normalize_angle, \
    pose_compose, pose_invert, transform_box
from .labels import LabelSet
from .params import ChannelParams, ClassTemplate, PipelineParams, RefineParams, Region
from .rng import stream

log = logging.getLogger(__name__)


class MissingFrame(LookupError):
    """The delayed source frame is not part of the recording."""


class EgoPseudoLabelSet(LabelSet):
    """Pseudo-labels for one ego frame; each box remembers where it came from."""

    def __init__(self, frame: int, boxes: list[OrientedBox] | None = None, sensor_id: str = "ego") -> None:
        super().__init__(frame, sensor_id, list(boxes or []))

    @property
    def provenance(self) -> list[tuple[str, int]]:
        return [(b.source_id, b.source_frame) for b in self.boxes]


# -- channel -----------------------------------------------------------------------------


def channel_transmit(labels: Mapping[int, LabelSet], ch: ChannelParams, rng: np.random.Generator | None,
                     ego_frame: int, frame_rate: float = 10.0) -> LabelSet:
    """Deliver the label set recorded ``delay`` earlier, optionally with pose noise.

    Noise is i.i.d. Gaussian on the box center (``sigma_pos``) and yaw
    (``sigma_yaw``), drawn in box order; sizes are sent as-is.
    """
    src = ego_frame - ch.delay_frames(frame_rate)
    if src not in labels:
        raise MissingFrame(f"no labels for frame {src}")
    ls = labels[src]
    boxes = [b.replace(source_id=b.source_id or ls.sensor_id, source_frame=src) for b in ls.boxes]
    if ch.noise_enabled and boxes and (ch.sigma_pos > 0 or ch.sigma_yaw > 0):
        if rng is None:
            raise ValueError("channel noise requires an rng stream")
        z = rng.standard_normal((len(boxes), 4))
        boxes = [
            b.replace(cx=b.cx + ch.sigma_pos * d[0], cy=b.cy + ch.sigma_pos * d[1],
                      cz=b.cz + ch.sigma_pos * d[2], yaw=normalize_angle(b.yaw + ch.sigma_yaw * d[3]))
            for b, d in zip(boxes, z)
        ]
    return LabelSet(src, ls.sensor_id, boxes)


def in_range_rsus(ego_pose: Pose, rsus: Sequence[tuple[str, Pose]], d_max: float) -> list[str]:
    """Ids of units whose BEV distance to the ego is strictly below ``d_max``."""
    return [sid for sid, p in rsus if math.hypot(p.x - ego_pose.x, p.y - ego_pose.y) < d_max]


def to_ego_frame(labels: LabelSet, rsu_pose: Pose, ego_pose: Pose) -> LabelSet:
    """Map boxes from a roadside unit's frame into the ego frame.

    ``source_distance`` is the BEV range from the unit to the box, taken
    before the transform and kept strictly positive.
    """
    t = pose_compose(pose_invert(ego_pose), rsu_pose)
    out = []
    for b in labels.boxes:
        dist = max(math.hypot(b.cx, b.cy), 1e-6)
        moved = transform_box(t, b)
        out.append(moved.replace(source_distance=dist, source_id=b.source_id or labels.sensor_id))
    return LabelSet(labels.frame, labels.sensor_id, out)


# -- duplicate suppression ---------------------------------------------------------------


def _geometry_key(b: OrientedBox) -> tuple:
    return (b.cx, b.cy, b.cz, b.yaw, b.length, b.width, b.height, b.score, b.label)


def nms_order(boxes: Sequence[OrientedBox]) -> list[int]:
    """Priority order: nearest source first, then sensor id, then box geometry, then input position.

    Geometry sits before input position so that the kept set does not
    depend on how the pool was assembled; boxes tied on all of it are
    interchangeable.
    """
    return sorted(range(len(boxes)),
                  key=lambda k: (boxes[k].source_distance, boxes[k].source_id, _geometry_key(boxes[k]), k))


def distance_weighted_nms(boxes: Sequence[OrientedBox], iou_thr: float = 0.1) -> list[OrientedBox]:
    """Greedy NMS where a box's priority is the inverse of its source distance."""
    kept: list[OrientedBox] = []
    for k in nms_order(boxes):
        b = boxes[k]
        if all(bev_iou(b, other) <= iou_thr for other in kept):
            kept.append(b)
    return kept


# -- ego side ------------------------------------------------------------------------------


def _count_inside(b: OrientedBox, xyz: np.ndarray) -> int:
    loc = box_to_local(b, xyz)
    return int(np.count_nonzero(
        (np.abs(loc[:, 0]) <= 0.5 * b.length + 1e-9)
        & (np.abs(loc[:, 1]) <= 0.5 * b.width + 1e-9)
        & (np.abs(loc[:, 2]) <= 0.5 * b.height + 1e-9)
    ))


def _nearby(xyz: np.ndarray, b: OrientedBox, margin: float) -> np.ndarray:
    r = 0.5 * math.hypot(b.length, b.width) + margin
    m = (np.abs(xyz[:, 0] - b.cx) <= r) & (np.abs(xyz[:, 1] - b.cy) <= r)
    return xyz[m]


def count_points(b: OrientedBox, cloud) -> int:
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud)
    return _count_inside(b, _nearby(xyz, b, 0.0)) if len(xyz) else 0


def ego_filter(boxes: Iterable[OrientedBox], ego_cloud, min_points: int = 1,
               region: Region = ((-80.0, 80.0), (-40.0, 40.0))) -> list[OrientedBox]:
    """Drop boxes centered outside ``region`` or holding fewer than ``min_points`` ego points."""
    (x0, x1), (y0, y1) = region
    out = []
    for b in boxes:
        if not (x0 <= b.cx <= x1 and y0 <= b.cy <= y1):
            continue
        if count_points(b, ego_cloud) >= min_points:
            out.append(b)
    return out


def class_distance(b: OrientedBox, size: Sequence[float]) -> float:
    dims = (b.length, b.width, b.height)
    return sum(math.log(d / p) ** 2 for d, p in zip(dims, size))


def assign_class(b: OrientedBox, templates: Sequence[ClassTemplate], cutoff: float = 3.0) -> OrientedBox:
    """Label ``b`` with the template closest in log-size; ties or far misses become Unknown."""
    if not templates:
        raise ValueError("need at least one template")
    dists = [class_distance(b, t.size) for t in templates]
    best = min(dists)
    winners = [t.label for t, d in zip(templates, dists) if d == best]
    label = winners[0] if len(set(winners)) == 1 and best <= cutoff else "Unknown"
    return b.replace(label=label)


def refine_box(b: OrientedBox, ego_cloud, grid: Sequence[tuple[float, float]] | None = None,
               boundary_weight: float = 0.5, boundary_eps: float = 0.1, min_points: int = 5) -> OrientedBox:
    """Shift ``b`` over a grid of BEV offsets to best cover the ego points.

    A candidate scores its inside count plus ``boundary_weight`` times the
    inside points lying within ``boundary_eps`` of a vertical face. Ties go
    to the smaller offset, then to lexicographic (dx, dy). The original box
    is kept when the winner holds fewer than ``min_points`` points.
    """
    grid = list(grid) if grid is not None else RefineParams().grid()
    xyz = ego_cloud.xyz if isinstance(ego_cloud, PointCloud) else np.asarray(ego_cloud)
    reach = max((math.hypot(dx, dy) for dx, dy in grid), default=0.0)
    pts = _nearby(xyz, b, reach) if len(xyz) else np.zeros((0, 3))
    hl, hw, hh = 0.5 * b.length, 0.5 * b.width, 0.5 * b.height
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    base = box_to_local(b, pts)
    z_ok = np.abs(base[:, 2]) <= hh + 1e-9
    best_key, best = None, None
    for dx, dy in grid:
        # shifting the box by (dx, dy) shifts points by the opposite in its frame
        lx = base[:, 0] - (c * dx + s * dy)
        ly = base[:, 1] - (-s * dx + c * dy)
        gap_x, gap_y = hl - np.abs(lx), hw - np.abs(ly)
        inside = z_ok & (gap_x >= -1e-9) & (gap_y >= -1e-9)
        n_in = int(np.count_nonzero(inside))
        n_b = int(np.count_nonzero(inside & (np.minimum(gap_x, gap_y) <= boundary_eps)))
        key = (-(n_in + boundary_weight * n_b), math.hypot(dx, dy), dx, dy)
        if best_key is None or key < best_key:
            best_key, best = key, (dx, dy, n_in)
    if best is None or best[2] < min_points:
        return b
    dx, dy, _ = best
    if dx == 0 and dy == 0:
        return b
    return b.replace(cx=b.cx + dx, cy=b.cy + dy)


def fuse_labels(infra: LabelSet, ego_centric: LabelSet, ego_cloud, iou_thr: float = 0.1) -> LabelSet:
    """Merge broadcast labels with labels the ego produced on its own.

    Overlapping pairs (bev_iou > ``iou_thr``, matched greedily by IoU) keep
    the box holding more ego points, infra on ties. Unpaired boxes from
    either side are kept unless an ego-centric box overlaps some infra box.
    """
    pairs = sorted(
        ((bev_iou(a, e), i, j) for i, a in enumerate(infra.boxes) for j, e in enumerate(ego_centric.boxes)),
        key=lambda p: (-p[0], p[1], p[2]),
    )
    taken_i: dict[int, int] = {}
    taken_j: set[int] = set()
    overlapping_j: set[int] = set()
    for v, i, j in pairs:
        if v <= iou_thr:
            break
        overlapping_j.add(j)
        if i in taken_i or j in taken_j:
            continue
        taken_i[i] = j
        taken_j.add(j)
    out = []
    for i, a in enumerate(infra.boxes):
        j = taken_i.get(i)
        if j is not None:
            e = ego_centric.boxes[j]
            if count_points(e, ego_cloud) > count_points(a, ego_cloud):
                out.append(e)
                continue
        out.append(a)
    out += [e for j, e in enumerate(ego_centric.boxes) if j not in overlapping_j]
    return LabelSet(infra.frame, infra.sensor_id, out)


# -- orchestration ------------------------------------------------------------------------


@dataclass
class BroadcastContext:
    """Everything one ego tick needs.

    ``rsu_labels`` maps sensor id to that unit's per-frame label sets;
    ``ego_cloud`` loads the ego scan for a frame.
    """

    rsu_poses: list[tuple[str, Pose]]
    rsu_labels: Mapping[str, Mapping[int, LabelSet]]
    ego_poses: Mapping[int, Pose] | Callable[[int], Pose]
    ego_cloud: Callable[[int], PointCloud]
    channel: ChannelParams
    params: PipelineParams
    seed: int = 0
    frame_rate: float = 10.0
    refine: bool = False
    ego_centric: Mapping[int, LabelSet] = field(default_factory=dict)

    def ego_pose(self, frame: int) -> Pose:
        return self.ego_poses(frame) if callable(self.ego_poses) else self.ego_poses[frame]


def aggregate_frame(ego_frame: int, ctx: BroadcastContext) -> EgoPseudoLabelSet:
    """One tick: gather, transmit, transform, suppress duplicates, filter, classify, refine."""
    pose = ctx.ego_pose(ego_frame)
    pool: list[OrientedBox] = []
    for sid in in_range_rsus(pose, ctx.rsu_poses, ctx.channel.d_max):
        rng = stream(ctx.seed, "channel", sid, ego_frame) if ctx.channel.noise_enabled else None
        try:
            sent = channel_transmit(ctx.rsu_labels.get(sid, {}), ctx.channel, rng, ego_frame, ctx.frame_rate)
        except MissingFrame:
            continue
        rsu_pose = dict(ctx.rsu_poses)[sid]
        pool += to_ego_frame(sent, rsu_pose, pose).boxes
    if not pool and ego_frame not in ctx.ego_centric:
        return EgoPseudoLabelSet(ego_frame)
    p = ctx.params
    cloud = ctx.ego_cloud(ego_frame)
    boxes = distance_weighted_nms(pool, p.nms_iou)
    boxes = ego_filter(boxes, cloud, p.ego_min_points, p.ego_region)
    boxes = [assign_class(b, p.templates, p.class_cutoff) for b in boxes]
    if ctx.refine:
        r = p.refine
        grid = r.grid()
        boxes = [refine_box(b, cloud, grid, r.boundary_weight, r.boundary_eps, r.min_points) for b in boxes]
    if ego_frame in ctx.ego_centric:
        fused = fuse_labels(LabelSet(ego_frame, "ego", boxes), ctx.ego_centric[ego_frame], cloud)
        (x0, x1), (y0, y1) = p.ego_region
        boxes = [b for b in fused.boxes if x0 <= b.cx <= x1 and y0 <= b.cy <= y1]
    return EgoPseudoLabelSet(ego_frame, boxes)


def build_ego_dataset(frames: Iterable[int], ctx: BroadcastContext) -> dict[int, EgoPseudoLabelSet]:
    """Aggregate every ego frame; per-frame failures are logged and yield empty sets."""
    out = {}
    for f in frames:
        try:
            out[f] = aggregate_frame(f, ctx)
        except Exception as exc:  # never abort the dataset for one tick
            log.warning("ego frame %d: %s", f, exc)
            out[f] = EgoPseudoLabelSet(f)
    return out
