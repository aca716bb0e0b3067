"""Rigid transforms, oriented boxes and BEV geometry.

Poses are yaw-only rigid transforms (SE(2) plus a z offset). Boxes are
gravity aligned, so every overlap computation happens in the x-y plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

CLASSES = ("Car", "Pedestrian", "Cyclist", "Unknown")

_TWO_PI = 2.0 * math.pi


class CollinearInput(ValueError):
    """Raised when a point set has a degenerate (zero-area) convex hull."""


def normalize_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.remainder(float(angle), _TWO_PI)
    if a <= -math.pi:
        a += _TWO_PI
    return a


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self) -> None:
        vals = (self.x, self.y, self.z, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite pose component: {vals}")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 3) or (N, 2) array from the child frame into the parent frame."""
        pts = np.asarray(points, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(pts)
        out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + self.x
        out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + self.y
        if pts.shape[1] > 2:
            out[:, 2] = pts[:, 2] + self.z
        return out

    def apply_xy(self, x: float, y: float) -> tuple[float, float]:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return c * x - s * y + self.x, s * x + c * y + self.y

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.z, self.yaw)


IDENTITY = Pose()


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Return ``a ∘ b``: applying the result equals applying ``b`` then ``a``."""
    x, y = a.apply_xy(b.x, b.y)
    return Pose(x, y, a.z + b.z, a.yaw + b.yaw)


def pose_invert(p: Pose) -> Pose:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return Pose(-(c * p.x + s * p.y), -(-s * p.x + c * p.y), -p.z, -p.yaw)


@dataclass(frozen=True)
class OrientedBox:
    """Gravity-aligned 3D box. ``label`` holds the class name."""

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float = 0.0
    score: float = 1.0
    label: str = "Unknown"
    source_id: str = ""
    source_distance: float = 0.0
    actor_id: int = 0
    source_frame: int = -1

    def __post_init__(self) -> None:
        if not (self.width > 0 and self.height > 0 and self.length >= self.width):
            raise ValueError(
                f"invalid box dims l={self.length} w={self.width} h={self.height}"
            )
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score out of [0, 1]: {self.score}")
        if self.label not in CLASSES:
            raise ValueError(f"unknown class {self.label!r}")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @classmethod
    def canonical(cls, cx, cy, cz, a, b, height, yaw, **kw) -> "OrientedBox":
        """Build a box from two BEV extents in any order; the longer one becomes the length."""
        if a < b:
            a, b, yaw = b, a, yaw + math.pi / 2
        return cls(cx, cy, cz, a, b, height, yaw, **kw)

    @property
    def bottom(self) -> float:
        return self.cz - 0.5 * self.height

    @property
    def top(self) -> float:
        return self.cz + 0.5 * self.height

    @property
    def bev_area(self) -> float:
        return self.length * self.width

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    def replace(self, **changes) -> "OrientedBox":
        return replace(self, **changes)

    def corners_bev(self) -> np.ndarray:
        """Counter-clockwise (4, 2) footprint corners."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
        return np.array(
            [(self.cx + c * u - s * v, self.cy + s * u + c * v) for u, v in local]
        )


@dataclass
class PointCloud:
    """One sweep in the sensor frame. ``tags`` are ground-truth actor ids (0 = background)."""

    xyz: np.ndarray
    tags: np.ndarray = field(default=None)  # type: ignore[assignment]
    frame: int = 0
    sensor_id: str = ""

    def __post_init__(self) -> None:
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if self.tags is None:
            self.tags = np.zeros(len(self.xyz), dtype=np.uint32)
        else:
            self.tags = np.asarray(self.tags, dtype=np.uint32).reshape(-1)
        if len(self.tags) != len(self.xyz):
            raise ValueError("tags and xyz length mismatch")

    def __len__(self) -> int:
        return len(self.xyz)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.xyz[idx], self.tags[idx], self.frame, self.sensor_id)


def transform_box(t: Pose, b: OrientedBox) -> OrientedBox:
    x, y = t.apply_xy(b.cx, b.cy)
    return b.replace(cx=x, cy=y, cz=b.cz + t.z, yaw=b.yaw + t.yaw)


def box_to_local(b: OrientedBox, points: np.ndarray) -> np.ndarray:
    """Express (N, 3) points in the box frame (origin at center, +x along length)."""
    pts = np.asarray(points, dtype=np.float64)
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    dx = pts[:, 0] - b.cx
    dy = pts[:, 1] - b.cy
    out = np.empty((len(pts), 3))
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    out[:, 2] = pts[:, 2] - b.cz
    return out


def points_in_box(b: OrientedBox, cloud, tol: float = 1e-9) -> np.ndarray:
    """Indices of points inside the box volume; faces count as inside within ``tol``."""
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if len(xyz) == 0:
        return np.zeros(0, dtype=np.int64)
    loc = box_to_local(b, xyz)
    inside = (
        (np.abs(loc[:, 0]) <= 0.5 * b.length + tol)
        & (np.abs(loc[:, 1]) <= 0.5 * b.width + tol)
        & (np.abs(loc[:, 2]) <= 0.5 * b.height + tol)
    )
    return np.flatnonzero(inside)


def polygon_area(poly: Sequence[tuple[float, float]]) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * abs(acc)


def clip_convex(subject: list, clip: np.ndarray) -> list:
    """Sutherland-Hodgman clipping of ``subject`` against a CCW convex polygon."""
    out = list(subject)
    m = len(clip)
    for i in range(m):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % m]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        prev = inp[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inp:
            side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if side >= 0.0:
                if prev_side < 0.0:
                    out.append(_intersect(prev, cur, prev_side, side))
                out.append(cur)
            elif prev_side >= 0.0:
                out.append(_intersect(prev, cur, prev_side, side))
            prev, prev_side = cur, side
    return out


def _intersect(p, q, sp: float, sq: float) -> tuple[float, float]:
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection(a: OrientedBox, b: OrientedBox) -> float:
    reach = 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width))
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= reach:
        return 0.0
    aligned = _aligned_overlap(a, b)
    if aligned is not None:
        return aligned
    poly = clip_convex([tuple(p) for p in a.corners_bev()], b.corners_bev())
    return polygon_area(poly)


_HALF_PI = math.pi / 2


def _aligned_half_extents(b: OrientedBox):
    if b.yaw in (0.0, math.pi):
        return 0.5 * b.length, 0.5 * b.width
    if b.yaw in (_HALF_PI, -_HALF_PI):
        return 0.5 * b.width, 0.5 * b.length
    return None


def _aligned_overlap(a: OrientedBox, b: OrientedBox) -> float | None:
    ea, eb = _aligned_half_extents(a), _aligned_half_extents(b)
    if ea is None or eb is None:
        return None
    ix = min(a.cx + ea[0], b.cx + eb[0]) - max(a.cx - ea[0], b.cx - eb[0])
    iy = min(a.cy + ea[1], b.cy + eb[1]) - max(a.cy - ea[1], b.cy - eb[1])
    return max(ix, 0.0) * max(iy, 0.0)


def bev_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Exact intersection-over-union of the two footprints."""
    inter = bev_intersection(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.bev_area + b.bev_area - inter
    return min(1.0, max(0.0, inter / union))


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns CCW hull vertices without repetition."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64)[:, :2].tolist())))
    if len(pts) <= 2:
        return np.array(pts).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def min_area_rect(points) -> tuple[tuple[float, float], float, float, float]:
    """Minimum-area enclosing rectangle by rotating calipers over the hull edges.

    Returns ``((cx, cy), length, width, yaw)`` with ``length >= width`` and yaw
    pointing along the long side, canonicalized into (-pi/2, pi/2].
    """
    hull = convex_hull(points)
    if len(hull) < 3 or polygon_area(hull.tolist()) <= 1e-12:
        raise CollinearInput("point set has a degenerate hull")
    edges = np.roll(hull, -1, axis=0) - hull
    norms = np.hypot(edges[:, 0], edges[:, 1])
    keep = norms > 0
    u = edges[keep] / norms[keep, None]
    v = np.stack([-u[:, 1], u[:, 0]], axis=1)
    pu = hull @ u.T  # (h, e)
    pv = hull @ v.T
    ext_u = pu.max(axis=0) - pu.min(axis=0)
    ext_v = pv.max(axis=0) - pv.min(axis=0)
    k = int(np.argmin(ext_u * ext_v))
    mid_u = 0.5 * (pu[:, k].max() + pu[:, k].min())
    mid_v = 0.5 * (pv[:, k].max() + pv[:, k].min())
    center = mid_u * u[k] + mid_v * v[k]
    length, width = float(ext_u[k]), float(ext_v[k])
    yaw = math.atan2(u[k, 1], u[k, 0])
    if length < width:
        length, width, yaw = width, length, yaw + math.pi / 2
    yaw = normalize_angle(yaw)
    if yaw <= -math.pi / 2:
        yaw += math.pi
    elif yaw > math.pi / 2:
        yaw -= math.pi
    return (float(center[0]), float(center[1])), length, width, yaw


def aabb_rect(points, min_width: float = 0.05) -> tuple[tuple[float, float], float, float, float]:
    """Axis-aligned fallback for degenerate clusters; dimensions floored at ``min_width``."""
    pts = np.asarray(points, dtype=np.float64)[:, :2]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    ex, ey = max(hi[0] - lo[0], min_width), max(hi[1] - lo[1], min_width)
    c = (float(0.5 * (lo[0] + hi[0])), float(0.5 * (lo[1] + hi[1])))
    if ex >= ey:
        return c, float(ex), float(ey), 0.0
    return c, float(ey), float(ex), math.pi / 2
