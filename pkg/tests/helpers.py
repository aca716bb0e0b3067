from __future__ import annotations

import numpy as np

from infralabel.geom import OrientedBox, PointCloud


def box(cx=0.0, cy=0.0, cz=0.0, length=4.0, width=2.0, height=1.5, yaw=0.0, **kw) -> OrientedBox:
    return OrientedBox(cx, cy, cz, length, width, height, yaw, **kw)


def surface_points(b: OrientedBox, n: int, rng: np.random.Generator, tag: int = 0) -> PointCloud:
    """Points spread through the volume of ``b`` (expressed in the box's own parent frame)."""
    u = rng.uniform(-0.5, 0.5, (n, 3)) * [b.length, b.width, b.height]
    c, s = np.cos(b.yaw), np.sin(b.yaw)
    xyz = np.stack([b.cx + c * u[:, 0] - s * u[:, 1], b.cy + s * u[:, 0] + c * u[:, 1], b.cz + u[:, 2]], axis=1)
    return PointCloud(xyz, np.full(n, tag, dtype=np.uint32))
