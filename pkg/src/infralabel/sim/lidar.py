"""Ray-cast LiDAR over a flat ground plane and box-shaped geometry.

Rays are laid out as a (beams x azimuth_steps) grid in the sensor frame.
Each box is tested only against the rows/columns its angular footprint can
reach, which keeps a 100k-ray sweep over a few dozen boxes cheap.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from functools import lru_cache

import numpy as np

from ..geom import PointCloud, Pose, pose_invert, transform_box
from .scenario import SensorRig
from .world import Placed

_TINY = 1e-12


class RayGrid:
    """Precomputed ray directions and ground ranges for one rig layout."""

    def __init__(self, beams: int, azimuth_steps: int, vfov: tuple[float, float],
                 elevations: tuple[float, ...] | None = None) -> None:
        self.beams, self.steps = beams, azimuth_steps
        if elevations is not None:
            el = np.radians(np.sort(np.asarray(elevations, dtype=np.float64)))
        elif beams == 1:
            el = np.array([math.radians(0.5 * (vfov[0] + vfov[1]))])
        else:
            el = np.radians(np.linspace(vfov[0], vfov[1], beams))
        self.elevation = el
        self.az_step = 2.0 * math.pi / azimuth_steps
        az = np.arange(azimuth_steps) * self.az_step
        self.azimuth = az
        ce, se = np.cos(el)[:, None], np.sin(el)[:, None]
        dirs = np.empty((beams, azimuth_steps, 3))
        dirs[..., 0] = ce * np.cos(az)[None, :]
        dirs[..., 1] = ce * np.sin(az)[None, :]
        dirs[..., 2] = np.broadcast_to(se, (beams, azimuth_steps))
        dirs[np.abs(dirs) < _TINY] = _TINY
        self.dirs = dirs.reshape(-1, 3)

    def ground_range(self, height: float) -> np.ndarray:
        dz = self.dirs[:, 2]
        with np.errstate(divide="ignore"):
            t = np.where(dz < 0, height / -dz, np.inf)
        return t

    def columns(self, lo: float, hi: float) -> np.ndarray:
        k0 = math.floor(lo / self.az_step) - 1
        k1 = math.ceil(hi / self.az_step) + 1
        if k1 - k0 + 1 >= self.steps:
            return np.arange(self.steps)
        return np.arange(k0, k1 + 1) % self.steps

    def rows(self, lo: float, hi: float) -> np.ndarray:
        i0 = max(int(np.searchsorted(self.elevation, lo, side="left")) - 1, 0)
        i1 = min(int(np.searchsorted(self.elevation, hi, side="right")) + 1, self.beams)
        return np.arange(i0, i1)


@lru_cache(maxsize=16)
def ray_grid(beams: int, azimuth_steps: int, vfov: tuple[float, float],
             elevations: tuple[float, ...] | None = None) -> RayGrid:
    return RayGrid(beams, azimuth_steps, vfov, elevations)


def _candidate_rays(grid: RayGrid, corners: np.ndarray, zlo: float, zhi: float) -> np.ndarray | None:
    """Flat indices of rays that could reach a box with BEV ``corners`` (sensor frame)."""
    d = np.hypot(corners[:, 0], corners[:, 1])
    center = corners.mean(axis=0)
    rc = math.hypot(center[0], center[1])
    half_diag = float(np.max(np.hypot(*(corners - center).T)))
    if rc <= half_diag + 1e-6:
        cols = np.arange(grid.steps)
        dmin = 1e-3
    else:
        ac = math.atan2(center[1], center[0])
        ang = np.arctan2(corners[:, 1], corners[:, 0]) - ac
        ang = (ang + math.pi) % (2 * math.pi) - math.pi
        cols = grid.columns(ac + float(ang.min()), ac + float(ang.max()))
        dmin = max(rc - half_diag, 1e-3)
    dmax = float(d.max())
    els = [math.atan2(z, r) for z in (zlo, zhi) for r in (dmin, dmax)]
    rows = grid.rows(min(els), max(els))
    if len(rows) == 0 or len(cols) == 0:
        return None
    return (rows[:, None] * grid.steps + cols[None, :]).ravel()


def _intersect(grid: RayGrid, item: Placed, to_sensor: Pose, best: np.ndarray, tags: np.ndarray) -> None:
    b = transform_box(to_sensor, item.box)
    zlo, zhi = b.bottom + item.clearance, b.top
    idx = _candidate_rays(grid, b.corners_bev(), zlo, zhi)
    if idx is None:
        return
    d = grid.dirs[idx]
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    # ray origin (sensor) and directions in the box frame
    ox, oy = -(c * b.cx + s * b.cy), -(-s * b.cx + c * b.cy)
    oz = -0.5 * (zlo + zhi)
    dx = c * d[:, 0] + s * d[:, 1]
    dy = -s * d[:, 0] + c * d[:, 1]
    dx[np.abs(dx) < _TINY] = _TINY
    dy[np.abs(dy) < _TINY] = _TINY
    dz = d[:, 2]
    hx, hy, hz = 0.5 * b.length, 0.5 * b.width, 0.5 * (zhi - zlo)
    tx1, tx2 = (-hx - ox) / dx, (hx - ox) / dx
    ty1, ty2 = (-hy - oy) / dy, (hy - oy) / dy
    tz1, tz2 = (-hz - oz) / dz, (hz - oz) / dz
    tnear = np.maximum(np.maximum(np.minimum(tx1, tx2), np.minimum(ty1, ty2)), np.minimum(tz1, tz2))
    tfar = np.minimum(np.minimum(np.maximum(tx1, tx2), np.maximum(ty1, ty2)), np.maximum(tz1, tz2))
    hit = (tnear <= tfar) & (tnear > 0)
    cand = idx[hit]
    t = tnear[hit]
    closer = t < best[cand]
    best[cand[closer]] = t[closer]
    tags[cand[closer]] = item.box.actor_id


class Scanner:
    """Casts one rig's rays. Static geometry seen from a fixed pose is cached."""

    def __init__(self, rig: SensorRig, cache_size: int = 4) -> None:
        self.rig = rig
        self.grid = ray_grid(*rig.beam_key())
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size

    def _base(self, pose: Pose, statics: tuple[Placed, ...]) -> tuple[np.ndarray, np.ndarray]:
        key = (pose.as_tuple(), statics)
        hit = self._cache.get(key)
        if hit is None:
            best = self.grid.ground_range(pose.z)
            tags = np.zeros(len(best), dtype=np.uint32)
            to_sensor = pose_invert(pose)
            for item in statics:
                _intersect(self.grid, item, to_sensor, best, tags)
            hit = (best, tags)
            self._cache[key] = hit
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(key)
        return hit[0].copy(), hit[1].copy()

    def scan(self, pose: Pose, snapshot, rng: np.random.Generator | None = None,
             frame: int = 0, static_cache: bool = True) -> PointCloud:
        statics = tuple(p for p in snapshot if p.box.actor_id == 0)
        dynamic = [p for p in snapshot if p.box.actor_id != 0]
        if static_cache:
            best, tags = self._base(pose, statics)
        else:
            best = self.grid.ground_range(pose.z)
            tags = np.zeros(len(best), dtype=np.uint32)
            dynamic = list(statics) + dynamic
        to_sensor = pose_invert(pose)
        for item in dynamic:
            _intersect(self.grid, item, to_sensor, best, tags)
        sel = np.flatnonzero(best <= self.rig.max_range)
        t = best[sel]
        sigma = self.rig.range_noise_sigma
        if sigma > 0:
            if rng is None:
                raise ValueError("range noise requires an rng stream")
            t = t + sigma * rng.standard_normal(len(t))
        xyz = self.grid.dirs[sel] * t[:, None]
        xyz = xyz.astype(np.float32).astype(np.float64)
        return PointCloud(xyz, tags[sel], frame, self.rig.sensor_id)


_scanners: dict = {}


def lidar_scan(sensor_pose: Pose, rig: SensorRig, snapshot, rng_stream=None, frame: int = 0) -> PointCloud:
    """Sweep ``rig`` at ``sensor_pose`` over ``snapshot`` (a list of Placed)."""
    sc = _scanners.get(rig)
    if sc is None:
        sc = _scanners[rig] = Scanner(rig)
    return sc.scan(sensor_pose, snapshot, rng_stream, frame)
