"""Generator for the bundled ``crossroads.json`` scenario.

Two perpendicular roads cross at the origin with arms out to +-ARM meters.
Four RSUs sit on poles at the intersection corners, buildings fill the
quadrants. Vehicles wait far down the road, cross the junction once and
wait again at the far end; pedestrians walk one way along the sidewalks.
Away from the junction no place on the road is revisited often, which is
what lets persistence tell them apart from the background. The junction
itself is crossed by most vehicles and scores higher. The document is a pure function of
the seed; ``python -m infralabel.fixtures`` rewrites the bundled copy.
"""

from __future__ import annotations

import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

ARM = 45.0
NUM_FRAMES = 600
FRAME_RATE = 10.0

# Non-uniform ring layout: a step of d_el at ground distance d moves the
# ground hit by d_el * (d^2 + h^2) / h, so rings are spaced to keep that
# near ``spacing`` (within DBSCAN reach) out to ~50 m from the pole.
def rsu_elevations(drop: float = 6.0, spacing: float = 0.25, top: float = -6.5,
                   bottom: float = -66.0) -> list[float]:
    out, el = [], top
    while el > bottom:
        out.append(round(el, 3))
        d = drop / math.tan(math.radians(-el))
        el -= max(min(math.degrees(spacing * drop / (d * d + drop * drop)), 3.0), 0.03)
    return out


PED_SIZE = (0.9, 0.8, 1.8)

TEMPLATES = [
    {"class": "Car", "size": [3.99, 1.89, 1.59]},
    {"class": "Pedestrian", "size": list(PED_SIZE)},
    {"class": "Cyclist", "size": [1.8, 0.6, 1.7]},
]


PARK = 130.0  # waiting spot for vehicles, outside every sensor's range and region


def _pass(axis: str, lateral: float, direction: int, start: float, speed: float,
          frames: int, dt: float) -> list[list[float]]:
    """One-way pass along a road axis; returns [frame, x, y] waypoints.

    A vehicle waits at -direction*PARK, leaves at frame ``start``, drives at
    ``speed`` and waits again once it reaches +direction*PARK.
    """

    def point(along):
        return [along, lateral] if axis == "x" else [lateral, along]

    s0, s1 = -direction * PARK, direction * PARK
    arrive = start + (2 * PARK) / (speed * dt)
    wps = []
    if start > 0:
        wps.append([0, *point(s0)])
    if arrive <= frames - 1:
        wps += [[start, *point(s0)], [arrive, *point(s1)], [frames - 1, *point(s1)]]
    else:
        wps += [[start, *point(s0)], [frames - 1, *point(s0 + direction * speed * dt * (frames - 1 - start))]]
    return _integer_frames(wps)


def _walk(axis: str, lateral: float, direction: int, s0: float, speed: float,
          frames: int, dt: float) -> list[list[float]]:
    """Walk in a straight line for the whole recording."""

    def point(along):
        return [along, lateral] if axis == "x" else [lateral, along]

    s1 = s0 + direction * speed * dt * (frames - 1)
    return [[0, *(round(v, 4) for v in point(s0))], [frames - 1, *(round(v, 4) for v in point(s1))]]


def _integer_frames(wps):
    """Snap waypoint frames to integers by resampling the path at integer frames."""
    frames = np.array([w[0] for w in wps], dtype=float)
    xs = np.array([w[1] for w in wps], dtype=float)
    ys = np.array([w[2] for w in wps], dtype=float)
    keep = sorted({int(round(f)) for f in frames})
    out = [[f, round(float(np.interp(f, frames, xs)), 4), round(float(np.interp(f, frames, ys)), 4)]
           for f in keep]
    return out


def _positions(wps, frames):
    f = np.array([w[0] for w in wps], dtype=float)
    return np.stack([np.interp(frames, f, [w[1] for w in wps]),
                     np.interp(frames, f, [w[2] for w in wps])], axis=1)


def _clear(a, ra, b, rb, margin=0.3, observed=100.0) -> bool:
    # overlap at the waiting spots is never observed by any sensor
    seen = (np.abs(a).max(axis=1) < observed) | (np.abs(b).max(axis=1) < observed)
    d = np.hypot(*(a - b)[seen].T)
    return len(d) == 0 or float(d.min()) > ra + rb + margin


def crossroads_document(seed: int = 20240917) -> dict:
    rng = np.random.default_rng(seed)
    dt = 1.0 / FRAME_RATE
    frames = np.arange(NUM_FRAMES)

    # (class, axis, direction); vehicles on a lane-direction never overlap in time
    specs = (
        [("Car", ax, d) for ax in ("x", "y") for d in (1, -1) for _ in range(2)]
        + [("Pedestrian", ax, d) for ax in ("x", "y") for d in (1, -1) for _ in range(2)]
        + [("Cyclist", ax, d) for ax in ("x", "y") for d in (1, -1)]
    )
    actors, tracks = [], []
    for i, (label, axis, direction) in enumerate(specs, start=1):
        # right-hand traffic: +direction on x drives at negative y, on y at positive x
        side = -direction if axis == "x" else direction
        for _ in range(2000):
            if label == "Car":
                size = [round(float(rng.uniform(3.7, 5.0)), 2), round(float(rng.uniform(1.75, 2.05)), 2),
                        round(float(rng.uniform(1.4, 1.95)), 2)]
                lat = side * (3.5 + float(rng.uniform(-0.6, 0.6)))
                speed = float(rng.uniform(7.0, 9.0))
                wps = _pass(axis, lat, direction, int(rng.integers(0, 280)), speed, NUM_FRAMES, dt)
            elif label == "Cyclist":
                size = [1.8, 0.6, 1.7]
                lat = side * (6.4 + float(rng.uniform(-0.2, 0.2)))
                speed = float(rng.uniform(5.5, 6.5))
                wps = _pass(axis, lat, direction, int(rng.integers(0, 120)), speed, NUM_FRAMES, dt)
            else:
                size = list(PED_SIZE)
                lat = float(rng.choice([-1, 1])) * float(rng.uniform(8.2, 10.8))
                speed = float(rng.uniform(1.1, 1.4))
                span = speed * dt * (NUM_FRAMES - 1)
                s0 = float(rng.uniform(-ARM + 2, ARM - 2 - span)) if direction > 0 else \
                    float(rng.uniform(-ARM + 2 + span, ARM - 2))
                wps = _walk(axis, lat, direction, s0, speed, NUM_FRAMES, dt)
            xy = _positions(wps, frames)
            radius = 0.5 * math.hypot(size[0], size[1])
            clear = all(_clear(xy, radius, oxy, orad) for oxy, orad in tracks)
            if clear:
                break
        else:  # pragma: no cover - seed-dependent
            raise RuntimeError(f"could not place actor {i}")
        tracks.append((xy, radius))
        actors.append({"id": i, "class": label, "size": size, "waypoints": wps})

    statics = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            statics.append({"x": sx * 31.0, "y": sy * 31.0, "length": 22.0, "width": 20.0,
                            "height": 10.0, "yaw": 0.0})
    statics += [
        {"x": 24.0, "y": 12.6, "length": 4.0, "width": 1.5, "height": 2.6},  # bus shelter
        {"x": -28.0, "y": 13.0, "length": 5.5, "width": 2.2, "height": 2.4},  # parked van
        {"x": 14.0, "y": -12.0, "length": 0.4, "width": 0.4, "height": 6.0},  # lamp post
        {"x": -14.0, "y": -12.0, "length": 0.4, "width": 0.4, "height": 6.0},
        {"x": 13.5, "y": 30.0, "length": 2.0, "width": 1.2, "height": 1.2},  # kiosk
    ]

    rsu_rig = {"mount_height": 7.5, "elevations": rsu_elevations(), "azimuth_steps": 1200,
               "max_range": 52.0, "range_noise_sigma": 0.0}
    rsus = []
    for k, (x, y) in enumerate(((11.0, 11.0), (-11.0, 11.0), (-11.0, -11.0), (11.0, -11.0))):
        rsus.append({"sensor_id": f"rsu_{k}", "x": x, "y": y, "yaw": 0.0, **rsu_rig})

    # a little range noise on the ego keeps returns off the exact box faces
    ego = {
        "sensor_id": "ego", "mount_height": 1.8, "beams": 32, "vfov": [-25.0, 5.0],
        "azimuth_steps": 720, "max_range": 60.0, "range_noise_sigma": 0.03,
        "waypoints": [[0, -42.0, -1.1], [300, 42.0, -1.1], [310, 42.0, 1.1], [599, -42.0, 1.1]],
    }
    return {
        "name": "crossroads",
        "seed": seed,
        "frame_rate": FRAME_RATE,
        "num_frames": NUM_FRAMES,
        "actors": actors,
        "static_boxes": statics,
        "rsus": rsus,
        "ego": ego,
        # the link is ideal by default; noise and the 100 ms delay are switched on per run
        "channel": {"d_max": 160.0, "sigma_pos": 0.2, "sigma_yaw": 0.05, "delay": 0.0,
                    "noise_enabled": False},
        # both regions stay inside what the four poles can actually see
        "pipeline": {"templates": TEMPLATES, "rsu_region": [[-40.0, 40.0], [-40.0, 40.0]],
                     "ego_region": [[-40.0, 40.0], [-40.0, 40.0]]},
    }


def truncate(doc: dict, num_frames: int) -> dict:
    """Copy of a scenario document cut down to its first ``num_frames`` frames."""
    out = json.loads(json.dumps(doc))
    out["num_frames"] = num_frames

    def cut(wps):
        f = np.array([w[0] for w in wps], dtype=float)
        if f[0] > num_frames - 1:
            return None
        if f[-1] <= num_frames - 1:
            return wps
        kept = [w for w in wps if w[0] < num_frames - 1]
        end = float(num_frames - 1)
        kept.append([num_frames - 1, *(round(float(np.interp(end, f, [w[k] for w in wps])), 4) for k in (1, 2))])
        return kept

    actors = []
    for a in out["actors"]:
        wps = cut(a["waypoints"])
        if wps is not None:
            actors.append({**a, "waypoints": wps})
    out["actors"] = actors
    if out.get("ego"):
        out["ego"]["waypoints"] = cut(out["ego"]["waypoints"])
    return out


def crossroads_path() -> Path:
    return Path(str(resources.files("infralabel") / "data" / "crossroads.json"))


def main() -> None:
    path = crossroads_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(crossroads_document(), indent=1) + "\n", encoding="utf-8")
    print(path)


if __name__ == "__main__":
    main()
