from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import box, surface_points
from infralabel.broadcast import (
    BroadcastContext,
    MissingFrame,
    aggregate_frame,
    assign_class,
    build_ego_dataset,
    channel_transmit,
    distance_weighted_nms,
    ego_filter,
    fuse_labels,
    in_range_rsus,
    refine_box,
    to_ego_frame,
)
from infralabel.geom import IDENTITY, PointCloud, Pose, bev_iou, pose_compose, pose_invert, transform_box
from infralabel.labels import LabelSet
from infralabel.params import DEFAULT_TEMPLATES, ChannelParams, PipelineParams, RefineParams
from infralabel.rng import stream

QUIET = ChannelParams(delay=0.0, noise_enabled=False)


def car(cx=0.0, cy=0.0, **kw):
    return box(cx, cy, 0.8, 3.99, 1.89, 1.59, **kw)


# -- channel -----------------------------------------------------------------------------------


def test_quiet_channel_is_identity():
    ls = LabelSet(5, "r", [car(1, 2, yaw=0.3)])
    out = channel_transmit({5: ls}, QUIET, None, 5)
    assert out.frame == 5
    assert [(b.cx, b.cy, b.cz, b.yaw, b.length) for b in out.boxes] == [(1, 2, 0.8, 0.3, 3.99)]
    assert out.boxes[0].source_id == "r" and out.boxes[0].source_frame == 5


def test_delay_picks_earlier_frame():
    labels = {f: LabelSet(f, "r", [car(float(f))]) for f in range(5)}
    ch = ChannelParams(delay=0.1, noise_enabled=False)
    out = channel_transmit(labels, ch, None, 3, frame_rate=10.0)
    assert out.frame == 2 and out.boxes[0].cx == 2.0
    assert channel_transmit(labels, ChannelParams(delay=0.3, noise_enabled=False), None, 4).frame == 1
    with pytest.raises(MissingFrame):
        channel_transmit(labels, ch, None, 0)


def test_noise_sigma_calibration():
    one = {0: LabelSet(0, "r", [car(10, 5, yaw=1.0)] * 1000)}
    ch = ChannelParams(delay=0.0)
    xs, yaws = [], []
    for k in range(100):
        out = channel_transmit(one, ch, stream(11, "channel", "r", k), 0)
        xs += [b.cx for b in out.boxes]
        yaws += [b.yaw for b in out.boxes]
    assert abs(np.std(xs) / 0.2 - 1) < 0.02
    assert abs(np.std(yaws) / 0.05 - 1) < 0.02
    b = out.boxes[0]
    assert (b.length, b.width, b.height) == (3.99, 1.89, 1.59)


def test_noise_needs_rng():
    with pytest.raises(ValueError):
        channel_transmit({0: LabelSet(0, "r", [car()])}, ChannelParams(delay=0.0), None, 0)


def test_noise_is_stream_keyed():
    one = {0: LabelSet(0, "r", [car(10, 5)])}
    ch = ChannelParams(delay=0.0)
    a = channel_transmit(one, ch, stream(1, "channel", "r", 0), 0).boxes[0]
    b = channel_transmit(one, ch, stream(1, "channel", "r", 0), 0).boxes[0]
    assert a == b


def test_range_gate():
    rsus = [("near", Pose(159.9, 0)), ("edge", Pose(0, 160.0)), ("far", Pose(200, 0))]
    assert in_range_rsus(IDENTITY, rsus, 160.0) == ["near"]
    assert in_range_rsus(IDENTITY, [], 160.0) == []


# -- frames ----------------------------------------------------------------------------------


def test_to_ego_frame_examples():
    ls = LabelSet(0, "r", [car(3, 4, yaw=0.2)])
    same = to_ego_frame(ls, Pose(5, 5, 0, 0.7), Pose(5, 5, 0, 0.7)).boxes[0]
    assert (same.cx, same.cy, same.yaw) == pytest.approx((3, 4, 0.2))
    assert same.source_distance == pytest.approx(5.0) and same.source_id == "r"
    ahead = to_ego_frame(LabelSet(0, "r", [car()]), Pose(10, 0), IDENTITY).boxes[0]
    assert (ahead.cx, ahead.cy) == pytest.approx((10, 0))


@settings(max_examples=100)
@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-4, 4), st.floats(-100, 100), st.floats(-100, 100),
       st.floats(-4, 4))
def test_round_trip_through_ego_frame(rx, ry, ryaw, ex, ey, eyaw):
    rsu, ego = Pose(rx, ry, 7.5, ryaw), Pose(ex, ey, 1.8, eyaw)
    b = car(3, -4, yaw=0.4)
    there = to_ego_frame(LabelSet(0, "r", [b]), rsu, ego).boxes[0]
    back = transform_box(pose_compose(pose_invert(rsu), ego), there)
    assert (back.cx, back.cy, back.cz) == pytest.approx((b.cx, b.cy, b.cz), abs=1e-9)
    assert math.cos(back.yaw - b.yaw) == pytest.approx(1.0, abs=1e-12)


# -- NMS ----------------------------------------------------------------------------------------


def sourced(b, d, sid="r"):
    return b.replace(source_distance=d, source_id=sid)


def test_nms_examples():
    assert distance_weighted_nms([sourced(car(), 5.0)]) == [sourced(car(), 5.0)]
    near, far = sourced(car(), 10.0, "a"), sourced(car(), 50.0, "b")
    assert distance_weighted_nms([far, near]) == [near]
    # 2x2 squares offset by 1.9: overlap 0.2, union 7.8
    a = sourced(box(0, 0, 0, 2, 2), 1.0)
    b = sourced(box(1.9, 0, 0, 2, 2), 2.0)
    assert bev_iou(a, b) == pytest.approx(0.2 / 7.8)
    assert len(distance_weighted_nms([a, b], 0.1)) == 2


def test_nms_tie_order():
    a = sourced(car(), 10.0, "b")
    b = sourced(car(0.1), 10.0, "a")
    assert distance_weighted_nms([a, b]) == [b]
    # full ties fall to geometry, so the order of the pool does not matter
    c = sourced(car(0.2), 10.0, "a")
    assert distance_weighted_nms([c, b]) == distance_weighted_nms([b, c]) == [b]


def random_frame(rng, n):
    out = []
    for k in range(n):
        sid = f"rsu_{rng.integers(0, 3)}"
        # quantized distances force plenty of ties
        d = float(rng.integers(1, 6)) * 10
        out.append(sourced(box(*rng.uniform(-6, 6, 2), 0, 4, 2, 1.5, rng.uniform(-3, 3)), d, sid))
    return out


@pytest.mark.parametrize("seed", range(20))
def test_nms_invariants(seed):
    rng = np.random.default_rng(seed)
    for _ in range(50):
        boxes = random_frame(rng, int(rng.integers(1, 12)))
        kept = distance_weighted_nms(boxes, 0.1)
        for a, b in itertools.combinations(kept, 2):
            assert bev_iou(a, b) <= 0.1
        for b in boxes:
            if b not in kept:
                assert any(bev_iou(b, k) > 0.1 for k in kept)
        perm = [boxes[i] for i in rng.permutation(len(boxes))]
        assert sorted(map(repr, distance_weighted_nms(perm, 0.1))) == sorted(map(repr, kept))


# -- ego-side filtering ---------------------------------------------------------------------------


def test_ego_filter_examples():
    rng = np.random.default_rng(0)
    here, far, empty = car(10, 0), car(90, 0), car(-10, 5)
    cloud = PointCloud(np.vstack([surface_points(here, 200, rng).xyz, surface_points(far, 200, rng).xyz]))
    assert ego_filter([here, far, empty], cloud) == [here]
    assert ego_filter([here], PointCloud(np.zeros((0, 3)))) == []


def test_assign_class_examples():
    assert assign_class(box(length=3.99, width=1.89, height=1.59), DEFAULT_TEMPLATES).label == "Car"
    assert assign_class(box(length=0.5, width=0.5, height=1.8), DEFAULT_TEMPLATES).label == "Pedestrian"
    assert assign_class(box(length=10, width=10, height=10), DEFAULT_TEMPLATES).label == "Unknown"
    assert assign_class(box(length=1.8, width=0.6, height=1.7), DEFAULT_TEMPLATES).label == "Cyclist"


def test_assign_class_tie_is_unknown():
    from infralabel.params import ClassTemplate

    tied = (ClassTemplate("Car", (2.0, 1.0, 1.0)), ClassTemplate("Cyclist", (8.0, 1.0, 1.0)))
    assert assign_class(box(length=4.0, width=1.0, height=1.0), tied).label == "Unknown"


# -- refinement ----------------------------------------------------------------------------------


def car_cloud(b, rng, n=600):
    return surface_points(b, n, rng)


def test_tight_box_unchanged():
    rng = np.random.default_rng(0)
    b = car(5, 5, yaw=0.3)
    assert refine_box(b, car_cloud(b, rng)) == b


def test_displaced_box_snaps_back():
    rng = np.random.default_rng(1)
    truth = car(5, 5, yaw=0.3)
    cloud = car_cloud(truth, rng)
    moved = truth.replace(cx=truth.cx + 0.2 * math.cos(1.0), cy=truth.cy + 0.2 * math.sin(1.0))
    got = refine_box(moved, cloud)
    assert math.hypot(got.cx - truth.cx, got.cy - truth.cy) <= 0.1
    assert (got.length, got.width, got.height, got.yaw) == (truth.length, truth.width, truth.height, truth.yaw)


def test_sparse_box_unchanged():
    rng = np.random.default_rng(2)
    b = car(5, 5)
    assert refine_box(b.replace(cx=5.3), car_cloud(b, rng, 3)) == b.replace(cx=5.3)


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.6, 0.6), st.floats(-0.6, 0.6), st.floats(-3, 3), st.integers(0, 2**16))
def test_refine_moves_within_grid(dx, dy, yaw, seed):
    rng = np.random.default_rng(seed)
    truth = car(0, 0, yaw=yaw)
    start = truth.replace(cx=dx, cy=dy)
    got = refine_box(start, car_cloud(truth, rng, 200))
    assert (got.length, got.width, got.height, got.yaw, got.cz) == (start.length, start.width, start.height,
                                                                   start.yaw, start.cz)
    radius = RefineParams().grid_radius
    assert abs(got.cx - start.cx) <= radius + 1e-9 and abs(got.cy - start.cy) <= radius + 1e-9


# -- fusion ---------------------------------------------------------------------------------------


def test_fuse_examples():
    rng = np.random.default_rng(0)
    truth = car(10, 0)
    pts = surface_points(truth, 65, rng).xyz
    infra_box = truth.replace(cx=10.9)
    ego_box = truth.replace(cx=10.1)
    n_infra = int(np.count_nonzero(np.abs(pts[:, 0] - 10.9) <= 3.99 / 2))
    n_ego = int(np.count_nonzero(np.abs(pts[:, 0] - 10.1) <= 3.99 / 2))
    assert n_ego > n_infra
    fused = fuse_labels(LabelSet(0, "ego", [infra_box]), LabelSet(0, "ego", [ego_box]), PointCloud(pts))
    assert fused.boxes == [ego_box]

    infra = LabelSet(0, "ego", [car(10, 0), car(-10, 0)])
    assert fuse_labels(infra, LabelSet(0, "ego", []), PointCloud(pts)).boxes == infra.boxes
    other = LabelSet(0, "ego", [car(30, 0)])
    assert fuse_labels(infra, other, PointCloud(pts)).boxes == infra.boxes + other.boxes


def test_fuse_tie_keeps_infra():
    a, e = car(0, 0), car(0.2, 0)
    out = fuse_labels(LabelSet(0, "ego", [a]), LabelSet(0, "ego", [e]), PointCloud(np.zeros((0, 3))))
    assert out.boxes == [a]


# -- one tick -----------------------------------------------------------------------------------


def ctx_for(rsu_poses, rsu_labels, ego_pose, cloud, **kw):
    return BroadcastContext(rsu_poses=rsu_poses, rsu_labels=rsu_labels, ego_poses={0: ego_pose},
                            ego_cloud=lambda f: cloud, channel=QUIET, params=PipelineParams(), **kw)


def test_no_rsu_in_range_gives_empty_set():
    ctx = ctx_for([("r", Pose(500, 0, 7.5))], {"r": {0: LabelSet(0, "r", [car()])}}, Pose(0, 0, 1.8),
                  PointCloud(np.zeros((0, 3))))
    assert len(aggregate_frame(0, ctx)) == 0


def test_two_rsus_one_car():
    rng = np.random.default_rng(0)
    ego = Pose(3.0, -2.0, 1.8, 0.4)
    near, far = Pose(20.0, 10.0, 7.5, 2.0), Pose(-40.0, -5.0, 7.5, -0.7)
    world_car = box(12.0, 4.0, 0.8, 3.99, 1.89, 1.59, 0.9, label="Unknown")
    labels = {}
    for sid, pose in (("near", near), ("far", far)):
        labels[sid] = {0: LabelSet(0, sid, [transform_box(pose_invert(pose), world_car)])}
    ego_car = transform_box(pose_invert(ego), world_car)
    ctx = ctx_for([("far", far), ("near", near)], labels, ego, surface_points(ego_car, 200, rng))
    (got,) = aggregate_frame(0, ctx).boxes
    assert (got.cx, got.cy, got.cz) == pytest.approx((ego_car.cx, ego_car.cy, ego_car.cz), abs=1e-6)
    assert got.source_id == "near" and got.label == "Car"


def test_build_dataset_survives_bad_frames():
    ctx = ctx_for([("r", Pose(0, 0, 7.5))], {"r": {0: LabelSet(0, "r", [car(5, 0)])}}, Pose(0, 0, 1.8),
                  PointCloud(np.zeros((0, 3))))
    ctx.ego_poses = {0: Pose(0, 0, 1.8)}
    out = build_ego_dataset([0, 1], ctx)
    assert sorted(out) == [0, 1] and len(out[1]) == 0
