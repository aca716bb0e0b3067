"""Independent reference implementations used to check the package.

Each one trades speed for obviousness: sampling, brute force, or a
different algorithm from the one under test.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np


def inside_rect(px, py, cx, cy, length, width, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = px - cx, py - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)


def monte_carlo_iou(a, b, n: int = 1_000_000, rng=None) -> float:
    """BEV IoU by uniform sampling inside the joint bounding square."""
    rng = rng or np.random.default_rng(0)
    r = max(math.hypot(a.length, a.width), math.hypot(b.length, b.width)) / 2
    x0, x1 = min(a.cx, b.cx) - r, max(a.cx, b.cx) + r
    y0, y1 = min(a.cy, b.cy) - r, max(a.cy, b.cy) + r
    px = rng.uniform(x0, x1, n)
    py = rng.uniform(y0, y1, n)
    ina = inside_rect(px, py, a.cx, a.cy, a.length, a.width, a.yaw)
    inb = inside_rect(px, py, b.cx, b.cy, b.length, b.width, b.yaw)
    union = np.count_nonzero(ina | inb)
    return np.count_nonzero(ina & inb) / union if union else 0.0


def stratified_iou(a, b, n: int = 1_000_000, rng=None) -> float:
    """BEV IoU from ``n`` jittered grid samples over box ``a``.

    One uniform sample per cell of a square grid laid over ``a`` estimates
    the share of ``a`` inside ``b``; only boundary cells carry variance, so
    the error is far below that of plain sampling at the same ``n``.
    """
    rng = rng or np.random.default_rng(0)
    side = int(round(math.sqrt(n)))
    u = (np.arange(side)[:, None] + rng.random((side, side))) / side - 0.5
    v = (np.arange(side)[None, :] + rng.random((side, side))) / side - 0.5
    u, v = (u * a.length).ravel(), (v * a.width).ravel()
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    px, py = a.cx + c * u - s * v, a.cy + s * u + c * v
    inter = np.count_nonzero(inside_rect(px, py, b.cx, b.cy, b.length, b.width, b.yaw)) / u.size * a.bev_area
    return inter / (a.bev_area + b.bev_area - inter)


def brute_dbscan(pts: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Textbook DBSCAN by breadth-first density reachability over a full distance matrix.

    Border points reachable from several clusters go to the nearest core
    point (lowest index on ties). Returns one label per point, -1 for noise,
    with clusters numbered in order of their lowest member.
    """
    n = len(pts)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    nbr = d <= eps
    core = nbr.sum(1) >= min_pts
    comp = -np.ones(n, dtype=int)
    k = 0
    for s in range(n):
        if not core[s] or comp[s] >= 0:
            continue
        comp[s] = k
        q = deque([s])
        while q:
            u = q.popleft()
            for v in np.flatnonzero(nbr[u] & core):
                if comp[v] < 0:
                    comp[v] = k
                    q.append(v)
        k += 1
    labels = comp.copy()
    for i in range(n):
        if core[i]:
            continue
        cand = np.flatnonzero(nbr[i] & core)
        if len(cand):
            j = min(cand, key=lambda c: (d[i, c], c))
            labels[i] = comp[j]
    # renumber by lowest member
    order = {}
    for i in range(n):
        if labels[i] >= 0 and labels[i] not in order:
            order[labels[i]] = len(order)
    return np.array([order[x] if x >= 0 else -1 for x in labels])


def brute_rect_area(points: np.ndarray, n_angles: int = 360) -> float:
    """Smallest bounding-rectangle area over evenly spaced orientations in [0, pi/2)."""
    best = math.inf
    for t in np.linspace(0, math.pi / 2, n_angles, endpoint=False):
        c, s = math.cos(t), math.sin(t)
        u = points[:, 0] * c + points[:, 1] * s
        v = -points[:, 0] * s + points[:, 1] * c
        best = min(best, (u.max() - u.min()) * (v.max() - v.min()))
    return best


def ray_box_hit(origin, direction, center, size, yaw) -> float | None:
    """Distance along a ray to a yaw-rotated box, by testing each face plane."""
    origin = np.asarray(origin, float)
    direction = np.asarray(direction, float)
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]])
    o = rot @ (origin - np.asarray(center, float))
    d = rot @ direction
    half = np.asarray(size, float) / 2
    best = None
    for axis in range(3):
        if abs(d[axis]) < 1e-15:
            continue
        for sign in (-1, 1):
            t = (sign * half[axis] - o[axis]) / d[axis]
            if t < 0:
                continue
            p = o + t * d
            others = [k for k in range(3) if k != axis]
            if all(abs(p[k]) <= half[k] + 1e-9 for k in others):
                best = t if best is None else min(best, t)
    return best


def brute_pr_curve_ap(dets, gts, iou, thr: float, recall_points: int = 40) -> float:
    """AP from an explicit precision list, for small single-frame cases.

    ``iou`` is a callable over (det, gt). Detections are processed by
    descending score; each takes the best unused gt at or above ``thr``.
    """
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, k))
    used = set()
    tp = fp = 0
    prec, rec = [], []
    for k in order:
        cands = [(iou(dets[k], g), j) for j, g in enumerate(gts) if j not in used]
        cands = [c for c in cands if c[0] >= thr]
        if cands:
            used.add(max(cands)[1])
            tp += 1
        else:
            fp += 1
        prec.append(tp / (tp + fp))
        rec.append(tp / len(gts))
    total = 0.0
    for i in range(1, recall_points + 1):
        r = i / recall_points
        ok = [p for p, q in zip(prec, rec) if q >= r - 1e-12]
        total += max(ok) if ok else 0.0
    return total / recall_points
