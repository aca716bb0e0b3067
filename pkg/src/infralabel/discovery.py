"""Label-free discovery of moving objects from a stationary sensor.

Points that persist across temporal segments of a recording are background;
the rest are clustered, boxed, filtered with common-sense rules, tracked,
and finally given the size observed where each object came closest to the
sensor.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geom import CollinearInput, OrientedBox, PointCloud, aabb_rect, min_area_rect
from .labels import LabelSet
from .params import DiscoveryParams

log = logging.getLogger(__name__)


class TooFewFrames(ValueError):
    pass


class EmptyAfterRemoval(ValueError):
    """Ground removal left nothing; the frame yields an empty label set."""


def segment_frames(num_frames: int, num_segments: int) -> list[range]:
    """Split ``range(num_frames)`` into contiguous chunks whose sizes differ by at most one."""
    if num_segments < 1 or num_frames < num_segments:
        raise TooFewFrames(f"{num_frames} frames cannot form {num_segments} segments")
    base, extra = divmod(num_frames, num_segments)
    out, start = [], 0
    for t in range(num_segments):
        size = base + (1 if t < extra else 0)
        out.append(range(start, start + size))
        start += size
    return out


# -- persistence ----------------------------------------------------------------------


def _xyz(cloud) -> np.ndarray:
    return cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


_KEY_BITS = 21
_KEY_LIMIT = 1 << (_KEY_BITS - 1)


def dedup_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact row deduplication: returns (unique rows, inverse index).

    Rows are bucketed by a packed millimetre key; any row that differs from
    its bucket representative is kept as a separate entry, so the result is
    exact without a lexicographic sort over three columns.
    """
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) == 0:
        return pts.reshape(0, 3), np.zeros(0, dtype=np.int64)
    q = np.round(pts * 1000.0)
    if not np.all(np.abs(q) < _KEY_LIMIT):
        uniq, inv = np.unique(pts, axis=0, return_inverse=True)
        return uniq, inv.reshape(-1)
    q = (q.astype(np.int64) + _KEY_LIMIT)
    key = (q[:, 0] << (2 * _KEY_BITS)) | (q[:, 1] << _KEY_BITS) | q[:, 2]
    _, first, inv = np.unique(key, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    rep = pts[first]
    odd = np.flatnonzero(np.any(pts != rep[inv], axis=1))
    if len(odd):
        inv = inv.copy()
        inv[odd] = len(rep) + np.arange(len(odd))
        rep = np.concatenate([rep, pts[odd]])
    return rep, inv


def snap_to_grid(xyz: np.ndarray, pitch: float) -> np.ndarray:
    """Round coordinates to a cubic grid so that noisy repeated returns coincide."""
    return np.round(np.asarray(xyz, dtype=np.float64) / pitch) * pitch


class PersistenceIndex:
    """Neighbor-count index over T aggregated segment clouds.

    Repeated returns from a static sensor land on identical coordinates, so
    all segment points are stored once with a per-segment multiplicity
    table. Counts are exact.
    """

    def __init__(self, segment_clouds: Sequence, radius: float) -> None:
        if len(segment_clouds) < 2:
            raise ValueError("persistence needs at least two segments")
        parts = [_xyz(seg) for seg in segment_clouds]
        sizes = [len(p) for p in parts]
        pts = np.concatenate(parts) if sum(sizes) else np.zeros((0, 3))
        seg = np.repeat(np.arange(len(parts)), sizes)
        points, self._inverse = dedup_points(pts)
        t = len(parts)
        flat = np.bincount(self._inverse * t + seg, minlength=len(points) * t)
        self._setup(points, flat.reshape(len(points), t).astype(np.float64), radius)

    @classmethod
    def from_weights(cls, points: np.ndarray, weights: np.ndarray, radius: float) -> "PersistenceIndex":
        """Build from distinct points and their (N, T) per-segment multiplicities."""
        if weights.shape[1] < 2:
            raise ValueError("persistence needs at least two segments")
        self = cls.__new__(cls)
        self._inverse = np.arange(len(points))
        self._setup(np.asarray(points, dtype=np.float64), np.asarray(weights, dtype=np.float64), radius)
        return self

    def _setup(self, points: np.ndarray, weights: np.ndarray, radius: float) -> None:
        self.radius = radius
        self.points = points
        self.weights = weights
        self._tree = cKDTree(points) if len(points) else None

    @property
    def num_segments(self) -> int:
        return self.weights.shape[1]

    def _counts_unique(self, uq: np.ndarray, block: int = 131072, max_pairs: int = 8_000_000) -> np.ndarray:
        out = np.zeros((len(uq), self.num_segments))
        if self._tree is None or not len(uq):
            return out
        # blocks bound the size of the pair list, so they are cut by neighbor
        # count as well as by length; rows of dedup output are sorted along x,
        # so each block is a compact slab
        ends = np.cumsum(self._tree.query_ball_point(uq, self.radius, return_length=True))
        lo = 0
        while lo < len(uq):
            done = ends[lo - 1] if lo else 0
            hi = int(np.searchsorted(ends, done + max_pairs, side="right"))
            hi = min(max(hi, lo + 1), lo + block)
            q = uq[lo:hi]
            pairs = cKDTree(q).sparse_distance_matrix(self._tree, self.radius, output_type="ndarray")
            near = csr_matrix((np.ones(len(pairs)), (pairs["i"], pairs["j"])), shape=(len(q), len(self.points)))
            out[lo:hi] = near @ self.weights
            lo = hi
        return out

    def counts(self, query) -> np.ndarray:
        """(N, T) neighbor counts within ``radius``."""
        uq, inv = dedup_points(_xyz(query))
        return self._counts_unique(uq)[inv]

    def scores(self, query) -> np.ndarray:
        return entropy_scores(self.counts(query))

    def point_scores(self) -> np.ndarray:
        """Scores of the distinct indexed points (rows of ``points``)."""
        return entropy_scores(self._counts_unique(self.points))

    def member_scores(self) -> np.ndarray:
        """Scores of the indexed segment points, in input order."""
        return self.point_scores()[self._inverse]


def entropy_scores(counts: np.ndarray) -> np.ndarray:
    """Normalized Shannon entropy of each row of segment counts; rows summing to 0 score 0."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(total > 0, counts / total, 0.0)
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    h = -plogp.sum(axis=1) / math.log(counts.shape[1])
    return np.clip(h, 0.0, 1.0)


def pp_scores(query, segment_clouds: Sequence, r: float) -> np.ndarray:
    """Per-point persistence score in [0, 1]: high means seen in every segment."""
    return PersistenceIndex(segment_clouds, r).scores(query)


# -- ground -----------------------------------------------------------------------------


@dataclass(frozen=True)
class GroundPlane:
    normal: tuple[float, float, float]
    offset: float
    fallback: bool = False

    def height(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz) @ np.asarray(self.normal) + self.offset


def fit_ground_plane(xyz: np.ndarray, params: DiscoveryParams, rng: np.random.Generator) -> GroundPlane:
    """RANSAC plane over the lowest points; falls back to a horizontal plane at min z."""
    z = xyz[:, 2]
    low = xyz[z <= np.percentile(z, params.ground_percentile)]
    plane = _ransac(low, params, rng) if len(low) >= 3 else None
    if plane is None:
        return GroundPlane((0.0, 0.0, 1.0), -float(z.min()), fallback=True)
    return plane


def _ransac(low: np.ndarray, params: DiscoveryParams, rng: np.random.Generator) -> GroundPlane | None:
    thr = params.ransac_threshold
    tri = low[rng.integers(0, len(low), size=(params.ransac_iterations, 3))]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(normals, axis=1)
    ok = norm > 1e-9
    if not ok.any():
        return None
    normals = normals[ok] / norm[ok, None]
    normals *= np.where(normals[:, 2] < 0, -1.0, 1.0)[:, None]
    offsets = -np.einsum("ij,ij->i", normals, tri[ok, 0])
    sample = low if len(low) <= 2000 else low[rng.integers(0, len(low), size=2000)]
    inliers = (np.abs(sample @ normals.T + offsets) <= thr).sum(axis=0)
    k = int(np.argmax(inliers))
    if inliers[k] < 3:
        return None
    n, d = normals[k], offsets[k]
    members = low[np.abs(low @ n + d) <= thr]
    centroid = members.mean(axis=0)
    _, vecs = np.linalg.eigh(np.cov(members.T))
    n_ref = vecs[:, 0] if vecs[2, 0] >= 0 else -vecs[:, 0]
    if n_ref[2] < math.cos(math.radians(30)):
        return None
    return GroundPlane(tuple(float(v) for v in n_ref), float(-n_ref @ centroid))


def remove_ground(cloud: PointCloud, params: DiscoveryParams, rng: np.random.Generator | None = None,
                  return_plane: bool = False):
    """Drop points within the inlier threshold of the fitted ground plane."""
    if len(cloud) == 0:
        raise EmptyAfterRemoval("empty cloud")
    rng = rng if rng is not None else np.random.default_rng(0)
    plane = fit_ground_plane(cloud.xyz, params, rng)
    keep = np.abs(plane.height(cloud.xyz)) > params.ransac_threshold
    if not keep.any():
        raise EmptyAfterRemoval(f"frame {cloud.frame}: nothing left after ground removal")
    out = cloud.subset(np.flatnonzero(keep))
    return (out, plane) if return_plane else out


# -- clustering ---------------------------------------------------------------------------


def cluster_transient(points, eps: float, min_pts: int) -> list[np.ndarray]:
    """DBSCAN with Euclidean distance; returns index arrays ordered by lowest member.

    Core points (>= min_pts neighbors within eps, self included) are linked
    into clusters; each border point joins the cluster of its nearest core
    neighbor (lowest index on ties); everything else is noise.
    """
    pts = _xyz(points)
    n = len(pts)
    if n == 0:
        return []
    tree = cKDTree(pts)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    i, j = (pairs[:, 0], pairs[:, 1]) if len(pairs) else (np.zeros(0, int), np.zeros(0, int))
    degree = np.bincount(i, minlength=n) + np.bincount(j, minlength=n) + 1
    core = degree >= min_pts
    labels = np.full(n, -1, dtype=np.int64)
    if not core.any():
        return []

    cc = core[i] & core[j]
    adj = coo_matrix((np.ones(int(cc.sum())), (i[cc], j[cc])), shape=(n, n))
    _, comp = connected_components(adj, directed=False)
    labels[core] = comp[core]

    # border points: pairs joining exactly one core point
    b_mask = core[i] ^ core[j]
    if b_mask.any():
        bi, bj = i[b_mask], j[b_mask]
        border = np.where(core[bi], bj, bi)
        anchor = np.where(core[bi], bi, bj)
        dist = np.linalg.norm(pts[border] - pts[anchor], axis=1)
        order = np.lexsort((anchor, dist, border))
        border, anchor = border[order], anchor[order]
        first = np.ones(len(border), dtype=bool)
        first[1:] = border[1:] != border[:-1]
        labels[border[first]] = labels[anchor[first]]

    clusters: dict[int, list[int]] = {}
    for idx in np.flatnonzero(labels >= 0):
        clusters.setdefault(int(labels[idx]), []).append(int(idx))
    return sorted((np.array(v, dtype=np.int64) for v in clusters.values()), key=lambda a: int(a[0]))


# -- boxes ---------------------------------------------------------------------------------


def cluster_box(xyz: np.ndarray, min_width: float = 0.05, **kw) -> OrientedBox:
    """Min-area BEV rectangle plus the vertical extent of the points."""
    try:
        (cx, cy), length, width, yaw = min_area_rect(xyz[:, :2])
    except CollinearInput:
        (cx, cy), length, width, yaw = aabb_rect(xyz[:, :2], min_width)
    width = max(width, min_width)
    length = max(length, width)
    zmin, zmax = float(xyz[:, 2].min()), float(xyz[:, 2].max())
    height = max(zmax - zmin, min_width)
    return OrientedBox(cx, cy, 0.5 * (zmin + zmax), length, width, height, yaw, **kw)


def fit_and_filter(clusters: Iterable[np.ndarray], cloud, params: DiscoveryParams,
                   plane: GroundPlane | None = None) -> list[OrientedBox]:
    """Box every cluster and keep those passing the point-count, volume and height rules.

    Heights for the top/bottom rules are measured above ``plane`` (sensor z
    when no plane is given).
    """
    xyz = _xyz(cloud)
    lo, hi = params.volume_range
    boxes = []
    for idx in clusters:
        n = len(idx)
        if n < params.min_box_points:
            continue
        pts = xyz[idx]
        box = cluster_box(pts, score=min(1.0, n / params.score_points))
        if not lo <= box.volume <= hi:
            continue
        h = plane.height(pts) if plane is not None else pts[:, 2]
        if h.max() < params.top_min or h.min() > params.bottom_max:
            continue
        boxes.append(box)
    return boxes


def passes_filters(box: OrientedBox, n_points: int, params: DiscoveryParams, ground_z: float = 0.0) -> bool:
    """Post-hoc check of the common-sense rules for a box over a flat ground at ``ground_z``."""
    lo, hi = params.volume_range
    return (
        n_points >= params.min_box_points
        and lo <= box.volume <= hi
        and box.top - ground_z >= params.top_min
        and box.bottom - ground_z <= params.bottom_max
    )


# -- tracking --------------------------------------------------------------------------


@dataclass
class Track:
    track_id: int
    members: list[tuple[int, int]] = field(default_factory=list)  # (frame, box index)
    size: tuple[float, float, float] | None = None

    def __len__(self) -> int:
        return len(self.members)

    @property
    def last_frame(self) -> int:
        return self.members[-1][0]


def track_labels(boxes_by_frame: dict[int, list[OrientedBox]], gate: float = 2.0,
                 min_len: int = 3) -> list[Track]:
    """Greedy nearest-neighbor association of BEV centers between consecutive frames."""
    tracks: list[Track] = []
    active: list[Track] = []
    next_id = 0
    prev_frame = None
    for frame in sorted(boxes_by_frame):
        boxes = boxes_by_frame[frame]
        if prev_frame is None or frame != prev_frame + 1:
            active = []
        cands = []
        for ti, tr in enumerate(active):
            f, bi = tr.members[-1]
            last = boxes_by_frame[f][bi]
            for j, b in enumerate(boxes):
                d = math.hypot(b.cx - last.cx, b.cy - last.cy)
                if d <= gate:
                    cands.append((d, ti, j))
        cands.sort()
        used_t, used_b = set(), set()
        nxt = []
        for d, ti, j in cands:
            if ti in used_t or j in used_b:
                continue
            used_t.add(ti)
            used_b.add(j)
            active[ti].members.append((frame, j))
            nxt.append(active[ti])
        for j in range(len(boxes)):
            if j not in used_b:
                tr = Track(next_id, [(frame, j)])
                next_id += 1
                tracks.append(tr)
                nxt.append(tr)
        active = sorted(nxt, key=lambda t: t.track_id)
        prev_frame = frame
    return [t for t in tracks if len(t) >= min_len]


def refine_track_sizes(tracks: Sequence[Track], boxes_by_frame: dict[int, list[OrientedBox]],
                       sensor_xy: tuple[float, float] = (0.0, 0.0)) -> dict[int, list[OrientedBox]]:
    """Give every track member the size of the member nearest the sensor (BEV).

    Centers, yaw and bottom faces are preserved. Only track members are
    returned, in track order per frame.
    """
    out: dict[int, list[OrientedBox]] = {}
    sx, sy = sensor_xy
    for tr in tracks:
        members = [(f, bi, boxes_by_frame[f][bi]) for f, bi in tr.members]
        _, _, ref = min(members, key=lambda m: (math.hypot(m[2].cx - sx, m[2].cy - sy), m[0]))
        tr.size = (ref.length, ref.width, ref.height)
        for f, _, b in members:
            nb = b.replace(length=ref.length, width=ref.width, height=ref.height,
                           cz=b.bottom + 0.5 * ref.height)
            out.setdefault(f, []).append(nb)
    return out


def track_members(tracks: Sequence[Track], boxes_by_frame) -> dict[int, list[OrientedBox]]:
    """Track members with their own fitted sizes, in track order per frame."""
    out: dict[int, list[OrientedBox]] = {}
    for tr in tracks:
        for f, bi in tr.members:
            out.setdefault(f, []).append(boxes_by_frame[f][bi])
    return out


# -- orchestration ----------------------------------------------------------------------


@dataclass
class FrameDiagnostics:
    n_points: int
    n_nonground: int
    n_transient: int
    n_clusters: int
    n_boxes: int
    error: str = ""


@dataclass
class DiscoveryResult:
    sensor_id: str
    labels: dict[int, LabelSet]
    raw_boxes: dict[int, list[OrientedBox]]
    tracks: list[Track]
    diagnostics: dict[int, FrameDiagnostics]
    scores: dict[int, np.ndarray] | None = None
    tags: dict[int, np.ndarray] | None = None

    def boxes_per_frame(self) -> float:
        return sum(len(ls) for ls in self.labels.values()) / max(len(self.labels), 1)


def discover(frames: Iterable[PointCloud], params: DiscoveryParams | None = None, seed: int = 0,
             sensor_id: str | None = None, keep_scores: bool = False,
             track_refine: bool | None = None, num_frames: int | None = None) -> DiscoveryResult:
    """Run segment -> persistence -> ground removal -> clustering -> filters -> tracking.

    ``frames`` must come in increasing frame order. Pass ``num_frames`` to
    consume a lazy iterable one segment at a time; otherwise it is
    materialized first. Per-frame failures are logged and yield empty sets.
    With ``params.pp_voxel`` > 0, non-ground points are snapped to that grid
    before scoring and clustering, which trades a few centimetres for speed
    on noisy, dense scans.
    """
    from .rng import stream

    params = params or DiscoveryParams()
    refine = params.track_refine if track_refine is None else track_refine
    if num_frames is None:
        frames = list(frames)
        num_frames = len(frames)
    segs = segment_frames(num_frames, params.num_segments)
    it = iter(frames)

    order: list[int] = []
    planes: dict[int, GroundPlane] = {}
    diag: dict[int, FrameDiagnostics] = {}
    local_idx: dict[int, np.ndarray] = {}
    tags: dict[int, np.ndarray] = {}
    seg_points, seg_counts, seg_of = [], [], {}
    for t, seg in enumerate(segs):
        chunk = []
        for _ in seg:
            cloud = next(it)
            f = cloud.frame
            if order and f <= order[-1]:
                raise ValueError(f"frames out of order: {f} after {order[-1]}")
            order.append(f)
            seg_of[f] = t
            sensor_id = sensor_id if sensor_id is not None else cloud.sensor_id
            try:
                ng, plane = remove_ground(cloud, params, stream(seed, "ground", sensor_id, f), return_plane=True)
            except EmptyAfterRemoval as exc:
                log.info("%s frame %d: %s", sensor_id, f, exc)
                ng, plane = cloud.subset(np.zeros(0, dtype=np.int64)), None
                diag[f] = FrameDiagnostics(len(cloud), 0, 0, 0, 0, "EmptyAfterRemoval")
            else:
                planes[f] = plane
                diag[f] = FrameDiagnostics(len(cloud), len(ng), 0, 0, 0)
            chunk.append(ng.xyz if params.pp_voxel == 0 else snap_to_grid(ng.xyz, params.pp_voxel))
            if keep_scores:
                tags[f] = ng.tags
        pts, inv = dedup_points(np.concatenate(chunk) if chunk else np.zeros((0, 3)))
        seg_points.append(pts)
        seg_counts.append(np.bincount(inv, minlength=len(pts)))
        start = 0
        for f, c in zip(order[len(order) - len(chunk):], chunk):
            local_idx[f] = inv[start:start + len(c)].astype(np.int32)
            start += len(c)

    # merge the per-segment tables into one multiplicity matrix
    points, ginv = dedup_points(np.concatenate(seg_points))
    weights = np.zeros((len(points), len(segs)))
    offsets = np.cumsum([0] + [len(p) for p in seg_points])
    for t in range(len(segs)):
        g = ginv[offsets[t]:offsets[t + 1]]
        weights[:, t] = np.bincount(g, weights=seg_counts[t], minlength=len(points))
    del seg_points, seg_counts
    unique_scores = PersistenceIndex.from_weights(points, weights, params.pp_radius).point_scores()

    raw: dict[int, list[OrientedBox]] = {}
    scores_out: dict[int, np.ndarray] = {}
    for f in order:
        t = seg_of[f]
        gidx = ginv[offsets[t] + local_idx.pop(f)]
        sc = unique_scores[gidx]
        if keep_scores:
            scores_out[f] = sc
        transient = gidx[sc < params.pp_threshold]
        pts = points[transient]
        clusters = cluster_transient(pts, params.dbscan_eps, params.dbscan_min_pts)
        boxes = fit_and_filter(clusters, pts, params, planes[f]) if f in planes else []
        raw[f] = boxes
        d = diag[f]
        d.n_transient, d.n_clusters, d.n_boxes = len(transient), len(clusters), len(boxes)

    tracks = track_labels(raw, params.track_gate, params.track_min_len)
    final = refine_track_sizes(tracks, raw) if refine else track_members(tracks, raw)
    sid = sensor_id or ""
    labels = {f: LabelSet(f, sid, final.get(f, [])) for f in order}
    return DiscoveryResult(sid, labels, raw, tracks, diag,
                           scores_out if keep_scores else None, tags if keep_scores else None)
