"""Scoring labels against simulator ground truth in bird's-eye view.

Matching is greedy on BEV IoU. AP follows the KITTI recipe with 40 recall
points: detections are ranked by score and each takes the best still-free
ground-truth box above the threshold.
"""

from __future__ import annotations

import csv
import io
import json
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

from .geom import CLASSES, OrientedBox, bev_iou
from .labels import LabelSet
from .params import Region, params_hash

FOREGROUND = ("Car", "Pedestrian", "Cyclist")


class NoGroundTruth(ValueError):
    """AP is undefined without ground truth."""


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[tuple[str, float], ...] = (("Car", 0.5), ("Pedestrian", 0.3), ("Cyclist", 0.3))
    class_agnostic: bool = False
    agnostic_iou: float = 0.3
    recall_points: int = 40
    region: Region | None = None
    range_bins: tuple[tuple[float, float], ...] = ((0.0, 30.0), (30.0, 80.0))

    def __post_init__(self) -> None:
        for label, thr in self.iou_thresholds:
            if not 0 < thr <= 1:
                raise ValueError(f"IoU threshold for {label} must lie in (0, 1]")
        if not 0 < self.agnostic_iou <= 1:
            raise ValueError("agnostic IoU must lie in (0, 1]")
        if self.recall_points < 1:
            raise ValueError("recall_points must be >= 1")
        prev = -math.inf
        for lo, hi in self.range_bins:
            if not (prev <= lo < hi):
                raise ValueError("range bins must be ascending and non-overlapping")
            prev = hi

    def threshold(self, label: str) -> float:
        return dict(self.iou_thresholds).get(label, self.agnostic_iou)

    def classes(self) -> list[str]:
        return ["Agnostic"] if self.class_agnostic else [c for c, _ in self.iou_thresholds]

    def hash(self) -> str:
        return params_hash(self)


# -- matching ------------------------------------------------------------------------------


@dataclass
class MatchResult:
    matches: list[tuple[int, int, float]]
    tp: int
    fp: int
    fn: int


def match_greedy(dets: Sequence[OrientedBox], gts: Sequence[OrientedBox], iou_thr: float,
                 class_aware: bool = False) -> MatchResult:
    """One-to-one matching taking candidate pairs in descending IoU order."""
    pairs = []
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            if class_aware and d.label != g.label:
                continue
            v = bev_iou(d, g)
            if v >= iou_thr:
                pairs.append((-v, i, j))
    pairs.sort()
    used_d, used_g, matches = set(), set(), []
    for v, i, j in pairs:
        if i in used_d or j in used_g:
            continue
        used_d.add(i)
        used_g.add(j)
        matches.append((i, j, -v))
    tp = len(matches)
    return MatchResult(matches, tp, len(dets) - tp, len(gts) - tp)


def in_region(b: OrientedBox, region: Region | None) -> bool:
    if region is None:
        return True
    (x0, x1), (y0, y1) = region
    return x0 <= b.cx <= x1 and y0 <= b.cy <= y1


def _select(boxes: Iterable[OrientedBox], label: str, region: Region | None) -> list[OrientedBox]:
    if label == "Agnostic":
        return [b for b in boxes if in_region(b, region)]
    return [b for b in boxes if b.label == label and in_region(b, region)]


def _pairs(preds: Mapping[int, LabelSet], gts: Mapping[int, LabelSet]):
    for f in sorted(set(preds) | set(gts)):
        p = preds.get(f)
        g = gts.get(f)
        yield f, (p.boxes if p else []), (g.boxes if g else [])


# -- precision / recall -----------------------------------------------------------------------


@dataclass
class PRResult:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float | None:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else None

    @property
    def recall(self) -> float | None:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None


def precision_recall(preds: Mapping[int, LabelSet], gts: Mapping[int, LabelSet],
                     config: EvalConfig = EvalConfig()) -> dict[str, PRResult]:
    """Micro-averaged counts per class (or one "Agnostic" entry)."""
    out = {}
    for label in config.classes():
        thr = config.agnostic_iou if label == "Agnostic" else config.threshold(label)
        acc = PRResult(0, 0, 0)
        for _, p, g in _pairs(preds, gts):
            m = match_greedy(_select(p, label, config.region), _select(g, label, config.region), thr)
            acc.tp += m.tp
            acc.fp += m.fp
            acc.fn += m.fn
        out[label] = acc
    return out


# -- average precision ---------------------------------------------------------------------


def _ranked_hits(frames: Iterable[tuple[Sequence[OrientedBox], Sequence[OrientedBox]]], iou_thr: float):
    """(score, is_tp) for every detection, plus the ground-truth count."""
    hits, n_gt = [], 0
    for dets, gts in frames:
        n_gt += len(gts)
        free = list(range(len(gts)))
        order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, k))
        for k in order:
            d = dets[k]
            best, best_j = iou_thr, None
            for j in free:
                v = bev_iou(d, gts[j])
                if v >= best and (best_j is None or v > best):
                    best, best_j = v, j
            if best_j is not None:
                free.remove(best_j)
            hits.append((d.score, best_j is not None))
    return hits, n_gt


def ap_from_hits(hits: Sequence[tuple[float, bool]], n_gt: int, recall_points: int = 40) -> float:
    """Interpolated AP from (score, is_tp) pairs.

    Recall levels are compared in integers and precisions summed as exact
    fractions, so small hand-checkable cases come out correctly rounded.
    """
    if n_gt == 0:
        raise NoGroundTruth("no ground-truth boxes")
    ranked = sorted(range(len(hits)), key=lambda k: -hits[k][0])
    tp = fp = 0
    curve = []
    for k in ranked:
        if hits[k][1]:
            tp += 1
        else:
            fp += 1
        curve.append((tp, tp + fp))
    # best precision at or beyond each curve position
    best: list[Fraction] = [Fraction(0)] * (len(curve) + 1)
    for i in range(len(curve) - 1, -1, -1):
        best[i] = max(best[i + 1], Fraction(*curve[i]))
    total = Fraction(0)
    pos = 0
    for i in range(1, recall_points + 1):
        # first position whose recall tp / n_gt reaches i / recall_points
        while pos < len(curve) and curve[pos][0] * recall_points < i * n_gt:
            pos += 1
        total += best[pos]
    return float(total / recall_points)


def average_precision(dets, gts, iou_thr: float, recall_points: int = 40) -> float:
    """BEV AP with interpolated precision at ``recall_points`` recall levels in (0, 1].

    ``dets`` and ``gts`` are either box lists for a single frame or
    frame-aligned mappings of LabelSets.
    """
    if isinstance(dets, Mapping) or isinstance(gts, Mapping):
        frames = [(p, g) for _, p, g in _pairs(dets, gts)]
    else:
        frames = [(list(dets), list(gts))]
    hits, n_gt = _ranked_hits(frames, iou_thr)
    return ap_from_hits(hits, n_gt, recall_points)


def class_ap(preds: Mapping[int, LabelSet], gts: Mapping[int, LabelSet], label: str,
             config: EvalConfig = EvalConfig()) -> float | None:
    thr = config.agnostic_iou if label == "Agnostic" else config.threshold(label)
    frames = [(_select(p, label, config.region), _select(g, label, config.region)) for _, p, g in _pairs(preds, gts)]
    hits, n_gt = _ranked_hits(frames, thr)
    try:
        return ap_from_hits(hits, n_gt, config.recall_points)
    except NoGroundTruth:
        return None


# -- reports -----------------------------------------------------------------------------------


@dataclass
class ClassMetrics:
    precision: float | None
    recall: float | None
    ap: float | None
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    metrics: dict[str, ClassMetrics]
    metadata: dict = field(default_factory=dict)
    bins: dict[str, dict[str, ClassMetrics]] | None = None
    cross: dict | None = None

    def to_dict(self) -> dict:
        d = {"metadata": self.metadata, "metrics": {k: asdict(v) for k, v in self.metrics.items()}}
        if self.bins is not None:
            d["bins"] = {b: {k: asdict(v) for k, v in m.items()} for b, m in self.bins.items()}
        if self.cross is not None:
            d["cross"] = self.cross
        return d

    def to_json(self) -> str:
        return json.dumps(_round(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "class", "metric", "value"])
        for scope, table in [("all", self.metrics)] + sorted((self.bins or {}).items()):
            for label, m in table.items():
                for metric, value in asdict(m).items():
                    w.writerow([scope, label, metric, _fmt(value)])
        return buf.getvalue()


def _round(obj):
    if isinstance(obj, float):
        return round(obj, 10)
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round(v) for v in obj]
    return obj


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def _metrics(preds, gts, config: EvalConfig) -> dict[str, ClassMetrics]:
    pr = precision_recall(preds, gts, config)
    out = {}
    for label, r in pr.items():
        out[label] = ClassMetrics(r.precision, r.recall, class_ap(preds, gts, label, config), r.tp, r.fp, r.fn)
    return out


def evaluate(preds: Mapping[int, LabelSet], gts: Mapping[int, LabelSet], config: EvalConfig = EvalConfig(),
             seed: int | None = None, ranges: bool = False, origin: tuple[float, float] = (0.0, 0.0)) -> EvalReport:
    """Per-class (or class-agnostic) precision, recall and AP over aligned frames."""
    if not any(len(g.boxes) for g in gts.values()):
        raise NoGroundTruth("ground truth is empty")
    meta = {"config_hash": config.hash(), "seed": seed, "frames": len(set(preds) | set(gts)),
            "interpolation": f"R{config.recall_points}", "class_agnostic": config.class_agnostic}
    report = EvalReport(_metrics(preds, gts, config), meta)
    if ranges:
        report.bins = range_breakdown(preds, gts, origin, config.range_bins, config)
    return report


# -- cross evaluation and range bins ---------------------------------------------------------


def cross_eval(labels: Mapping[str, Mapping[int, LabelSet]], gts: Mapping[str, Mapping[int, LabelSet]],
               config: EvalConfig = EvalConfig(), metric: str = "ap") -> dict:
    """Matrix whose (i, j) entry scores location-i labels against location-j ground truth.

    Boxes are compared as stored (each in its own sensor frame). Scoring is
    class-agnostic; ``metric`` is "ap", "precision" or "recall".
    """
    cfg = EvalConfig(config.iou_thresholds, True, config.agnostic_iou, config.recall_points,
                     config.region, config.range_bins)
    names = sorted(labels)
    cols = sorted(gts)
    matrix = []
    for i in names:
        row = []
        for j in cols:
            if metric == "ap":
                row.append(class_ap(labels[i], gts[j], "Agnostic", cfg))
            else:
                r = precision_recall(labels[i], gts[j], cfg)["Agnostic"]
                row.append(getattr(r, metric))
        matrix.append(row)
    return {"rows": names, "cols": cols, "metric": metric, "matrix": matrix}


def diagonal_gap(cross: dict) -> tuple[float, float]:
    """(mean of diagonal, mean of off-diagonal) entries, ignoring absent values."""
    m = cross["matrix"]
    diag = [m[i][j] for i, r in enumerate(cross["rows"]) for j, c in enumerate(cross["cols"])
            if r == c and m[i][j] is not None]
    off = [m[i][j] for i, r in enumerate(cross["rows"]) for j, c in enumerate(cross["cols"])
           if r != c and m[i][j] is not None]
    mean = lambda v: sum(v) / len(v) if v else math.nan  # noqa: E731
    return mean(diag), mean(off)


def cross_csv(cross: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["labels\\gt", *cross["cols"]])
    for name, row in zip(cross["rows"], cross["matrix"]):
        w.writerow([name, *(_fmt(v) for v in row)])
    return buf.getvalue()


def _bin_of(b: OrientedBox, origin, bins) -> int | None:
    d = math.hypot(b.cx - origin[0], b.cy - origin[1])
    for k, (lo, hi) in enumerate(bins):
        if lo <= d < hi:
            return k
    return None


def range_breakdown(preds: Mapping[int, LabelSet], gts: Mapping[int, LabelSet], origin=(0.0, 0.0),
                    bins: Sequence[tuple[float, float]] = ((0.0, 30.0), (30.0, 80.0)),
                    config: EvalConfig = EvalConfig()) -> dict[str, dict[str, ClassMetrics]]:
    """Metrics per distance bin of the ground truth.

    A matched detection goes to its ground truth's bin; an unmatched one is
    binned by its own center. Bins without ground truth report AP absent.
    """
    out: dict[str, dict[str, ClassMetrics]] = {}
    for label in config.classes():
        thr = config.agnostic_iou if label == "Agnostic" else config.threshold(label)
        split: list[tuple[dict, dict]] = [({}, {}) for _ in bins]
        for f, p, g in _pairs(preds, gts):
            dets = _select(p, label, config.region)
            gs = _select(g, label, config.region)
            m = match_greedy(dets, gs, thr)
            det_bin = {i: _bin_of(gs[j], origin, bins) for i, j, _ in m.matches}
            for k in range(len(bins)):
                split[k][0][f] = LabelSet(f, "", [])
                split[k][1][f] = LabelSet(f, "", [])
            for i, d in enumerate(dets):
                k = det_bin[i] if i in det_bin else _bin_of(d, origin, bins)
                if k is not None:
                    split[k][0][f].boxes.append(d)
            for g_ in gs:
                k = _bin_of(g_, origin, bins)
                if k is not None:
                    split[k][1][f].boxes.append(g_)
        for k, (lo, hi) in enumerate(bins):
            key = f"{lo:g}-{hi:g}"
            sub_cfg = EvalConfig(config.iou_thresholds, config.class_agnostic, config.agnostic_iou,
                                 config.recall_points, None, config.range_bins)
            pr = precision_recall(split[k][0], split[k][1], sub_cfg)[label]
            ap = class_ap(split[k][0], split[k][1], label, sub_cfg)
            out.setdefault(key, {})[label] = ClassMetrics(pr.precision, pr.recall, ap, pr.tp, pr.fp, pr.fn)
    return out


__all__ = [
    "CLASSES", "FOREGROUND", "EvalConfig", "EvalReport", "ClassMetrics", "MatchResult", "NoGroundTruth",
    "PRResult", "average_precision", "class_ap", "cross_csv", "cross_eval", "diagonal_gap", "evaluate",
    "match_greedy", "precision_recall", "range_breakdown",
]
