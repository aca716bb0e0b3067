"""Command-line entry point: ``infralabel {gen,discover,broadcast,eval,pipeline}``.

Every stage reads and writes plain files under ``--out``:

    scenario.json            validated scenario (seed override applied)
    clouds/<sensor>/*.cvpc   ray-cast scans
    gt/<sensor>.jsonl        ground truth per sensor, in the sensor frame
    labels/<rsu>.jsonl       discovered boxes per roadside unit
    ego/<name>.jsonl         ego pseudo-labels
    eval/*.json, *.csv       reports
    manifest.json            hashes, seeds, parameters and timings

Exit codes: 0 ok, 1 I/O or missing inputs, 2 bad configuration, 3 empty
ground truth.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence

from . import __version__
from .broadcast import BroadcastContext, EgoPseudoLabelSet, build_ego_dataset
from .discovery import discover
from .evaluation import EvalConfig, NoGroundTruth, cross_csv, cross_eval, evaluate
from .io import FormatError, cloud_path, dumps_labels, encode_cloud, read_cloud, read_labels, sha256_file
from .labels import LabelSet
from .params import ScenarioError, SchemaError, params_hash, to_doc
from .rng import stream
from .sim import Scanner, gt_labels, load_scenario, sensor_pose, world_snapshot
from .sim.world import ego_pose

log = logging.getLogger("infralabel")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NO_GT = 0, 1, 2, 3
MANIFEST = "manifest.json"
GEN_CHUNK = 40


class MissingInput(OSError):
    pass


# -- helpers ---------------------------------------------------------------------------------


def _pool_map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))


def _available_bytes() -> int | None:
    try:
        with open("/proc/meminfo") as fh:
            for line in fh:
                if line.startswith("MemAvailable:"):
                    return int(line.split()[1]) * 1024
    except OSError:
        pass
    return None


def _write_text(path: Path, text: str) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode("utf-8")
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


@lru_cache(maxsize=4)
def _scenario(out: str):
    path = Path(out) / "scenario.json"
    if not path.exists():
        raise MissingInput(f"{path} not found; run 'gen' first")
    return load_scenario(path)


class Manifest:
    """Run bookkeeping persisted as ``manifest.json``."""

    def __init__(self, out: Path) -> None:
        self.out = out
        path = out / MANIFEST
        self.doc = json.loads(path.read_text()) if path.exists() else {
            "tool": "infralabel", "version": __version__, "stages": {}, "files": {}}

    def record(self, stage: str, seconds: float, outputs: Iterable[str], files: dict[str, str], **extra) -> None:
        self.doc["version"] = __version__
        self.doc["stages"][stage] = {"seconds": round(seconds, 3), "outputs": sorted(outputs), **extra}
        self.doc["files"].update(files)
        self.doc["files"] = dict(sorted(self.doc["files"].items()))
        self.save()

    def save(self) -> None:
        (self.out / MANIFEST).write_text(json.dumps(self.doc, indent=1, sort_keys=True) + "\n")

    def verify(self) -> list[str]:
        bad = []
        for rel, digest in self.doc.get("files", {}).items():
            p = self.out / rel
            if not p.exists() or sha256_file(p) != digest:
                bad.append(rel)
        return bad


# -- gen -----------------------------------------------------------------------------------------


def _gen_chunk(task) -> list[tuple[int, str, LabelSet]]:
    out, sid, frames = task
    s = _scenario(out)
    is_ego = s.ego is not None and sid == s.ego.sensor_id
    rig = s.ego.rig if is_ego else s.rsu(sid).rig
    region = s.pipeline.ego_region if is_ego else s.pipeline.rsu_region
    scanner = Scanner(rig)
    res = []
    for f in frames:
        snap = world_snapshot(s, f)
        pose = sensor_pose(s, sid, f)
        rng = stream(s.seed, "lidar", sid, f) if rig.range_noise_sigma > 0 else None
        cloud = scanner.scan(pose, snap, rng, f)
        data = encode_cloud(cloud)
        path = cloud_path(Path(out), sid, f)
        path.write_bytes(data)
        res.append((f, hashlib.sha256(data).hexdigest(), gt_labels(snap, pose, region, f, sid)))
    return res


def cmd_gen(scenario: str, out: Path, seed: int | None = None, jobs: int = 1) -> int:
    t0 = time.time()
    src = Path(scenario)
    try:
        doc = json.loads(src.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"not valid JSON (line {exc.lineno}, column {exc.colno})") from exc
    if not isinstance(doc, dict):
        raise SchemaError("$", "expected an object")
    if seed is not None:
        doc["seed"] = seed
    s = load_scenario(doc)
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    files = {"scenario.json": _write_text(out / "scenario.json", text)}
    _scenario.cache_clear()

    tasks = []
    for sid in s.sensor_ids:
        (out / "clouds" / sid).mkdir(parents=True, exist_ok=True)
        for lo in range(0, s.num_frames, GEN_CHUNK):
            tasks.append((str(out), sid, list(range(lo, min(lo + GEN_CHUNK, s.num_frames)))))
    results = _pool_map(_gen_chunk, tasks, jobs)

    gts: dict[str, list[LabelSet]] = {sid: [] for sid in s.sensor_ids}
    for (_, sid, _), chunk in zip(tasks, results):
        for f, digest, gt in chunk:
            files[str(cloud_path(Path("."), sid, f))] = digest
            gts[sid].append(gt)
    for sid, sets in gts.items():
        files[f"gt/{sid}.jsonl"] = _write_text(out / "gt" / f"{sid}.jsonl", dumps_labels(sets))
    m = Manifest(out)
    m.doc["scenario"] = {"path": "scenario.json", "source": str(src), "sha256": files["scenario.json"],
                         "name": s.name}
    m.doc["seeds"] = {"scenario": s.seed}
    m.record("gen", time.time() - t0, ["scenario.json", "clouds", "gt"], files,
             sensors=s.sensor_ids, frames=s.num_frames)
    print(f"gen: {len(s.sensor_ids)} sensors x {s.num_frames} frames -> {out}")
    return EXIT_OK


# -- discover ----------------------------------------------------------------------------------


def _cloud_stream(out: Path, sid: str, n: int):
    for f in range(n):
        p = cloud_path(out, sid, f)
        if not p.exists():
            raise MissingInput(f"missing cloud {p}")
        yield read_cloud(p, f, sid)


def _discover_rsu(task):
    out, sid, overrides = task
    s = _scenario(out)
    params = dataclasses.replace(s.pipeline.discovery, **overrides)
    res = discover(_cloud_stream(Path(out), sid, s.num_frames), params, s.seed, sid, num_frames=s.num_frames)
    text = dumps_labels(res.labels.values())
    digest = _write_text(Path(out) / "labels" / f"{sid}.jsonl", text)
    errors = sum(1 for d in res.diagnostics.values() if d.error)
    return sid, digest, res.boxes_per_frame(), len(res.tracks), errors


def cmd_discover(out: Path, overrides: dict | None = None, jobs: int = 1) -> int:
    t0 = time.time()
    s = _scenario(str(out))
    overrides = overrides or {}
    params = dataclasses.replace(s.pipeline.discovery, **overrides)
    params.validate()
    for r in s.rsus:
        if not cloud_path(out, r.sensor_id, 0).exists():
            raise MissingInput(f"no clouds for {r.sensor_id}; run 'gen' first")
    # each unit holds its whole recording's persistence table; keep workers within memory
    avail = _available_bytes()
    workers = jobs if avail is None else max(1, min(jobs, int(avail // 1.6e9)))
    results = _pool_map(_discover_rsu, [(str(out), r.sensor_id, overrides) for r in s.rsus], workers)
    files = {}
    for sid, digest, bpf, ntracks, errors in results:
        files[f"labels/{sid}.jsonl"] = digest
        print(f"discover {sid}: {bpf:.2f} boxes/frame, {ntracks} tracks, {errors} degenerate frames")
    Manifest(out).record("discover", time.time() - t0, ["labels"], files,
                         params=to_doc(params), params_hash=params_hash(params), overrides=overrides)
    return EXIT_OK


# -- broadcast ------------------------------------------------------------------------------


def _broadcast_ctx(out: Path, noise: bool, refine: bool, fuse: str | None,
                   delay: float | None = None) -> BroadcastContext:
    s = _scenario(str(out))
    labels = {}
    for r in s.rsus:
        p = out / "labels" / f"{r.sensor_id}.jsonl"
        if not p.exists():
            raise MissingInput(f"{p} not found; run 'discover' first")
        labels[r.sensor_id] = read_labels(p)
    ego_sid = s.ego.sensor_id
    channel = dataclasses.replace(s.channel, noise_enabled=noise)
    if delay is not None:
        channel = dataclasses.replace(channel, delay=delay)
        channel.validate()
    return BroadcastContext(
        rsu_poses=[(r.sensor_id, r.pose) for r in s.rsus],
        rsu_labels=labels,
        ego_poses=lambda f: ego_pose(s, f),
        ego_cloud=lambda f: read_cloud(cloud_path(out, ego_sid, f), f, ego_sid),
        channel=channel,
        params=s.pipeline,
        seed=s.seed,
        frame_rate=s.frame_rate,
        refine=refine,
        ego_centric=read_labels(Path(fuse)) if fuse else {},
    )


def _broadcast_chunk(task) -> list[EgoPseudoLabelSet]:
    out, frames, noise, refine, fuse, delay = task
    ctx = _broadcast_ctx(Path(out), noise, refine, fuse, delay)
    return list(build_ego_dataset(frames, ctx).values())


def cmd_broadcast(out: Path, noise: bool | None = None, refine: bool | None = None, fuse: str | None = None,
                  name: str = "pseudo_labels", jobs: int = 1, delay: float | None = None) -> int:
    t0 = time.time()
    s = _scenario(str(out))
    if s.ego is None:
        raise ScenarioError("$.ego", "broadcast needs an ego vehicle")
    noise = s.channel.noise_enabled if noise is None else noise
    refine = s.pipeline.refine.enabled if refine is None else refine
    delay = s.channel.delay if delay is None else delay
    _broadcast_ctx(out, noise, refine, fuse, delay)  # fail early on missing inputs
    if not cloud_path(out, s.ego.sensor_id, 0).exists():
        raise MissingInput("no ego clouds; run 'gen' first")
    frames = list(range(s.num_frames))
    size = max(1, -(-len(frames) // max(jobs, 1)))
    tasks = [(str(out), frames[i:i + size], noise, refine, fuse, delay) for i in range(0, len(frames), size)]
    sets = [ls for chunk in _pool_map(_broadcast_chunk, tasks, jobs) for ls in chunk]
    rel = f"ego/{name}.jsonl"
    digest = _write_text(out / rel, dumps_labels(sets))
    n = sum(len(ls) for ls in sets)
    print(f"broadcast: {n} pseudo-labels over {len(sets)} ego frames (noise {'on' if noise else 'off'}, "
          f"delay {delay:g} s, refine {'on' if refine else 'off'}{', fused' if fuse else ''}) -> {rel}")
    Manifest(out).record(f"broadcast:{name}", time.time() - t0, [rel], {rel: digest},
                         noise=noise, delay=delay, refine=refine, fuse=fuse)
    return EXIT_OK


# -- eval -------------------------------------------------------------------------------------------


def _emit_report(report_json: str, report_csv: str, prefix: Path | None) -> dict[str, str]:
    if prefix is None:
        sys.stdout.write(report_json)
        return {}
    return {
        str(prefix) + ".json": _write_text(Path(str(prefix) + ".json"), report_json),
        str(prefix) + ".csv": _write_text(Path(str(prefix) + ".csv"), report_csv),
    }


def cmd_eval(preds: list[str], gts: list[str], config: EvalConfig, cross: bool = False, ranges: bool = False,
             report: Path | None = None, seed: int | None = None) -> int:
    if len(preds) != len(gts):
        raise ScenarioError("--pred/--gt", "need the same number of prediction and ground-truth files")
    try:
        pred_sets = [read_labels(Path(p)) for p in preds]
        gt_sets = [read_labels(Path(g)) for g in gts]
    except OSError as exc:
        raise MissingInput(str(exc)) from exc
    if cross:
        names_p = [Path(p).stem for p in preds]
        names_g = [Path(g).stem for g in gts]
        if not any(ls.boxes for g in gt_sets for ls in g.values()):
            raise NoGroundTruth("ground truth is empty")
        m = cross_eval(dict(zip(names_p, pred_sets)), dict(zip(names_g, gt_sets)), config)
        _emit_report(json.dumps(m, indent=2, sort_keys=True) + "\n", cross_csv(m), report)
        return EXIT_OK
    merged_p = _merge(pred_sets)
    merged_g = _merge(gt_sets)
    rep = evaluate(merged_p, merged_g, config, seed=seed, ranges=ranges)
    _emit_report(rep.to_json(), rep.to_csv(), report)
    return EXIT_OK


def _merge(sets: list[dict[int, LabelSet]]) -> dict[int, LabelSet]:
    """Combine several files; frames are keyed by (file, frame) to stay distinct."""
    if len(sets) == 1:
        return sets[0]
    out = {}
    for k, s in enumerate(sets):
        for f, ls in s.items():
            out[k * 1_000_000 + f] = ls
    return out


# -- pipeline ---------------------------------------------------------------------------------


def _pipeline_eval(out: Path, name: str) -> dict[str, str]:
    s = _scenario(str(out))
    files = {}
    rsu_cfg = EvalConfig(class_agnostic=True, region=s.pipeline.rsu_region)
    labels, truths = {}, {}
    for r in s.rsus:
        sid = r.sensor_id
        labels[sid] = read_labels(out / "labels" / f"{sid}.jsonl")
        truths[sid] = read_labels(out / "gt" / f"{sid}.jsonl")
        try:
            rep = evaluate(labels[sid], truths[sid], rsu_cfg, seed=s.seed)
        except NoGroundTruth:
            log.warning("%s: no ground truth in region", sid)
            continue
        files.update(_emit_report(rep.to_json(), rep.to_csv(), out / "eval" / f"{sid}"))
        m = rep.metrics["Agnostic"]
        print(f"eval {sid}: precision {_pct(m.precision)} recall {_pct(m.recall)} AP {_pct(m.ap)}")
    cross = cross_eval(labels, truths, rsu_cfg)
    files.update(_emit_report(json.dumps(cross, indent=2, sort_keys=True) + "\n", cross_csv(cross),
                              out / "eval" / "cross"))
    if s.ego is not None:
        ego_cfg = EvalConfig(region=s.pipeline.ego_region)
        preds = read_labels(out / "ego" / f"{name}.jsonl")
        gt = read_labels(out / "gt" / f"{s.ego.sensor_id}.jsonl")
        try:
            rep = evaluate(preds, gt, ego_cfg, seed=s.seed, ranges=True)
            files.update(_emit_report(rep.to_json(), rep.to_csv(), out / "eval" / name))
            for label, m in rep.metrics.items():
                print(f"eval ego {label}: precision {_pct(m.precision)} recall {_pct(m.recall)} AP {_pct(m.ap)}")
        except NoGroundTruth:
            log.warning("ego: no ground truth in region")
    return {str(Path(k).relative_to(out)): v for k, v in files.items()}


def _pct(v) -> str:
    return "n/a" if v is None else f"{100 * v:.1f}%"


def cmd_pipeline(scenario: str, out: Path, seed: int | None = None, jobs: int = 1, noise: bool | None = None,
                 refine: bool | None = None, fuse: str | None = None, overrides: dict | None = None,
                 delay: float | None = None) -> int:
    cmd_gen(scenario, out, seed, jobs)
    cmd_discover(out, overrides, jobs)
    s = _scenario(str(out))
    if s.ego is not None:
        cmd_broadcast(out, noise, refine, fuse, "pseudo_labels", jobs, delay)
    t0 = time.time()
    files = _pipeline_eval(out, "pseudo_labels")
    Manifest(out).record("eval", time.time() - t0, ["eval"], files)
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------------


def _onoff(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def _add_discovery_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("discovery overrides")
    g.add_argument("--pp-threshold", type=float)
    g.add_argument("--pp-radius", type=float)
    g.add_argument("--pp-voxel", type=float, metavar="METERS",
                   help="snap points to this grid before scoring (0: exact; try 0.05 for noisy, dense rigs)")
    g.add_argument("--num-segments", type=int)
    g.add_argument("--dbscan-eps", type=float)
    g.add_argument("--dbscan-min-pts", type=int)
    g.add_argument("--track-refine", type=_onoff, metavar="on|off")


def _overrides(ns) -> dict:
    keys = ("pp_threshold", "pp_radius", "pp_voxel", "num_segments", "dbscan_eps", "dbscan_min_pts", "track_refine")
    return {k: getattr(ns, k) for k in keys if getattr(ns, k, None) is not None}


def _add_broadcast_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--noise", type=_onoff, metavar="on|off", help="channel noise (default: scenario setting)")
    p.add_argument("--delay", type=float, metavar="SECONDS", help="channel delay (default: scenario setting)")
    p.add_argument("--refine", type=_onoff, metavar="on|off", help="ego-side box refinement")
    p.add_argument("--fuse", metavar="LABELS", help="ego-centric labels (JSON lines) to fuse with")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands accept the global flags too; suppressing their defaults keeps
    # them from overwriting values given before the subcommand name
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, help="override the scenario seed", **kw)
    p.add_argument("--jobs", type=int, help="worker processes", **({"default": 1} | kw))
    p.add_argument("--out", type=Path, help="run directory", **kw)
    p.add_argument("--verify", action="store_true", help="re-hash manifest files after the command", **kw)
    p.add_argument("-v", "--verbose", action="store_true", **kw)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    ap = argparse.ArgumentParser(prog="infralabel", description=__doc__.split("\n")[0],
                                 parents=[_global_flags(suppress=False)])
    sub = ap.add_subparsers(dest="command")

    p = sub.add_parser("gen", parents=[common], help="simulate scans and ground truth")
    p.add_argument("scenario")

    p = sub.add_parser("discover", parents=[common], help="discover moving objects per roadside unit")
    _add_discovery_flags(p)

    p = sub.add_parser("broadcast", parents=[common], help="aggregate roadside labels for the ego")
    _add_broadcast_flags(p)
    p.add_argument("--name", default="pseudo_labels", help="output name under ego/")

    p = sub.add_parser("eval", parents=[common], help="score labels against ground truth")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--agnostic", action="store_true", help="merge all classes into one")
    p.add_argument("--iou", type=float, help="IoU threshold for class-agnostic scoring")
    p.add_argument("--region", type=float, nargs=4, metavar=("X0", "X1", "Y0", "Y1"))
    p.add_argument("--cross", action="store_true", help="matrix of each --pred against each --gt")
    p.add_argument("--ranges", action="store_true", help="add distance-bin breakdown")
    p.add_argument("--report", type=Path, help="write PREFIX.json and PREFIX.csv instead of stdout")

    p = sub.add_parser("pipeline", parents=[common], help="gen, discover, broadcast and eval in sequence")
    p.add_argument("scenario")
    _add_discovery_flags(p)
    _add_broadcast_flags(p)
    return ap


def _run(ns) -> int:
    out = ns.out
    cmd = ns.command
    if cmd in ("gen", "discover", "broadcast", "pipeline") and out is None:
        raise ScenarioError("--out", "a run directory is required")
    if cmd == "gen":
        return cmd_gen(ns.scenario, out, ns.seed, ns.jobs)
    if cmd == "discover":
        return cmd_discover(out, _overrides(ns), ns.jobs)
    if cmd == "broadcast":
        return cmd_broadcast(out, ns.noise, ns.refine, ns.fuse, ns.name, ns.jobs, ns.delay)
    if cmd == "eval":
        region = None
        if ns.region:
            x0, x1, y0, y1 = ns.region
            region = ((x0, x1), (y0, y1))
        kw = {"class_agnostic": ns.agnostic or ns.cross, "region": region}
        if ns.iou is not None:
            kw["agnostic_iou"] = ns.iou
        return cmd_eval(ns.pred, ns.gt, EvalConfig(**kw), ns.cross, ns.ranges, ns.report, ns.seed)
    if cmd == "pipeline":
        return cmd_pipeline(ns.scenario, out, ns.seed, ns.jobs, ns.noise, ns.refine, ns.fuse, _overrides(ns),
                            ns.delay)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if ns.command is None and not ns.verify:
        parser.print_help()
        return EXIT_CONFIG
    try:
        code = _run(ns) if ns.command else EXIT_OK
        if ns.verify:
            if ns.out is None:
                raise ScenarioError("--out", "--verify needs a run directory")
            bad = Manifest(ns.out).verify()
            for rel in bad:
                print(f"verify: MISMATCH {rel}", file=sys.stderr)
            print(f"verify: {len(Manifest(ns.out).doc.get('files', {})) - len(bad)} files ok, {len(bad)} bad")
            code = code or (EXIT_IO if bad else EXIT_OK)
        return code
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoGroundTruth as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_GT
    except (OSError, FormatError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
