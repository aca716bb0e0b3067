from __future__ import annotations

import csv
import json
import shutil
from pathlib import Path

import pytest

from infralabel.cli import main
from infralabel.fixtures import crossroads_path, truncate
from infralabel.io import read_labels

FRAMES = 30


@pytest.fixture(scope="module")
def small_scenario(tmp_path_factory) -> Path:
    doc = truncate(json.loads(crossroads_path().read_text()), FRAMES)
    p = tmp_path_factory.mktemp("scn") / "small.json"
    p.write_text(json.dumps(doc))
    return p


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, small_scenario) -> Path:
    out = tmp_path_factory.mktemp("run")
    assert main(["gen", str(small_scenario), "--out", str(out)]) == 0
    assert main(["discover", "--out", str(out), "--pp-threshold", "0.45"]) == 0
    assert main(["broadcast", "--out", str(out)]) == 0
    return out


def manifest(out: Path) -> dict:
    return json.loads((out / "manifest.json").read_text())


# -- gen -----------------------------------------------------------------------------------------------


def test_gen_layout(run_dir):
    sensors = sorted(p.name for p in (run_dir / "clouds").iterdir())
    assert sensors == ["ego", "rsu_0", "rsu_1", "rsu_2", "rsu_3"]
    for sid in sensors:
        assert len(list((run_dir / "clouds" / sid).glob("*.cvpc"))) == FRAMES
        assert (run_dir / "gt" / f"{sid}.jsonl").exists()
    m = manifest(run_dir)
    assert m["tool"] == "infralabel" and m["scenario"]["sha256"]
    assert {"gen", "discover", "broadcast:pseudo_labels"} <= set(m["stages"])
    assert all(st["seconds"] >= 0 for st in m["stages"].values())


def test_gen_is_reproducible_across_job_counts(tmp_path, small_scenario, run_dir):
    doc = truncate(json.loads(small_scenario.read_text()), 12)
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(doc))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen", str(p), "--out", str(a), "--jobs", "1"]) == 0
    assert main(["gen", str(p), "--out", str(b), "--jobs", "2"]) == 0
    assert manifest(a)["files"] == manifest(b)["files"]


def test_seed_override_recorded(tmp_path, small_scenario):
    doc = truncate(json.loads(small_scenario.read_text()), 10)
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(doc))
    out = tmp_path / "o"
    assert main(["--seed", "99", "--out", str(out), "gen", str(p)]) == 0
    assert manifest(out)["seeds"]["scenario"] == 99
    assert json.loads((out / "scenario.json").read_text())["seed"] == 99


@pytest.mark.parametrize("mutate, needle", [
    (lambda d: d["actors"][3].update(waypoints=[[5, 0, 0], [2, 1, 1]]), "actors[3].waypoints"),
    (lambda d: d["rsus"][1].pop("x"), "rsus[1]"),
    (lambda d: d.update(num_frames=-4), "num_frames"),
])
def test_bad_scenario_exits_2_naming_the_field(tmp_path, capsys, mutate, needle):
    doc = json.loads(crossroads_path().read_text())
    mutate(doc)
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    assert main(["gen", str(p), "--out", str(tmp_path / "o")]) == 2
    assert needle in capsys.readouterr().err


def test_unparsable_scenario_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{ not json")
    assert main(["gen", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "$" in capsys.readouterr().err


def test_missing_scenario_exits_1(tmp_path):
    assert main(["gen", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1


# -- discover ----------------------------------------------------------------------------------------


def test_discover_outputs_and_override(run_dir, capsys):
    for k in range(4):
        assert (run_dir / "labels" / f"rsu_{k}.jsonl").exists()
    stage = manifest(run_dir)["stages"]["discover"]
    assert stage["overrides"] == {"pp_threshold": 0.45}
    assert stage["params"]["pp_threshold"] == 0.45


def test_discover_without_inputs_exits_1(tmp_path):
    assert main(["discover", "--out", str(tmp_path)]) == 1


def test_static_only_scenario(tmp_path):
    doc = {"seed": 1, "num_frames": 12, "actors": [],
           "static_boxes": [{"x": 8, "y": 3, "length": 4, "width": 3, "height": 3}],
           "rsus": [{"sensor_id": "pole", "x": 0, "y": 0, "beams": 32, "azimuth_steps": 360, "max_range": 40}]}
    p = tmp_path / "static.json"
    p.write_text(json.dumps(doc))
    out = tmp_path / "o"
    assert main(["gen", str(p), "--out", str(out)]) == 0
    assert main(["discover", "--out", str(out)]) == 0
    assert (out / "labels" / "pole.jsonl").read_text() == ""


# -- broadcast ---------------------------------------------------------------------------------------


def test_broadcast_writes_dataset(run_dir):
    labels = read_labels(run_dir / "ego" / "pseudo_labels.jsonl")
    assert labels and all(b.label in ("Car", "Pedestrian", "Cyclist", "Unknown") for ls in labels.values()
                          for b in ls.boxes)
    stage = manifest(run_dir)["stages"]["broadcast:pseudo_labels"]
    assert stage["noise"] is False and stage["refine"] is False


def test_broadcast_flag_variants(run_dir):
    assert main(["broadcast", "--out", str(run_dir), "--noise", "on", "--delay", "0.1", "--refine", "on",
                 "--name", "noisy"]) == 0
    stage = manifest(run_dir)["stages"]["broadcast:noisy"]
    assert (stage["noise"], stage["delay"], stage["refine"]) == (True, 0.1, True)
    assert (run_dir / "ego" / "noisy.jsonl").exists()


def test_broadcast_fuse(run_dir, tmp_path):
    fuse = tmp_path / "ego_centric.jsonl"
    shutil.copy(run_dir / "gt" / "ego.jsonl", fuse)
    assert main(["broadcast", "--out", str(run_dir), "--fuse", str(fuse), "--name", "fused"]) == 0
    fused = read_labels(run_dir / "ego" / "fused.jsonl")
    gt = read_labels(fuse)
    assert sum(map(len, fused.values())) >= sum(map(len, gt.values())) * 0.9


def test_broadcast_without_stage1_exits_1(tmp_path, small_scenario):
    doc = truncate(json.loads(small_scenario.read_text()), 10)
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(doc))
    out = tmp_path / "o"
    assert main(["gen", str(p), "--out", str(out)]) == 0
    assert main(["broadcast", "--out", str(out)]) == 1


def test_bad_flag_value_is_rejected():
    with pytest.raises(SystemExit) as info:
        main(["broadcast", "--noise", "maybe"])
    assert info.value.code == 2


# -- eval ---------------------------------------------------------------------------------------------


def test_eval_identical_labels(run_dir, tmp_path):
    gt = run_dir / "gt" / "ego.jsonl"
    prefix = tmp_path / "rep"
    assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--report", str(prefix)]) == 0
    rep = json.loads(Path(str(prefix) + ".json").read_text())
    for label, m in rep["metrics"].items():
        if m["tp"]:
            assert (m["precision"], m["recall"], m["ap"]) == (1.0, 1.0, 1.0)
    assert Path(str(prefix) + ".csv").read_text().startswith("scope,class,metric,value")


def test_eval_to_stdout(run_dir, capsys):
    gt = str(run_dir / "gt" / "rsu_0.jsonl")
    assert main(["eval", "--pred", gt, "--gt", gt, "--agnostic"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["metrics"]["Agnostic"]["ap"] == 1.0


def test_eval_cross_matrix(run_dir, tmp_path):
    preds = [str(run_dir / "labels" / f"rsu_{k}.jsonl") for k in range(4)]
    gts = [str(run_dir / "gt" / f"rsu_{k}.jsonl") for k in range(4)]
    prefix = tmp_path / "cross"
    assert main(["eval", "--cross", "--pred", *preds, "--gt", *gts, "--report", str(prefix)]) == 0
    rows = list(csv.reader(Path(str(prefix) + ".csv").read_text().splitlines()))
    assert len(rows) == 5 and all(len(r) == 5 for r in rows)


def test_eval_ranges(run_dir, capsys):
    gt = str(run_dir / "gt" / "ego.jsonl")
    assert main(["eval", "--pred", gt, "--gt", gt, "--ranges"]) == 0
    assert set(json.loads(capsys.readouterr().out)["bins"]) == {"0-30", "30-80"}


def test_eval_empty_gt_exits_3(run_dir, tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert main(["eval", "--pred", str(run_dir / "gt" / "ego.jsonl"), "--gt", str(empty)]) == 3


def test_eval_unreadable_inputs_exit_1(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{broken\n")
    assert main(["eval", "--pred", str(bad), "--gt", str(bad)]) == 1
    assert main(["eval", "--pred", str(tmp_path / "x"), "--gt", str(tmp_path / "y")]) == 1


# -- manifest ------------------------------------------------------------------------------------------


def test_verify_detects_tampering(run_dir, tmp_path, capsys):
    copy = tmp_path / "copy"
    shutil.copytree(run_dir, copy)
    assert main(["--verify", "--out", str(copy)]) == 0
    assert "0 bad" in capsys.readouterr().out
    victim = copy / "labels" / "rsu_2.jsonl"
    victim.write_text(victim.read_text() + "\n")
    assert main(["--verify", "--out", str(copy)]) == 1
    assert "labels/rsu_2.jsonl" in capsys.readouterr().err
