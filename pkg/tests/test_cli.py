from __future__ import annotations

import json

import pytest

from ovmap.cli import main
from ovmap.config import PipelineConfig


def run(capsys, *argv):
    code = main(["--log-level", "quiet", *map(str, argv)])
    out, err = capsys.readouterr()
    return code, out, err


def report(text):
    rows = {}
    for line in text.splitlines():
        if line.startswith("#") or not line.strip():
            continue
        metric, split, value = line.split()
        rows[(metric, split)] = float(value)
    return rows


def test_build_map_one_box(capsys, one_box, tmp_path):
    _, _, path = one_box
    code, out, _ = run(capsys, "build-map", path, "-o", tmp_path / "map")
    assert code == 0 and out.strip().endswith("instances=1")
    doc = json.loads((tmp_path / "map" / "map.json").read_text())
    assert doc["config"] == PipelineConfig().to_dict()


def test_semantic_only_over_merges_touching_boxes(capsys, scene_dir, tmp_path):
    path, _ = scene_dir("touching")
    for name, extra in (("full", []), ("sem", ["--ablate", "semantic-only"])):
        assert run(capsys, "build-map", path, "-o", tmp_path / name, *extra)[0] == 0
    full = report(run(capsys, "eval", "map", tmp_path / "full", path / "gt.json")[1])
    sem = report(run(capsys, "eval", "map", tmp_path / "sem", path / "gt.json")[1])
    assert full[("instances", "count")] == full[("gt_instances", "count")] == 2
    assert sem[("instances", "count")] < sem[("gt_instances", "count")]


def test_ground_prints_choice_and_trace(capsys, chair_table, tmp_path):
    path, _ = chair_table
    run(capsys, "build-map", path, "-o", tmp_path / "map")
    assert run(capsys, "aggregate", tmp_path / "map", "--provider", "synthetic")[0] == 0
    code, out, _ = run(capsys, "ground", tmp_path / "map", "--instruction", "Prepare the chair, I want to eat.",
                       "--mock-llm", path / "mock_llm.json")
    assert code == 0
    fields = dict(f.split("=", 1) for f in out.split())
    trace = json.loads(open(fields["trace"]).read())
    assert int(fields["chosen"]) == trace["chosen"]
    assert trace["instruction"] == "Prepare the chair, I want to eat." and trace["config"]["candidates"] == 8
    assert len(trace["prompts"]) == 2


def test_config_round_trip_reproduces_map(capsys, scene_dir, tmp_path):
    path, _ = scene_dir("touching")
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"tau_thres": 0.55}))
    run(capsys, "build-map", path, "-o", tmp_path / "a", "--config", cfg_file, "--dump-config", tmp_path / "eff.json")
    assert json.loads((tmp_path / "eff.json").read_text())["tau_thres"] == 0.55
    run(capsys, "build-map", path, "-o", tmp_path / "b", "--config", tmp_path / "eff.json")
    assert (tmp_path / "a" / "map.json").read_bytes() == (tmp_path / "b" / "map.json").read_bytes()


def test_export_ply(capsys, one_box, tmp_path):
    _, _, path = one_box
    code, out, _ = run(capsys, "export-ply", path, "-o", tmp_path / "scene.ply")
    assert code == 0 and "masks=3" in out
    assert (tmp_path / "scene.ply").read_bytes().startswith(b"ply\n")


def test_gen_scene_builtin(capsys, tmp_path):
    code, out, _ = run(capsys, "gen-scene", "builtin:one-box", "-o", tmp_path / "s")
    assert code == 0 and (tmp_path / "s" / "manifest.json").exists()


@pytest.mark.parametrize("argv,kind,code", [
    (["build-map"], "usage", 2),
    (["frobnicate"], "usage", 2),
    (["build-map", "/nonexistent/scene", "-o", "/tmp/x", "--bogus"], "usage", 2),
    (["build-map", "/nonexistent/scene", "-o", "/tmp/x"], "scene_load", 1),
    (["gen-scene", "builtin:nope", "-o", "/tmp/x"], "usage", 2),
])
def test_errors_are_one_machine_readable_line(capsys, argv, kind, code):
    got, _, err = run(capsys, *argv)
    assert got == code
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith(f"ovmap: error[{kind}]: ")


def test_bad_config_file(capsys, one_box, tmp_path):
    _, _, path = one_box
    (tmp_path / "c.json").write_text(json.dumps({"tau_obs": 7}))
    code, _, err = run(capsys, "build-map", path, "-o", tmp_path / "m", "--config", tmp_path / "c.json")
    assert code == 1 and err.startswith("ovmap: error[config]:")
