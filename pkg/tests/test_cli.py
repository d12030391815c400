import json
import subprocess
import sys

import numpy as np
import pytest

from auscultation.cli import main
from auscultation.landmarks import VALVES
from auscultation.pointcloud import load_ply


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_json(root / "scene.json", {"noise": None})
    assert main(["generate-scene", "--config", str(cfg), "--out", str(root / "scene"), "--seed", "3"]) == 0
    assert main(["register", "--scene", str(root / "scene"), "--out", str(root / "reg")]) == 0
    return root


def test_generate_scene_outputs(scene):
    s = scene / "scene"
    manifest = json.loads((s / "manifest.json").read_text())
    assert manifest["seed"] == 3 and len(manifest["frames"]) == 5
    for name in manifest["frames"]:
        assert (s / f"{name}_color.png").exists() and (s / f"{name}_depth.png").exists()
    gt = json.loads((s / "ground_truth_valves.json").read_text())
    assert set(gt) == set(VALVES) | {"frame"}
    assert (s / "template_nipple.png").exists() and (s / "template_navel.png").exists()


def test_register_outputs(scene):
    reg = scene / "reg"
    cloud = load_ply(reg / "merged.ply")
    assert len(cloud) > 1000
    poses = json.loads((reg / "poses.json").read_text())
    assert len(poses) == 5
    assert "iterations" in json.loads((reg / "registration.json").read_text())


def test_estimate_landings_end_to_end(scene, capsys):
    code, out, _ = run(["estimate-landings", "--scene", scene / "scene", "--cloud", scene / "reg" / "merged.ply",
                        "--out", scene / "land"], capsys)
    assert code == 0
    est = json.loads((scene / "land" / "landing_positions.json").read_text())
    gt = json.loads((scene / "scene" / "ground_truth_valves.json").read_text())
    for v in VALVES:
        assert np.linalg.norm(np.subtract(est[v], gt[v])) <= 2.0
    assert json.loads(out)["frame"] == "base"


def test_simulate_contact(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"scenario": "static", "target_force": 10.0, "push_in": 6.0})
    code, out, _ = run(["simulate-contact", "--config", cfg, "--out", tmp_path, "--seed", 2], capsys)
    assert code == 0
    assert abs(json.loads(out)["steady_state_error_pct"]) <= 2.0
    header = (tmp_path / "force_trace.csv").read_text().splitlines()[0]
    assert header == "t,force_N,compression_mm,actuator_mm,in_contact"
    assert json.loads((tmp_path / "contact_config.json").read_text())["seed"] == 2


def test_experiment_and_stats(tmp_path, capsys):
    code, out, _ = run(["experiment", "force", "--trials", 3, "--out", tmp_path, "--seed", 4], capsys)
    assert code == 0 and json.loads(out)["rows"] == 9
    first = (tmp_path / "force.csv").read_bytes()
    assert main(["experiment", "force", "--trials", "3", "--out", str(tmp_path), "--seed", "4"]) == 0
    assert (tmp_path / "force.csv").read_bytes() == first
    capsys.readouterr()
    code, out, _ = run(["stats", "--csv", tmp_path / "force.csv", "--value", "steady_state_N",
                        "--group", "target_N"], capsys)
    assert code == 0
    pairs = json.loads(out)["pairs"]
    assert set(pairs) == {"5.000000_vs_10.000000", "5.000000_vs_15.000000", "10.000000_vs_15.000000"}
    assert all(p["p"] < 1e-6 for p in pairs.values())


def test_experiment_config_file_and_seed_override(tmp_path, capsys):
    cfg = write_json(tmp_path / "e.json", {"experiment": "force", "trials": 2, "seed": 9,
                                           "modules": {"targets": [5.0]}})
    code, _, _ = run(["experiment", "force", "--config", cfg, "--out", tmp_path / "a"], capsys)
    assert code == 0
    summary = json.loads((tmp_path / "a" / "force_summary.json").read_text())
    assert summary["seed"] == 9 and summary["trials"] == 2
    run(["experiment", "force", "--config", cfg, "--out", tmp_path / "b", "--seed", 1], capsys)
    assert json.loads((tmp_path / "b" / "force_summary.json").read_text())["seed"] == 1


@pytest.mark.parametrize("argv,code,kind", [
    (["frobnicate"], 2, "UsageError"),
    (["experiment", "dance"], 2, "UsageError"),
    (["simulate-contact", "--seed", "-1"], 2, "UsageError"),
    (["register", "--scene", "/nonexistent/scene"], 1, "FileNotFoundError"),
    (["estimate-landings"], 1, "ValueError"),
    (["stats", "--csv", "/nonexistent.csv", "--value", "a", "--group", "b"], 1, "FileNotFoundError"),
])
def test_failures_emit_json(argv, code, kind, capsys, tmp_path):
    got, _, err = run(argv + ["--out", tmp_path] if argv[0] != "frobnicate" else argv, capsys)
    assert got == code
    record = json.loads(err.strip().splitlines()[-1])
    assert record["error"] == kind
    assert set(record) == {"error", "message", "command"}


def test_bad_config_keys_fail(tmp_path, capsys):
    cfg = write_json(tmp_path / "x.json", {"scenario": "sideways"})
    code, _, err = run(["simulate-contact", "--config", cfg, "--out", tmp_path], capsys)
    assert code == 1 and "sideways" in json.loads(err)["message"]
    cfg = write_json(tmp_path / "y.json", {"experiment": "landing"})
    code, _, err = run(["experiment", "force", "--config", cfg, "--out", tmp_path], capsys)
    assert code == 1 and json.loads(err)["command"] == "experiment"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "auscultation", "simulate-contact", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["defined"] is True
    proc = subprocess.run([sys.executable, "-m", "auscultation", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "0.1.0" in proc.stdout
