"""Command-line entry point.

Every subcommand accepts ``--config`` (JSON file), ``--out`` (output
directory) and ``--seed``. On failure a single JSON object
``{"error": ..., "message": ..., "command": ...}`` is written to stderr and
the exit code is nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .contact import ContactSimConfig, dynamic_scenario, simulate_contact, static_scenario, trace_metrics
from .geometry import RigidTransform, save_poses
from .harness import (
    EXPERIMENTS,
    ExperimentConfig,
    compute_stats,
    default_templates,
    prepare_surfaces,
    run_experiment,
)
from .landmarks import AnatomicalMap, DetectionConfig, estimate_landing_positions, landmarks_to_dict
from .pointcloud import load_frame, load_ply, save_frame, save_ply, transform_cloud
from .registration import MultiwayProblem, multiway_register
from .scenegen import (
    CaptureProtocol,
    LidarNoiseModel,
    TorsoModel,
    TorsoParams,
    capture_sequence,
    random_placement,
    read_manifest,
    write_manifest,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _take(cfg: dict, allowed: set[str], what: str) -> dict:
    unknown = set(cfg) - allowed
    if unknown:
        raise ValueError(f"unknown {what} config keys: {sorted(unknown)}")
    return cfg


def _emit(result: dict) -> None:
    print(json.dumps(result, indent=2, sort_keys=True))


# --------------------------------------------------------------------------


def cmd_generate_scene(args) -> dict:
    """Render a capture sequence of the synthetic torso into ``--out``."""
    cfg = _take(_load_config(args.config), {"torso", "protocol", "noise", "placement"}, "scene")
    params = TorsoParams(**cfg.get("torso", {}))
    pose = RigidTransform.identity()
    if cfg.get("placement"):
        pl = cfg["placement"]
        pose = random_placement(np.random.default_rng(args.seed), pl.get("shift_mm", 20.0), pl.get("rot_deg", 5.0))
    torso = TorsoModel(params, pose)
    protocol = CaptureProtocol.from_dict(cfg.get("protocol", {}))
    noise_cfg = cfg.get("noise", {})
    noise = None if noise_cfg is None else LidarNoiseModel(**noise_cfg)
    frames = capture_sequence(torso, protocol, None, noise, args.seed)
    out = _out_dir(args)
    names = [f"frame_{k:02d}" for k in range(len(frames))]
    for name, frame in zip(names, frames):
        save_frame(out, name, frame)
    write_manifest(out / "manifest.json", torso, protocol, noise, args.seed, names)
    gt = {name: p.tolist() for name, p in torso.ground_truth_valves().items()}
    gt["frame"] = "base"
    (out / "ground_truth_valves.json").write_text(json.dumps(gt, indent=2) + "\n")
    for kind, tpl in default_templates(params).items():
        Image.fromarray(tpl).save(out / f"template_{kind}.png")
    return {"frames": len(frames), "out": str(out)}


def _load_scene(scene: str | Path):
    scene = Path(scene)
    manifest = read_manifest(scene / "manifest.json")
    frames = [load_frame(scene, name) for name in manifest["frames"]]
    return manifest, frames


def cmd_register(args) -> dict:
    """Register the frames of a scene directory; writes merged.ply and poses.json."""
    cfg = _take(_load_config(args.config), {"voxel_mm", "feedback", "solver"}, "register")
    if args.scene is None:
        raise ValueError("--scene is required")
    _, frames = _load_scene(args.scene)
    feedback = bool(cfg.get("feedback", True))
    surfaces = prepare_surfaces(frames, float(cfg.get("voxel_mm", 5.0)), feedback)
    result = multiway_register(MultiwayProblem.from_config(surfaces, cfg.get("solver")))
    out = _out_dir(args)
    merged = result.merged
    if not feedback:
        merged = transform_cloud(merged, frames[0].capture_pose, "base")
    save_ply(out / "merged.ply", merged)
    save_poses(out / "poses.json", result.poses)
    report = result.to_dict()
    report.pop("poses", None)
    (out / "registration.json").write_text(json.dumps(report, indent=2) + "\n")
    return {"iterations": result.iterations, "converged": result.converged, "points": len(merged),
            "warnings": result.warnings, "out": str(out)}


def _load_templates(cfg: dict, scene: Path) -> dict[str, np.ndarray]:
    paths = cfg.get("templates")
    if paths is None:
        paths = {k: scene / f"template_{k}.png" for k in ("nipple", "navel")}
    return {k: np.asarray(Image.open(v).convert("RGB")) for k, v in paths.items()}


def cmd_estimate_landings(args) -> dict:
    """Estimate valve landing positions from a scene and a merged cloud."""
    cfg = _take(_load_config(args.config),
                {"templates", "anatomical_map", "detection", "frontal_frame", "radius_mm"}, "landing")
    if args.scene is None or args.cloud is None:
        raise ValueError("--scene and --cloud are required")
    scene = Path(args.scene)
    _, frames = _load_scene(scene)
    merged = load_ply(args.cloud)
    amap_cfg = cfg.get("anatomical_map", {})
    amap = AnatomicalMap.from_file(amap_cfg) if isinstance(amap_cfg, str) else AnatomicalMap(**amap_cfg)
    landing, lm, body = estimate_landing_positions(
        frames, merged, _load_templates(cfg, scene), amap, DetectionConfig(**cfg.get("detection", {})),
        cfg.get("frontal_frame"), radius=float(cfg.get("radius_mm", 15.0)),
    )
    out = _out_dir(args)
    (out / "landing_positions.json").write_text(landing.to_json() + "\n")
    (out / "landmarks.json").write_text(json.dumps(landmarks_to_dict(lm), indent=2) + "\n")
    return {**json.loads(landing.to_json()), "out": str(out)}


def cmd_simulate_contact(args) -> dict:
    """Run one contact simulation; config is a scenario shortcut or a full sim config."""
    cfg = _load_config(args.config)
    scenario = cfg.pop("scenario", "dynamic")
    if scenario == "static":
        sim = static_scenario(float(cfg.pop("target_force", 5.0)), float(cfg.pop("push_in", 5.0)), args.seed,
                              **_overrides(cfg))
    elif scenario == "dynamic":
        sim = dynamic_scenario(float(cfg.pop("target_force", 5.0)), args.seed, **_overrides(cfg))
    elif scenario == "custom":
        sim = ContactSimConfig.from_dict({**cfg, "seed": args.seed})
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    trace = simulate_contact(sim)
    metrics = trace_metrics(trace, sim.target_force)
    out = _out_dir(args)
    trace.to_csv(out / "force_trace.csv")
    (out / "contact_metrics.json").write_text(json.dumps(asdict(metrics), indent=2) + "\n")
    (out / "contact_config.json").write_text(json.dumps(sim.to_dict(), indent=2) + "\n")
    return {**asdict(metrics), "out": str(out)}


def _overrides(cfg: dict) -> dict:
    d = ContactSimConfig.from_dict(cfg)
    return {k: getattr(d, k) for k in cfg}


def cmd_experiment(args) -> dict:
    cfg = _load_config(args.config)
    cfg.setdefault("experiment", args.name)
    if cfg["experiment"] != args.name:
        raise ValueError(f"config is for {cfg['experiment']!r}, not {args.name!r}")
    if args.seed_given:
        cfg["seed"] = args.seed
    if args.trials is not None:
        cfg["trials"] = args.trials
    config = ExperimentConfig.from_dict(cfg)
    out = _out_dir(args)
    report = run_experiment(config, out)
    return {"experiment": args.name, "rows": len(report.rows), "out": str(out)}


def _read_csv(path: str) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def cmd_stats(args) -> dict:
    """Pairwise t-tests of one CSV column grouped by another."""
    cfg = _take(_load_config(args.config), {"csv", "value", "group", "where"}, "stats")
    path = args.csv or cfg.get("csv")
    value = args.value or cfg.get("value")
    group = args.group or cfg.get("group")
    if not (path and value and group):
        raise ValueError("stats needs a csv path, a value column and a group column")
    rows = _read_csv(path)
    for key, want in (cfg.get("where") or {}).items():
        rows = [r for r in rows if r.get(key) == str(want)]
    if not rows:
        raise ValueError("no rows selected")
    for col in (value, group):
        if col not in rows[0]:
            raise ValueError(f"column {col!r} not in {path}")
    groups: dict[str, list[float]] = {}
    for r in rows:
        try:
            v = float(r[value])
        except ValueError:
            continue
        if np.isfinite(v):
            groups.setdefault(r[group], []).append(v)
    keys = sorted(groups, key=_sort_key)
    pairs = {}
    for i, a in enumerate(keys):
        for b in keys[i + 1 :]:
            pairs[f"{a}_vs_{b}"] = compute_stats(groups[a], groups[b]).to_dict()
    result = {"value": value, "group": group, "pairs": pairs}
    if args.out:
        (_out_dir(args) / "stats.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def _sort_key(k: str):
    try:
        return (0, float(k), k)
    except ValueError:
        return (1, 0.0, k)


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--seed", type=int, help="random seed (default: 0, or the config's seed)")

    parser = _Parser(prog="auscultation", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate-scene", parents=[common], help="render a synthetic capture sequence")
    p = sub.add_parser("register", parents=[common], help="multi-way registration of a scene")
    p.add_argument("--scene", help="scene directory written by generate-scene")
    p = sub.add_parser("estimate-landings", parents=[common], help="valve landing positions")
    p.add_argument("--scene", help="scene directory")
    p.add_argument("--cloud", help="merged PLY from register")
    sub.add_parser("simulate-contact", parents=[common], help="constant-force contact simulation")
    p = sub.add_parser("experiment", parents=[common], help="run a full experiment")
    p.add_argument("name", choices=EXPERIMENTS)
    p.add_argument("--trials", type=int, help="override the trial count")
    p = sub.add_parser("stats", parents=[common], help="two-sample t-tests on an experiment CSV")
    p.add_argument("--csv", help="experiment CSV")
    p.add_argument("--value", help="numeric column")
    p.add_argument("--group", help="grouping column")
    return parser


COMMANDS = {
    "generate-scene": cmd_generate_scene,
    "register": cmd_register,
    "estimate-landings": cmd_estimate_landings,
    "simulate-contact": cmd_simulate_contact,
    "experiment": cmd_experiment,
    "stats": cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    command = next((a for a in argv if a in COMMANDS), None)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(json.dumps({"error": "UsageError", "message": str(exc), "command": command}), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    args.seed_given = args.seed is not None
    if not args.seed_given:
        args.seed = 0
    if args.seed < 0:
        print(json.dumps({"error": "UsageError", "message": "--seed must be non-negative", "command": command}),
              file=sys.stderr)
        return 2
    try:
        _emit(COMMANDS[args.command](args))
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON record
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1
    return 0
