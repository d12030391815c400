"""Experiment harness: registration, landing and force trials plus statistics.

Every experiment returns an :class:`ExperimentReport` whose rows are sorted
by (condition, trial) and carry their own seed, so a single trial can be
replayed and the CSV bytes do not depend on execution order.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .contact import dynamic_scenario, simulate_contact, static_scenario, trace_metrics
from .landmarks import (
    VALVES,
    AnatomicalMap,
    DetectionConfig,
    LandmarkDetectionError,
    DegenerateLandmarksError,
    body_frame_from_points,
    estimate_landing_positions,
    map_valves,
    project_to_surface,
)
from .pointcloud import PointCloud, deproject, transform_cloud, voxel_downsample
from .registration import MultiwayProblem, multiway_register
from .scenegen import CaptureProtocol, LidarNoiseModel, TorsoModel, TorsoParams, capture_sequence, marker_template, random_placement

CSV_SCHEMA_VERSION = 1
EXPERIMENTS = ("registration", "landing", "force")

# errors a single trial may raise without aborting the whole experiment
TRIAL_ERRORS = (LandmarkDetectionError, DegenerateLandmarksError, ValueError, np.linalg.LinAlgError)


# --------------------------------------------------------------------------
# statistics


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 3e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the continued fraction converges fast only on one side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """Two-sided tail probability of Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isnan(t):
        return float("nan")
    if math.isinf(t):
        return 0.0
    t2 = t * t
    p = betainc_reg(0.5 * df, 0.5, df / (df + t2))
    if p > 0.5:
        # df / (df + t^2) rounds to 1 for small t; the complementary argument keeps precision
        p = 1.0 - betainc_reg(0.5, 0.5 * df, t2 / (df + t2))
    return min(max(p, 0.0), 1.0)


@dataclass(frozen=True)
class TrialStats:
    mean_a: float
    std_a: float
    n_a: int
    mean_b: float
    std_b: float
    n_b: int
    t: float
    p: float
    df: int

    def to_dict(self) -> dict:
        return asdict(self)


def compute_stats(a, b) -> TrialStats:
    """Pooled-variance two-sample Student's t-test, two-sided.

    Standard deviations are sample (ddof=1) values. Two constant groups give
    t = 0, p = 1 when their means agree and t = +/-inf, p = 0 otherwise.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least 2 samples")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("samples must be finite")
    na, nb = len(a), len(b)
    ma, mb = float(a.mean()), float(b.mean())
    va, vb = float(a.var(ddof=1)), float(b.var(ddof=1))
    df = na + nb - 2
    pooled = ((na - 1) * va + (nb - 1) * vb) / df
    se = math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    diff = ma - mb
    if se == 0.0:
        t = 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    else:
        t = diff / se
    p = 1.0 if t == 0.0 else t_two_sided_p(t, df)
    return TrialStats(ma, math.sqrt(va), na, mb, math.sqrt(vb), nb, t, p, df)


# --------------------------------------------------------------------------
# configuration and reports


def trial_seed(base_seed: int, trial: int) -> int:
    """Per-trial seed derived from the experiment seed and trial index."""
    return int(np.random.SeedSequence([int(base_seed), int(trial)]).generate_state(1)[0])


DEFAULT_MODULES = {
    "registration": {
        "heights": [250.0, 300.0, 350.0],
        "feedback": [True, False],
        "voxel_mm": 8.0,
        "protocol": {},
        "noise": {},
        "solver": {},
    },
    "landing": {
        "height": 300.0,
        "voxel_mm": 5.0,
        "pixel_noise_px": 3.0,
        "depth_noise": True,
        "placement_shift_mm": 20.0,
        "placement_rot_deg": 5.0,
        "projection_radius_mm": 15.0,
        "anatomical_map": {},
        "protocol": {},
        "noise": {},
        "solver": {},
    },
    "force": {
        "targets": [5.0, 10.0, 15.0],
        "push_in_range": [3.0, 8.0],
        "dynamic_target": 5.0,
        "contact": {},
    },
}


@dataclass
class ExperimentConfig:
    experiment: str
    trials: int = 12
    seed: int = 0
    modules: dict = field(default_factory=dict)
    output_dir: str | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if self.trials < 1:
            raise ValueError("trial count must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        defaults = DEFAULT_MODULES[self.experiment]
        unknown = set(self.modules) - set(defaults)
        if unknown:
            raise ValueError(f"unknown {self.experiment} settings: {sorted(unknown)}")
        self.modules = {**defaults, **self.modules}

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        allowed = {"experiment", "trials", "seed", "modules", "output_dir"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentReport:
    experiment: str
    columns: list[str]
    rows: list[dict]
    summary: dict
    extra_files: dict[str, str] = field(default_factory=dict)  # name -> text content

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# auscultation {self.experiment} results, schema v{CSV_SCHEMA_VERSION}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(row.get(c, "")) for c in self.columns])
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / f"{self.experiment}.csv", out / f"{self.experiment}_summary.json"]
        written[0].write_text(self.to_csv())
        written[1].write_text(json.dumps(_jsonable(self.summary), indent=2, sort_keys=True) + "\n")
        for name, text in sorted(self.extra_files.items()):
            path = out / name
            path.write_text(text)
            written.append(path)
        return written


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _safe_stats(a, b) -> dict | None:
    a = [x for x in a if math.isfinite(x)]
    b = [x for x in b if math.isfinite(x)]
    if len(a) < 2 or len(b) < 2:
        return None
    return compute_stats(a, b).to_dict()


def _mean_std(values) -> dict:
    v = np.asarray([x for x in values if math.isfinite(x)], dtype=float)
    if len(v) == 0:
        return {"mean": float("nan"), "std": float("nan"), "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0, "n": int(len(v))}


# --------------------------------------------------------------------------
# shared pipeline pieces


def prepare_surfaces(frames, voxel_mm: float, feedback: bool = True) -> list[PointCloud]:
    """Back-project and thin each frame; with feedback, move it to the base frame
    with its recorded capture pose, otherwise leave it in its camera frame."""
    clouds = [voxel_downsample(deproject(f), voxel_mm) for f in frames]
    if feedback:
        clouds = [transform_cloud(c, f.capture_pose, "base") for c, f in zip(clouds, frames)]
    return clouds


def reconstruct(frames, voxel_mm: float, solver: dict | None = None, feedback: bool = True):
    """Register the frames; returns (result, merged cloud in the base frame).

    Without feedback the solution is only known up to the anchor surface's
    frame, which is mapped to the base with surface 0's capture pose.
    """
    clouds = prepare_surfaces(frames, voxel_mm, feedback)
    result = multiway_register(MultiwayProblem.from_config(clouds, solver))
    merged = result.merged
    if not feedback:
        merged = transform_cloud(merged, frames[0].capture_pose, "base")
    return result, merged


def target_errors(torso: TorsoModel, merged: PointCloud, amap: AnatomicalMap = AnatomicalMap(),
                  radius: float = 15.0) -> dict[str, float]:
    """Surface error at the four valve targets.

    The ground-truth anatomical plan is dropped onto the reconstruction and
    onto the true surface along the same body normal; the distance between
    the two landings isolates the reconstruction error.
    """
    lm = torso.landmarks()
    body = body_frame_from_points(lm["nipple_left"], lm["nipple_right"], lm["navel"])
    gt = torso.ground_truth_valves(amap)
    plan = map_valves(body, amap).points
    return {v: float(np.linalg.norm(project_to_surface(plan[v], merged, body.z_axis, radius) - gt[v]))
            for v in VALVES}


def _protocol(settings: dict, **overrides) -> CaptureProtocol:
    return CaptureProtocol.from_dict({**settings.get("protocol", {}), **overrides})


def _noise(settings: dict, enabled: bool = True) -> LidarNoiseModel | None:
    return LidarNoiseModel(**settings.get("noise", {})) if enabled else None


# --------------------------------------------------------------------------
# experiments


def run_registration_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Capture-pose feedback versus identity initialisation at each camera height."""
    if config.experiment != "registration":
        raise ValueError("config is not for the registration experiment")
    s = config.modules
    torso = TorsoModel(TorsoParams())
    noise = _noise(s)
    rows = []
    for height in s["heights"]:
        protocol = _protocol(s, height=float(height))
        for trial in range(config.trials):
            seed = trial_seed(config.seed, trial)
            frames = capture_sequence(torso, protocol, None, noise, seed)
            for feedback in s["feedback"]:
                row = {"height_mm": float(height), "feedback": bool(feedback), "trial": trial, "seed": seed}
                try:
                    result, merged = reconstruct(frames, s["voxel_mm"], s["solver"], feedback)
                    dist = torso.surface_distance(merged.points)
                    errs = target_errors(torso, merged)
                    row.update(
                        rms_mm=float(np.sqrt(np.mean(dist**2))),
                        target_error_mm=float(np.mean(list(errs.values()))),
                        iterations=result.iterations,
                        converged=result.converged,
                        points=len(merged),
                        status="ok",
                    )
                except TRIAL_ERRORS as exc:
                    row.update(rms_mm=float("nan"), target_error_mm=float("nan"), iterations=0,
                               converged=False, points=0, status=f"{type(exc).__name__}: {exc}")
                rows.append(row)
    rows.sort(key=lambda r: (r["height_mm"], not r["feedback"], r["trial"]))

    summary: dict = {"experiment": "registration", "version": __version__, "seed": config.seed,
                     "trials": config.trials, "conditions": {}, "feedback_vs_identity": {}, "height_comparisons": {}}

    def values(h, fb, key="rms_mm"):
        return [r[key] for r in rows if r["height_mm"] == h and r["feedback"] == fb]

    heights = sorted(float(h) for h in s["heights"])
    for h in heights:
        for fb in s["feedback"]:
            summary["conditions"][f"{h:g}mm_{'feedback' if fb else 'identity'}"] = {
                "rms_mm": _mean_std(values(h, fb)), "target_error_mm": _mean_std(values(h, fb, "target_error_mm"))}
        if True in s["feedback"] and False in s["feedback"]:
            summary["feedback_vs_identity"][f"{h:g}mm"] = _safe_stats(values(h, True), values(h, False))
    fb_modes = [fb for fb in s["feedback"] if fb] or list(s["feedback"])
    for i, ha in enumerate(heights):
        for hb in heights[i + 1 :]:
            summary["height_comparisons"][f"{ha:g}_vs_{hb:g}mm"] = _safe_stats(values(ha, fb_modes[0]), values(hb, fb_modes[0]))
    columns = ["height_mm", "feedback", "trial", "seed", "rms_mm", "target_error_mm", "iterations", "converged", "points", "status"]
    return ExperimentReport("registration", columns, rows, summary)


def default_templates(params: TorsoParams = TorsoParams(), distance: float = 310.0) -> dict[str, np.ndarray]:
    return {"nipple": marker_template("nipple", params, distance), "navel": marker_template("navel", params, distance)}


def landing_trial(seed: int, settings: dict) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """One perturbed-placement trial; returns per-valve errors and estimates."""
    s = {**DEFAULT_MODULES["landing"], **settings}
    rng = np.random.default_rng(seed)
    placement = random_placement(rng, s["placement_shift_mm"], s["placement_rot_deg"])
    torso = TorsoModel(TorsoParams(), placement)
    protocol = _protocol(s, height=float(s["height"]))
    frames = capture_sequence(torso, protocol, None, _noise(s, s["depth_noise"]), seed)
    _, merged = reconstruct(frames, s["voxel_mm"], s["solver"], True)
    px = float(s["pixel_noise_px"])
    offsets = None
    if px > 0:
        offsets = {name: tuple(rng.uniform(-px, px, 2)) for name in ("nipple_left", "nipple_right", "navel")}
    amap = AnatomicalMap(**s["anatomical_map"])
    landing, _, _ = estimate_landing_positions(frames, merged, default_templates(torso.params), amap,
                                                  DetectionConfig(), pixel_offsets=offsets,
                                                  radius=s["projection_radius_mm"])
    gt = torso.ground_truth_valves(amap)
    est = landing.as_dict()
    return {v: float(np.linalg.norm(est[v] - gt[v])) for v in VALVES}, est


def run_landing_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Random small re-placements of the mannequin, full pipeline per trial."""
    if config.experiment != "landing":
        raise ValueError("config is not for the landing experiment")
    rows = []
    for trial in range(config.trials):
        seed = trial_seed(config.seed, trial)
        try:
            errors, est = landing_trial(seed, config.modules)
            status = "ok"
        except TRIAL_ERRORS as exc:
            errors = {v: float("nan") for v in VALVES}
            est = {v: np.full(3, np.nan) for v in VALVES}
            status = f"{type(exc).__name__}: {exc}"
        for v in VALVES:
            rows.append({"valve": v, "trial": trial, "seed": seed, "error_mm": errors[v],
                         "x_mm": est[v][0], "y_mm": est[v][1], "z_mm": est[v][2], "status": status})
    order = {v: k for k, v in enumerate(VALVES)}
    rows.sort(key=lambda r: (order[r["valve"]], r["trial"]))

    per_valve = {v: [r["error_mm"] for r in rows if r["valve"] == v] for v in VALVES}
    summary = {
        "experiment": "landing", "version": __version__, "seed": config.seed, "trials": config.trials,
        "valves": {v: _mean_std(e) for v, e in per_valve.items()},
        "tricuspid_vs": {v: _safe_stats(per_valve["tricuspid"], per_valve[v]) for v in VALVES if v != "tricuspid"},
    }
    columns = ["valve", "trial", "seed", "error_mm", "x_mm", "y_mm", "z_mm", "status"]
    return ExperimentReport("landing", columns, rows, summary)


def run_force_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Static holds at each target force plus one dynamic touch-down trace."""
    if config.experiment != "force":
        raise ValueError("config is not for the force experiment")
    s = config.modules
    lo, hi = s["push_in_range"]
    if not lo <= hi:
        raise ValueError("push_in_range must be ordered")
    rows = []
    for target in s["targets"]:
        for trial in range(config.trials):
            seed = trial_seed(config.seed, trial)
            push_in = float(np.random.default_rng(seed).uniform(lo, hi))
            cfg = static_scenario(float(target), push_in, seed, **s["contact"])
            m = trace_metrics(simulate_contact(cfg), float(target))
            rows.append({
                "target_N": float(target), "trial": trial, "seed": seed, "push_in_mm": push_in,
                "steady_state_N": m.steady_state_force, "steady_state_error_pct": m.steady_state_error_pct,
                "overshoot_pct": m.overshoot_pct, "settling_s": m.settling_time,
            })
    rows.sort(key=lambda r: (r["target_N"], r["trial"]))

    dyn_target = float(s["dynamic_target"])
    dyn_cfg = dynamic_scenario(dyn_target, config.seed, **s["contact"])
    trace = simulate_contact(dyn_cfg)
    dm = trace_metrics(trace, dyn_target)
    summary = {
        "experiment": "force", "version": __version__, "seed": config.seed, "trials": config.trials,
        "static": {f"{t:g}N": {
            "steady_state_N": _mean_std([r["steady_state_N"] for r in rows if r["target_N"] == t]),
            "max_abs_error_pct": float(max(abs(r["steady_state_error_pct"]) for r in rows if r["target_N"] == t)),
        } for t in sorted(float(t) for t in s["targets"])},
        "dynamic": {"target_N": dyn_target, **asdict(dm)},
    }
    columns = ["target_N", "trial", "seed", "push_in_mm", "steady_state_N", "steady_state_error_pct",
               "overshoot_pct", "settling_s"]
    return ExperimentReport("force", columns, rows, summary, {"force_dynamic_trace.csv": trace.to_csv()})


RUNNERS = {
    "registration": run_registration_experiment,
    "landing": run_landing_experiment,
    "force": run_force_experiment,
}


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentReport:
    report = RUNNERS[config.experiment](config)
    target = out_dir or config.output_dir
    if target is not None:
        report.write(target)
    return report
