"""End-to-end walkthrough on the synthetic torso.

Renders the five-position capture sweep, fuses it with multi-way
registration, estimates the four valve landing points and finally presses a
simulated stethoscope onto the first of them.

    python3 demos/walkthrough.py
"""

import numpy as np

from auscultation import CaptureProtocol, LidarNoiseModel, estimate_landing_positions, simulate_contact, synth_torso
from auscultation.contact import dynamic_scenario, trace_metrics
from auscultation.harness import default_templates, reconstruct
from auscultation.landmarks import VALVES
from auscultation.scenegen import capture_sequence, random_placement


def main(seed: int = 1) -> None:
    rng = np.random.default_rng(seed)
    torso = synth_torso(pose=random_placement(rng))
    frames = capture_sequence(torso, CaptureProtocol(height=300.0), noise=LidarNoiseModel(), seed=seed)
    print(f"captured {len(frames)} frames, "
          f"{sum(int((f.depth > 0).sum()) for f in frames)} valid depth pixels")

    result, merged = reconstruct(frames, voxel_mm=5.0)
    rms = np.sqrt(np.mean(torso.surface_distance(merged.points) ** 2))
    print(f"registration: {result.iterations} iterations, {len(merged)} points, RMS to surface {rms:.2f} mm")

    landing, landmarks, body = estimate_landing_positions(frames, merged, default_templates(torso.params))
    truth = torso.ground_truth_valves()
    print("landmarks (px):", {k: tuple(round(c, 1) for c in v) for k, v in
                               (("nipple_left", landmarks.nipple_left), ("nipple_right", landmarks.nipple_right),
                                ("navel", landmarks.navel))})
    for v in VALVES:
        est = landing.as_dict()[v]
        print(f"  {v:10s} estimate {np.round(est, 1)} mm, error {np.linalg.norm(est - truth[v]):.2f} mm")

    trace = simulate_contact(dynamic_scenario(5.0, seed=seed))
    m = trace_metrics(trace, 5.0)
    print(f"contact at 5 N: peak {m.peak_force:.2f} N ({m.overshoot_pct:.1f}% overshoot), "
          f"settled {m.settling_time:.2f} s after touch-down, steady state {m.steady_state_force:.3f} N")


if __name__ == "__main__":
    main()
