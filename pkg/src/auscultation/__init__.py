"""Hardware-free robotic auscultation pipeline.

Surface reconstruction from odometry-seeded multi-way registration of depth
captures, valve landing-position estimation from body landmarks, and a
spring/PID constant-force contact simulator, with a synthetic mannequin and
an experiment harness.
"""

__version__ = "0.1.0"

from .geometry import RigidTransform, TwistVector, apply_twist, compose, invert  # noqa: E402
from .pointcloud import CameraIntrinsics, PointCloud, RGBDFrame, deproject  # noqa: E402
from .registration import MultiwayProblem, RegistrationResult, multiway_register  # noqa: E402
from .landmarks import AnatomicalMap, LandingPositions, estimate_landing_positions, map_valves  # noqa: E402
from .contact import ContactSimConfig, SpringModel, simulate_contact, spring_force, target_compression  # noqa: E402
from .scenegen import CaptureProtocol, LidarNoiseModel, TorsoModel, capture_sequence, synth_torso  # noqa: E402
from .harness import ExperimentConfig, compute_stats, run_experiment  # noqa: E402

__all__ = [
    "AnatomicalMap", "CameraIntrinsics", "CaptureProtocol", "ContactSimConfig", "ExperimentConfig",
    "LandingPositions", "LidarNoiseModel", "MultiwayProblem", "PointCloud", "RGBDFrame",
    "RegistrationResult", "RigidTransform", "SpringModel", "TorsoModel", "TwistVector",
    "apply_twist", "capture_sequence", "compose", "compute_stats", "deproject",
    "estimate_landing_positions", "invert", "map_valves", "multiway_register", "run_experiment",
    "simulate_contact", "spring_force", "synth_torso", "target_compression",
]
