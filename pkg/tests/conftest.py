import numpy as np
import pytest

from auscultation.geometry import RigidTransform, rotation_from_rotvec


def random_pose(rng, trans_scale=100.0, max_angle=np.pi):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    return RigidTransform(rotation_from_rotvec(axis * angle), rng.uniform(-trans_scale, trans_scale, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def wavy_height(x, y):
    """Richly curved test surface: no sliding symmetries for point-to-point ICP."""
    return 20.0 * np.sin(x / 18.0 + 0.3 * np.sin(y / 30.0)) * np.cos(y / 22.0)


def overlapping_scans(true_pose, n=5000, seed=0):
    """Two half-overlapping scans of one surface; scan B is expressed in a frame
    that ``true_pose`` maps back onto scan A's frame."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-150, 150, n)
    y = rng.uniform(-100, 100, n)
    pts = np.column_stack([x, y, wavy_height(x, y)])
    a = pts[x < 75]
    b_world = pts[x > -75]
    b_local = true_pose.inverse().apply(b_world)
    return a, b_local


@pytest.fixture(scope="session")
def clean_scene():
    """Noise-free default torso: frames, registered merged cloud and templates."""
    from auscultation.harness import default_templates, reconstruct
    from auscultation.scenegen import CaptureProtocol, capture_sequence, synth_torso

    torso = synth_torso()
    frames = capture_sequence(torso, CaptureProtocol(), None, None, seed=0)
    _, merged = reconstruct(frames, 5.0)
    return {"torso": torso, "frames": frames, "merged": merged, "templates": default_templates(torso.params)}


# --- acceptance criteria report ------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    number, title = marker
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or (report.when == "setup" and report.failed):
        _ACCEPTANCE[number] = ("PASS" if report.passed else "FAIL", title, detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result().acceptance = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        line = f"{status} criterion {number:2d}: {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
