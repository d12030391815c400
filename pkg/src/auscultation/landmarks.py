"""Landing-position estimation from nipple/navel landmarks.

Pipeline: find the three markers in the color image by normalized
cross-correlation, lift them to 3D with the depth map and capture pose,
build a body frame (origin at the nipple midpoint, y toward the head along
the navel->nipple-center midline, z out of the chest, x toward the patient's
right), place the four valves with the anatomical map and drop each onto the
reconstructed surface along the body normal.

Sign convention: +x is the patient's right, so valves on the patient's left
(pulmonary, tricuspid, mitral) have negative x offsets. With +y toward the
head and +z out of the body this triad is left-handed by construction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .pointcloud import PointCloud, RGBDFrame

VALVES = ("aortic", "pulmonary", "tricuspid", "mitral")


class LandmarkDetectionError(RuntimeError):
    def __init__(self, landmark: str, score: float | None = None):
        self.landmark = landmark
        self.score = score
        detail = "" if score is None else f" (best score {score:.3f})"
        super().__init__(f"could not detect {landmark}{detail}")


class DegenerateLandmarksError(ValueError):
    pass


@dataclass(frozen=True)
class AnatomicalMap:
    """Valve offsets (mm) from the nipple-center origin."""

    dy_up: float = 39.0  # 4th -> 2nd intercostal space
    dy_down: float = 20.6  # 4th -> 5th intercostal space
    sternum_half_width: float = 13.0
    midclavicular_offset: float = 100.0

    def __post_init__(self):
        if min(self.dy_up, self.dy_down, self.sternum_half_width, self.midclavicular_offset) < 0:
            raise ValueError("anatomical offsets must be non-negative")

    def planar_offsets(self) -> dict[str, tuple[float, float]]:
        s, up, dn, mc = self.sternum_half_width, self.dy_up, self.dy_down, self.midclavicular_offset
        return {
            "aortic": (s, up),
            "pulmonary": (-s, up),
            "tricuspid": (-s, -dn),
            "mitral": (-mc, -dn),
        }

    @classmethod
    def from_file(cls, path: str | Path) -> AnatomicalMap:
        return cls(**json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class LandmarkSet:
    """Sub-pixel coordinates (u, v) of the landmarks and their NCC scores."""

    nipple_left: tuple[float, float]
    nipple_right: tuple[float, float]
    navel: tuple[float, float]
    scores: dict

    def __post_init__(self):
        if tuple(self.nipple_left) == tuple(self.nipple_right):
            raise ValueError("nipple landmarks must be distinct")

    def shifted(self, offsets: dict[str, tuple[float, float]]) -> LandmarkSet:
        def mv(name):
            u, v = getattr(self, name)
            du, dv = offsets.get(name, (0, 0))
            return (u + du, v + dv)

        return LandmarkSet(mv("nipple_left"), mv("nipple_right"), mv("navel"), dict(self.scores))


@dataclass(frozen=True)
class BodyFrame:
    origin: np.ndarray
    x_axis: np.ndarray
    y_axis: np.ndarray
    z_axis: np.ndarray

    def axes(self) -> np.ndarray:
        return np.column_stack([self.x_axis, self.y_axis, self.z_axis])

    @classmethod
    def identity(cls) -> BodyFrame:
        e = np.eye(3)
        return cls(np.zeros(3), e[0], e[1], e[2])


@dataclass(frozen=True)
class ValvePlan:
    offsets: dict[str, tuple[float, float]]
    points: dict[str, np.ndarray]


@dataclass(frozen=True)
class LandingPositions:
    aortic: np.ndarray
    pulmonary: np.ndarray
    tricuspid: np.ndarray
    mitral: np.ndarray

    def __post_init__(self):
        for name in VALVES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} landing position is not finite")

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: np.asarray(getattr(self, name)) for name in VALVES}

    def to_json(self) -> str:
        d = {name: [float(x) for x in getattr(self, name)] for name in VALVES}
        d["frame"] = "base"
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> LandingPositions:
        d = json.loads(text)
        return cls(**{name: np.asarray(d[name], dtype=float) for name in VALVES})


@dataclass(frozen=True)
class DetectionConfig:
    threshold: float = 0.6
    min_separation: float = 40.0  # px, between the two nipple peaks


def to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    return img


def ncc_map(image: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Zero-mean normalized cross-correlation over every full-overlap placement.

    Entry ``[r, c]`` scores the template with its top-left corner at
    ``(r, c)``. Flat windows (zero variance) score 0.
    """
    img = to_gray(image)
    tpl = to_gray(template)
    th, tw = tpl.shape
    if th > img.shape[0] or tw > img.shape[1]:
        raise ValueError("template larger than image")
    t0 = tpl - tpl.mean()
    t_norm = np.sqrt((t0 * t0).sum())
    windows = sliding_window_view(img, (th, tw))
    num = np.einsum("ijkl,kl->ij", windows, t0)
    n = th * tw
    s1 = windows.sum(axis=(2, 3))
    s2 = np.einsum("ijkl,ijkl->ij", windows, windows)
    var = np.maximum(s2 - s1 * s1 / n, 0.0)
    denom = np.sqrt(var) * t_norm
    out = np.zeros_like(num)
    ok = denom > 1e-9 * max(1.0, n)
    out[ok] = num[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def _parabolic(left: float, mid: float, right: float) -> float:
    denom = left - 2.0 * mid + right
    if not np.isfinite(denom) or denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))


def _peak(score: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, float, float]:
    """Masked maximum with parabolic sub-pixel refinement along each axis."""
    s = score if mask is None else np.where(mask, score, -np.inf)
    # argmax returns the first maximum in row-major order: lowest (row, col)
    flat = int(np.argmax(s))
    r, c = divmod(flat, s.shape[1])
    dr = dc = 0.0
    if 0 < r < s.shape[0] - 1:
        dr = _parabolic(score[r - 1, c], score[r, c], score[r + 1, c])
    if 0 < c < s.shape[1] - 1:
        dc = _parabolic(score[r, c - 1], score[r, c], score[r, c + 1])
    return r + dr, c + dc, float(s[r, c])


def detect_landmarks(image: np.ndarray, templates: dict[str, np.ndarray],
                     config: DetectionConfig = DetectionConfig()) -> LandmarkSet:
    """Locate both nipples and the navel; returns template-center pixels.

    ``templates`` maps ``"nipple"`` and ``"navel"`` to image patches (a
    separate ``"nipple_right"`` patch is accepted too). The navel search is
    restricted to rows below the lower nipple. Left/right are assigned
    assuming the camera views the chest from the front with the head toward
    the top of the image side defined by the navel->nipple direction.
    """
    nip_t = templates["nipple"]
    nav_t = templates["navel"]
    s_nip = ncc_map(image, nip_t)
    oy, ox = nip_t.shape[0] // 2, nip_t.shape[1] // 2

    r1, c1, sc1 = _peak(s_nip)
    if sc1 < config.threshold:
        raise LandmarkDetectionError("nipple", sc1)
    if "nipple_right" in templates:
        s_nip2 = ncc_map(image, templates["nipple_right"])
    else:
        s_nip2 = s_nip
    rr, cc = np.mgrid[0 : s_nip2.shape[0], 0 : s_nip2.shape[1]].astype(float)
    far = np.hypot(rr - r1, cc - c1) >= config.min_separation
    r2, c2, sc2 = _peak(s_nip2, far)
    if sc2 < config.threshold:
        raise LandmarkDetectionError("second nipple", sc2)
    p1 = (c1 + ox, r1 + oy)
    oy2, ox2 = (templates.get("nipple_right", nip_t).shape[0] // 2,
                templates.get("nipple_right", nip_t).shape[1] // 2)
    p2 = (c2 + ox2, r2 + oy2)

    s_nav = ncc_map(image, nav_t)
    ny, nx = nav_t.shape[0] // 2, nav_t.shape[1] // 2
    rows = np.arange(s_nav.shape[0])[:, None] + ny
    below = np.broadcast_to(rows > max(p1[1], p2[1]), s_nav.shape)
    if not below.any():
        raise LandmarkDetectionError("navel", None)
    r3, c3, sc3 = _peak(s_nav, below)
    if sc3 < config.threshold:
        raise LandmarkDetectionError("navel", sc3)
    navel = (c3 + nx, r3 + ny)

    mid = 0.5 * (np.asarray(p1, float) + np.asarray(p2, float))
    up = mid - np.asarray(navel, float)
    left_dir = np.array([-up[1], up[0]])
    if np.dot(np.asarray(p1, float) - mid, left_dir) >= 0:
        left, right, s_left, s_right = p1, p2, sc1, sc2
    else:
        left, right, s_left, s_right = p2, p1, sc2, sc1
    scores = {"nipple_left": s_left, "nipple_right": s_right, "navel": sc3}
    return LandmarkSet(tuple(float(x) for x in left), tuple(float(x) for x in right),
                       tuple(float(x) for x in navel), scores)


def pixel_to_base(frame: RGBDFrame, pixel, window: int = 5) -> np.ndarray:
    """Lift a pixel to 3D using the median valid depth in a ``window`` square."""
    u, v = pixel
    ui, vi = int(round(u)), int(round(v))
    k = frame.intrinsics
    half = window // 2
    patch = frame.depth[max(vi - half, 0) : vi + half + 1, max(ui - half, 0) : ui + half + 1]
    valid = patch[patch > 0]
    if valid.size == 0:
        raise DegenerateLandmarksError(f"no valid depth near pixel ({u}, {v})")
    d = float(np.median(valid))
    p_cam = np.array([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d])
    return frame.capture_pose.apply(p_cam)


def body_frame_from_points(nipple_left: np.ndarray, nipple_right: np.ndarray, navel: np.ndarray,
                           min_midline: float = 10.0) -> BodyFrame:
    nl, nr, nv = (np.asarray(p, dtype=float) for p in (nipple_left, nipple_right, navel))
    origin = 0.5 * (nl + nr)
    midline = origin - nv
    if np.linalg.norm(midline) < min_midline:
        raise DegenerateLandmarksError("navel coincides with the nipple midpoint")
    if np.linalg.norm(nr - nl) < 1e-9:
        raise DegenerateLandmarksError("nipples coincide")
    y = midline / np.linalg.norm(midline)
    normal = np.cross(nr - nl, midline)
    nn = np.linalg.norm(normal)
    if nn < 1e-9 * np.linalg.norm(nr - nl) * np.linalg.norm(midline):
        raise DegenerateLandmarksError("landmarks are collinear")
    z = normal / nn
    z = z - np.dot(z, y) * y
    z /= np.linalg.norm(z)
    x = np.cross(z, y)
    # x must point toward the patient's right nipple; otherwise the normal faced inward
    if np.dot(x, nr - nl) < 0:
        z, x = -z, -x
    return BodyFrame(origin, x, y, z)


def build_body_frame(landmarks: LandmarkSet, frame: RGBDFrame, window: int = 5) -> BodyFrame:
    pts = [pixel_to_base(frame, getattr(landmarks, n), window) for n in ("nipple_left", "nipple_right", "navel")]
    return body_frame_from_points(*pts)


def map_valves(body: BodyFrame, amap: AnatomicalMap = AnatomicalMap()) -> ValvePlan:
    offsets = amap.planar_offsets()
    points = {
        name: body.origin + dx * body.x_axis + dy * body.y_axis for name, (dx, dy) in offsets.items()
    }
    return ValvePlan(offsets, points)


def project_to_surface(p: np.ndarray, merged: PointCloud, direction: np.ndarray | None = None,
                       radius: float = 15.0) -> np.ndarray:
    """Drop ``p`` onto the reconstructed surface along a ray.

    A point already on the cloud is returned unchanged. Otherwise cloud
    points within ``radius`` of the line through ``p`` get a
    least-squares plane, and the line is intersected with it. With too few
    points near the line (or a plane nearly parallel to it) the cloud point
    closest to the line is returned instead; with no direction, or nothing
    inside the cylinder, the plain nearest neighbour of ``p``.
    """
    pts = merged.points
    if len(pts) == 0:
        raise ValueError("cannot project onto an empty cloud")
    p = np.asarray(p, dtype=float)
    rel = pts - p
    dist = np.einsum("ij,ij->i", rel, rel)
    nearest = int(np.argmin(dist))
    if dist[nearest] <= 1e-18:  # already on the cloud
        return pts[nearest].copy()
    if direction is not None:
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        along = rel @ d
        perp = np.linalg.norm(rel - along[:, None] * d, axis=1)
        inside = perp <= radius
        if inside.any():
            idx = np.nonzero(inside)[0]
            # if the cylinder crosses the cloud twice, keep the crossing nearest the axis
            sheet = idx[np.abs(along[idx] - along[idx[np.argmin(perp[idx])]]) <= radius]
            if len(sheet) >= 6:
                centroid = pts[sheet].mean(axis=0)
                _, _, vt = np.linalg.svd(pts[sheet] - centroid, full_matrices=False)
                normal = vt[2]
                cos = float(np.dot(normal, d))
                if abs(cos) > 0.3:
                    return p + (np.dot(centroid - p, normal) / cos) * d
            best = idx[np.lexsort((np.abs(along[idx]), perp[idx]))[0]]
            return pts[best].copy()
    return pts[nearest].copy()


def landing_from_body(body: BodyFrame, merged: PointCloud, amap: AnatomicalMap = AnatomicalMap(),
                      radius: float = 15.0) -> LandingPositions:
    plan = map_valves(body, amap)
    return LandingPositions(**{
        name: project_to_surface(pt, merged, body.z_axis, radius) for name, pt in plan.points.items()
    })


def frontal_index(frames: list[RGBDFrame]) -> int:
    """Frame whose camera sits closest to the mean of all camera positions.

    For a symmetric sweep this is the middle capture, and the choice does not
    depend on how the base frame is placed.
    """
    centers = np.array([f.capture_pose.translation for f in frames])
    return int(np.argmin(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))


def estimate_landing_positions(
    frames: list[RGBDFrame],
    merged: PointCloud,
    templates: dict[str, np.ndarray],
    amap: AnatomicalMap = AnatomicalMap(),
    config: DetectionConfig = DetectionConfig(),
    frontal: int | None = None,
    pixel_offsets: dict[str, tuple[float, float]] | None = None,
    radius: float = 15.0,
) -> tuple[LandingPositions, LandmarkSet, BodyFrame]:
    """Detect, lift, map and project. ``pixel_offsets`` perturbs the detected
    landmarks (used for sensitivity trials)."""
    if not frames:
        raise ValueError("no frames given")
    frame = frames[frontal_index(frames) if frontal is None else frontal]
    lm = detect_landmarks(frame.color, templates, config)
    if pixel_offsets:
        lm = lm.shifted(pixel_offsets)
    body = build_body_frame(lm, frame)
    return landing_from_body(body, merged, amap, radius), lm, body


def landmarks_to_dict(lm: LandmarkSet) -> dict:
    return asdict(lm)
