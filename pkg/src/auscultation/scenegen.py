"""Synthetic mannequin and depth camera.

The torso is a height field ``z = h(x, y)`` in its own frame: x lateral
(patient's left is +x), y along the body axis toward the head, z up out of
the table. Cross-sections are superellipses whose width and height vary
along y, with two low pectoral bumps so the surface pins down all six rigid
degrees of freedom. The nipple line sits at y = 0 and the navel on the
midline below it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RigidTransform, compose, rotation_about, rotation_from_rotvec, translation
from .landmarks import AnatomicalMap, body_frame_from_points, map_valves
from .pointcloud import CameraIntrinsics, RGBDFrame

SKIN_RGB = np.array([226.0, 188.0, 162.0])
NIPPLE_RGB = np.array([92.0, 42.0, 40.0])
NAVEL_RGB = np.array([70.0, 52.0, 36.0])

# downward-looking camera: image x along base +x, image y toward the feet
LOOK_DOWN = np.diag([1.0, -1.0, -1.0])


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class TorsoParams:
    chest_half_width: float = 170.0
    waist_half_width: float = 150.0
    chest_height: float = 120.0
    abdomen_height: float = 95.0
    exponent: float = 3.0
    y_top: float = 200.0
    y_bottom: float = -420.0
    nipple_lateral_ratio: float = 90.0 / 170.0
    navel_drop: float = 280.0
    pectoral_amplitude: float = 7.0
    pectoral_sigma: float = 45.0
    nipple_marker_radius: float = 9.0
    navel_marker_radius: float = 12.0
    navel_marker_inner: float = 5.0

    def __post_init__(self):
        positive = (
            "chest_half_width", "waist_half_width", "chest_height", "abdomen_height", "exponent",
            "nipple_marker_radius", "navel_marker_radius", "navel_drop",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.exponent < 2:
            raise ValueError("superellipse exponent below 2 gives a non-smooth ridge")
        if self.y_top <= 0 or self.y_bottom >= -self.navel_drop:
            raise ValueError("body extent must contain nipple line and navel")
        if not 0 < self.nipple_lateral_ratio < 0.8:
            raise ValueError("nipples must sit well inside the chest width")
        if self.navel_marker_inner >= self.navel_marker_radius:
            raise ValueError("navel ring inner radius must be below its outer radius")

    @property
    def nipple_lateral(self) -> float:
        return self.nipple_lateral_ratio * self.chest_half_width


@dataclass(frozen=True)
class TorsoModel:
    params: TorsoParams = field(default_factory=TorsoParams)
    pose: RigidTransform = field(default_factory=RigidTransform.identity)  # torso -> base

    # --- surface in the torso frame -------------------------------------
    def half_width(self, y):
        p = self.params
        return p.waist_half_width + (p.chest_half_width - p.waist_half_width) * _sigmoid((y + 140.0) / 50.0)

    def ridge_height(self, y):
        p = self.params
        d = p.abdomen_height + (p.chest_height - p.abdomen_height) * _sigmoid((y + 140.0) / 50.0)
        return d - 25.0 * _sigmoid((y - 160.0) / 15.0)

    def inside(self, x, y):
        p = self.params
        return (np.abs(x) < self.half_width(y)) & (y > p.y_bottom) & (y < p.y_top)

    def height(self, x, y):
        """Surface height; NaN outside the torso footprint."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        p = self.params
        w = self.half_width(y)
        u = np.clip(np.abs(x) / w, 0.0, 1.0)
        z = self.ridge_height(y) * (1.0 - u**p.exponent) ** (1.0 / p.exponent)
        s2 = 2.0 * p.pectoral_sigma**2
        for side in (-1.0, 1.0):
            z = z + p.pectoral_amplitude * np.exp(-((x - side * 80.0) ** 2 + (y - 30.0) ** 2) / s2)
        return np.where(self.inside(x, y), z, np.nan)

    def gradient(self, x, y, eps: float = 1e-3):
        hx = (self.height(x + eps, y) - self.height(x - eps, y)) / (2 * eps)
        hy = (self.height(x, y + eps) - self.height(x, y - eps)) / (2 * eps)
        return hx, hy

    # --- landmarks ---------------------------------------------------------
    def landmarks_local(self) -> dict[str, np.ndarray]:
        p = self.params
        pts = {
            "nipple_left": (p.nipple_lateral, 0.0),
            "nipple_right": (-p.nipple_lateral, 0.0),
            "navel": (0.0, -p.navel_drop),
        }
        return {k: np.array([x, y, float(self.height(x, y))]) for k, (x, y) in pts.items()}

    def landmarks(self) -> dict[str, np.ndarray]:
        return {k: self.pose.apply(v) for k, v in self.landmarks_local().items()}

    def top_z(self) -> float:
        """Highest surface point expressed in the base frame."""
        ys, xs = np.mgrid[self.params.y_bottom : self.params.y_top : 5.0, -200:200:5.0]
        z = self.height(xs, ys)
        ok = np.isfinite(z)
        pts = self.pose.apply(np.column_stack([xs[ok], ys[ok], z[ok]]))
        return float(pts[:, 2].max())

    # --- ray casting -----------------------------------------------------------
    def intersect_local(self, origins: np.ndarray, dirs: np.ndarray, step: float = 2.0, bisections: int = 30):
        """First hit of rays with the height field, torso frame. Returns (t, hit)."""
        o = np.asarray(origins, dtype=float).reshape(-1, 3)
        d = np.asarray(dirs, dtype=float).reshape(-1, 3)
        o = np.broadcast_to(o, d.shape)
        z_max = self.params.chest_height + self.params.pectoral_amplitude + 5.0
        dz = np.where(np.abs(d[:, 2]) < 1e-12, -1e-12, d[:, 2])
        t0 = np.maximum((z_max - o[:, 2]) / dz, 0.0)
        t1 = (0.0 - o[:, 2]) / dz
        down = d[:, 2] < 0
        t0 = np.where(down, t0, 0.0)
        t1 = np.where(down & (t1 > t0), t1, t0)

        def f(t):
            q = o + t[:, None] * d
            h = self.height(q[:, 0], q[:, 1])
            return np.where(np.isfinite(h), q[:, 2] - h, 1.0)

        n_steps = int(np.ceil(np.max(t1 - t0, initial=0.0) / step)) + 1
        lo = t0.copy()
        found = np.zeros(len(d), dtype=bool)
        hi = t0.copy()
        prev = t0.copy()
        for k in range(1, n_steps + 1):
            t = np.minimum(t0 + k * step, t1)
            below = (f(t) <= 0) & ~found & down
            lo = np.where(below, prev, lo)
            hi = np.where(below, t, hi)
            found |= below
            prev = t
            if found.all():
                break
        for _ in range(bisections):
            mid = 0.5 * (lo + hi)
            neg = f(mid) <= 0
            hi = np.where(found & neg, mid, hi)
            lo = np.where(found & ~neg, mid, lo)
        return hi, found

    def project_along(self, points_base: np.ndarray, direction_base: np.ndarray, standoff: float = 300.0) -> np.ndarray:
        """Intersect lines through ``points_base`` along ``direction_base``
        (pointing out of the body) with the surface."""
        inv = self.pose.inverse()
        p = inv.apply(np.atleast_2d(points_base))
        d = np.asarray(direction_base, dtype=float) @ self.pose.rotation  # base -> local
        d = d / np.linalg.norm(d)
        t, hit = self.intersect_local(p + standoff * d, np.broadcast_to(-d, p.shape))
        if not hit.all():
            raise ValueError("projection ray misses the torso")
        return self.pose.apply(p + standoff * d - t[:, None] * d)

    # --- ground truth --------------------------------------------------------------
    def ground_truth_valves(self, amap: AnatomicalMap = AnatomicalMap()) -> dict[str, np.ndarray]:
        lm = self.landmarks()
        body = body_frame_from_points(lm["nipple_left"], lm["nipple_right"], lm["navel"])
        planar = map_valves(body, amap)
        return {
            name: self.project_along(p[None, :], body.z_axis)[0] for name, p in planar.points.items()
        }

    def closest_points(self, points_base: np.ndarray, iterations: int = 8) -> np.ndarray:
        """Nearest surface point for each query (Gauss-Newton on the height field)."""
        q = self.pose.inverse().apply(np.atleast_2d(points_base))
        u, v = q[:, 0].copy(), q[:, 1].copy()
        p = self.params
        for _ in range(iterations):
            v = np.clip(v, p.y_bottom + 1e-6, p.y_top - 1e-6)
            w = self.half_width(v) * (1 - 1e-6)
            u = np.clip(u, -w, w)
            h = self.height(u, v)
            hu, hv = self.gradient(u, v, eps=min(1e-3, 1e-4))
            hu = np.nan_to_num(hu)
            hv = np.nan_to_num(hv)
            r = np.stack([u - q[:, 0], v - q[:, 1], h - q[:, 2]], axis=1)
            # J = [[1,0],[0,1],[hu,hv]]
            a11 = 1 + hu * hu
            a12 = hu * hv
            a22 = 1 + hv * hv
            b1 = r[:, 0] + hu * r[:, 2]
            b2 = r[:, 1] + hv * r[:, 2]
            det = a11 * a22 - a12 * a12
            du = -(a22 * b1 - a12 * b2) / det
            dv = -(a11 * b2 - a12 * b1) / det
            u, v = u + du, v + dv
        v = np.clip(v, p.y_bottom + 1e-6, p.y_top - 1e-6)
        u = np.clip(u, -self.half_width(v) * (1 - 1e-6), self.half_width(v) * (1 - 1e-6))
        return self.pose.apply(np.column_stack([u, v, self.height(u, v)]))

    def surface_distance(self, points_base: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points_base)
        return np.linalg.norm(pts - self.closest_points(pts), axis=1)

    def sample_surface(self, spacing: float = 2.0, margin: float = 0.9,
                       y_range: tuple[float, float] | None = None) -> np.ndarray:
        """Grid samples of the surface (base frame) inside ``margin`` x half width."""
        p = self.params
        y0, y1 = y_range or (p.y_bottom + 20.0, p.y_top - 20.0)
        ys, xs = np.mgrid[y0 : y1 : spacing, -p.chest_half_width : p.chest_half_width : spacing]
        keep = np.abs(xs) < margin * self.half_width(ys)
        xs, ys = xs[keep], ys[keep]
        return self.pose.apply(np.column_stack([xs, ys, self.height(xs, ys)]))


def synth_torso(params: TorsoParams | dict | None = None, pose: RigidTransform | None = None) -> TorsoModel:
    if params is None:
        params = TorsoParams()
    elif isinstance(params, dict):
        params = TorsoParams(**params)
    return TorsoModel(params, pose or RigidTransform.identity())


@dataclass(frozen=True)
class LidarNoiseModel:
    """Axial depth noise ``sigma(d) = sigma0 + sigma1 * d`` plus quantisation and dropout."""

    sigma0: float = 1.0
    sigma1: float = 0.008
    quantization: float = 0.25
    dropout: float = 0.01

    def __post_init__(self):
        if self.sigma0 < 0 or self.sigma1 < 0:
            raise ValueError("noise coefficients must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.quantization < 0:
            raise ValueError("quantization must be non-negative")

    def sigma(self, depth):
        return self.sigma0 + self.sigma1 * np.asarray(depth, dtype=float)

    @classmethod
    def noiseless(cls) -> LidarNoiseModel:
        return cls(0.0, 0.0, 0.0, 0.0)


def default_intrinsics() -> CameraIntrinsics:
    """Portrait 240x320 sensor, roughly 55 x 70 degrees field of view."""
    return CameraIntrinsics(fx=230.0, fy=230.0, cx=119.5, cy=159.5, width=240, height=320)


_RAYCAST_CACHE: dict = {}
_RAYCAST_CACHE_SIZE = 96


def _cache_key(torso: TorsoModel, camera_pose: RigidTransform, k: CameraIntrinsics):
    return (
        torso.params,
        torso.pose.rotation.tobytes(), torso.pose.translation.tobytes(),
        camera_pose.rotation.tobytes(), camera_pose.translation.tobytes(),
        k,
    )


def raycast(torso: TorsoModel, camera_pose: RigidTransform, intrinsics: CameraIntrinsics):
    """Noise-free depth (mm, 0 = miss) and color for a camera pose.

    Results are memoised because trials re-render the same geometry with
    different noise seeds.
    """
    key = _cache_key(torso, camera_pose, intrinsics)
    if key in _RAYCAST_CACHE:
        depth, color = _RAYCAST_CACHE[key]
        return depth.copy(), color.copy()

    rays_cam = intrinsics.pixel_rays().reshape(-1, 3)
    cam_to_local = compose(torso.pose.inverse(), camera_pose)
    dirs = rays_cam @ cam_to_local.rotation.T  # z-depth parametrisation: t == depth
    origin = cam_to_local.translation
    t, hit = torso.intersect_local(origin[None, :], dirs)
    depth = np.where(hit, t, 0.0)

    hitp = origin + t[:, None] * dirs
    color = np.zeros((len(dirs), 3))
    hx, hy = torso.gradient(hitp[hit, 0], hitp[hit, 1])
    # the finite-difference gradient can be undefined right at the silhouette
    hx, hy = np.nan_to_num(hx), np.nan_to_num(hy)
    normals = np.column_stack([-hx, -hy, np.ones_like(hx)])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    view = -dirs[hit] / np.linalg.norm(dirs[hit], axis=1, keepdims=True)
    shade = 0.45 + 0.55 * np.clip(np.einsum("ij,ij->i", normals, view), 0.0, 1.0)
    rgb = np.tile(SKIN_RGB, (hit.sum(), 1))
    p = torso.params
    lm = torso.landmarks_local()
    xy = hitp[hit, :2]
    for name in ("nipple_left", "nipple_right"):
        r = np.linalg.norm(xy - lm[name][:2], axis=1)
        rgb[r < p.nipple_marker_radius] = NIPPLE_RGB
    r = np.linalg.norm(xy - lm["navel"][:2], axis=1)
    rgb[(r < p.navel_marker_radius) & (r >= p.navel_marker_inner)] = NAVEL_RGB
    color[hit] = rgb * shade[:, None]
    color = np.clip(np.round(color), 0, 255).astype(np.uint8)

    h, w = intrinsics.height, intrinsics.width
    depth = depth.reshape(h, w)
    color = color.reshape(h, w, 3)
    if len(_RAYCAST_CACHE) >= _RAYCAST_CACHE_SIZE:
        _RAYCAST_CACHE.pop(next(iter(_RAYCAST_CACHE)))
    _RAYCAST_CACHE[key] = (depth, color)
    return depth.copy(), color.copy()


def apply_depth_noise(depth: np.ndarray, noise: LidarNoiseModel, rng: np.random.Generator) -> np.ndarray:
    valid = depth > 0
    out = depth.copy()
    # draw for every pixel so the realisation does not depend on the hit mask
    gauss = rng.standard_normal(depth.shape)
    drop = rng.random(depth.shape) < noise.dropout
    out[valid] = depth[valid] + noise.sigma(depth[valid]) * gauss[valid]
    if noise.quantization > 0:
        out[valid] = np.round(out[valid] / noise.quantization) * noise.quantization
    out[drop | (out <= 0)] = 0.0
    out[~valid] = 0.0
    return out


def render_rgbd(
    torso: TorsoModel,
    camera_pose: RigidTransform,
    intrinsics: CameraIntrinsics | None = None,
    noise: LidarNoiseModel | None = None,
    seed: int | np.random.SeedSequence = 0,
) -> RGBDFrame:
    """Ray-cast a frame; ``capture_pose`` records the true camera pose."""
    k = intrinsics or default_intrinsics()
    depth, color = raycast(torso, camera_pose, k)
    if noise is not None:
        depth = apply_depth_noise(depth, noise, np.random.default_rng(seed))
    return RGBDFrame(color, depth, k, camera_pose)


def camera_pose_above(x: float, y: float, z: float) -> RigidTransform:
    return RigidTransform(LOOK_DOWN, [x, y, z])


@dataclass(frozen=True)
class CaptureProtocol:
    x_offsets: tuple[float, ...] = (-200.0, -100.0, 0.0, 100.0, 200.0)
    height: float = 300.0  # above the top of the chest
    y_center: float = -140.0
    pose_noise_mm: float = 0.0  # recorded-pose error, for odometry ablations
    pose_noise_deg: float = 0.0

    def __post_init__(self):
        if not self.x_offsets:
            raise ValueError("protocol needs at least one camera position")
        if self.height <= 0:
            raise ValueError("camera height must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["x_offsets"] = list(self.x_offsets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CaptureProtocol:
        d = dict(d)
        if "x_offsets" in d:
            d["x_offsets"] = tuple(float(x) for x in d["x_offsets"])
        return cls(**d)


def commanded_poses(torso: TorsoModel, protocol: CaptureProtocol) -> list[RigidTransform]:
    z = torso.top_z() + protocol.height
    return [camera_pose_above(x, protocol.y_center, z) for x in protocol.x_offsets]


def capture_sequence(
    torso: TorsoModel,
    protocol: CaptureProtocol = CaptureProtocol(),
    intrinsics: CameraIntrinsics | None = None,
    noise: LidarNoiseModel | None = None,
    seed: int = 0,
) -> list[RGBDFrame]:
    """Render one frame per protocol position.

    Frames are rendered at the commanded pose. The recorded ``capture_pose``
    equals it unless the protocol asks for odometry error, in which case a
    random rigid perturbation is applied to the recorded pose only.
    """
    k = intrinsics or default_intrinsics()
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(len(protocol.x_offsets) + 1)
    pose_rng = np.random.default_rng(children[-1])
    frames = []
    for idx, pose in enumerate(commanded_poses(torso, protocol)):
        frame = render_rgbd(torso, pose, k, noise, children[idx])
        if protocol.pose_noise_mm > 0 or protocol.pose_noise_deg > 0:
            frame = RGBDFrame(frame.color, frame.depth, k, perturb_pose(pose, protocol.pose_noise_mm,
                                                                       protocol.pose_noise_deg, pose_rng))
        frames.append(frame)
    return frames


def perturb_pose(pose: RigidTransform, trans_mm: float, rot_deg: float, rng: np.random.Generator) -> RigidTransform:
    """Random rigid error: translation of norm ``trans_mm`` and rotation of ``rot_deg``
    about a random axis, applied in the base frame."""
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    delta = RigidTransform(rotation_from_rotvec(axis * np.radians(rot_deg)), direction * trans_mm)
    return compose(delta, pose)


def random_placement(rng: np.random.Generator, max_shift_mm: float = 20.0, max_rot_deg: float = 5.0) -> RigidTransform:
    """Small in-plane displacement of the mannequin on the table."""
    dx, dy = rng.uniform(-max_shift_mm, max_shift_mm, 2)
    theta = np.radians(rng.uniform(-max_rot_deg, max_rot_deg))
    return compose(translation(dx, dy, 0.0), rotation_about("z", theta))


def marker_template(kind: str, params: TorsoParams = TorsoParams(), distance: float = 310.0,
                    focal: float = 230.0) -> np.ndarray:
    """Synthetic grayscale template of a painted marker seen from ``distance`` mm."""
    if kind == "nipple":
        r_out, r_in, rgb = params.nipple_marker_radius, 0.0, NIPPLE_RGB
    elif kind == "navel":
        r_out, r_in, rgb = params.navel_marker_radius, params.navel_marker_inner, NAVEL_RGB
    else:
        raise ValueError(f"unknown marker kind {kind!r}")
    scale = focal / distance
    half = int(np.ceil(1.7 * r_out * scale))
    v, u = np.mgrid[-half : half + 1, -half : half + 1] / scale
    r = np.hypot(u, v)
    img = np.tile(SKIN_RGB, (*r.shape, 1))
    img[(r < r_out) & (r >= r_in)] = rgb
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def write_manifest(path: str | Path, torso: TorsoModel, protocol: CaptureProtocol,
                   noise: LidarNoiseModel | None, seed: int, frame_names: list[str]) -> None:
    manifest = {
        "torso": asdict(torso.params),
        "torso_pose": torso.pose.to_dict(),
        "protocol": protocol.to_dict(),
        "noise": None if noise is None else asdict(noise),
        "seed": seed,
        "frames": frame_names,
    }
    Path(path).write_text(json.dumps(manifest, indent=2))


def read_manifest(path: str | Path) -> dict:
    m = json.loads(Path(path).read_text())
    m["torso_model"] = TorsoModel(TorsoParams(**m["torso"]), RigidTransform.from_dict(m["torso_pose"]))
    m["protocol_obj"] = CaptureProtocol.from_dict(m["protocol"])
    m["noise_obj"] = None if m["noise"] is None else LidarNoiseModel(**m["noise"])
    return m
