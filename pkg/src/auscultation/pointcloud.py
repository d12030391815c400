"""Point clouds, RGB-D frames and the usual preprocessing around them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .geometry import RigidTransform

DEFAULT_SOR_K = 20
DEFAULT_SOR_STD_RATIO = 2.0


class PlyFormatError(ValueError):
    """Raised for malformed PLY input; message carries the offending line."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def project(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points (N, 3) to pixel coordinates (N, 2) as (u, v)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        u = self.fx * p[:, 0] / p[:, 2] + self.cx
        v = self.fy * p[:, 1] / p[:, 2] + self.cy
        return np.column_stack([u, v])

    def pixel_rays(self) -> np.ndarray:
        """Unnormalised ray direction (z = 1) for every pixel, shape (H, W, 3)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(float)
        return np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d: dict) -> CameraIntrinsics:
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
        )


@dataclass(frozen=True)
class RGBDFrame:
    """Color + depth capture. ``depth`` is in mm with 0 marking invalid pixels;
    ``capture_pose`` maps the camera frame into the robot base."""

    color: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    capture_pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.depth.shape != (h, w):
            raise ValueError(f"depth shape {self.depth.shape} != {(h, w)}")
        if self.color.shape[:2] != (h, w):
            raise ValueError(f"color shape {self.color.shape[:2]} != {(h, w)}")


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None
    frame_tag: str = "camera"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            cols = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(cols) != len(pts):
                raise ValueError("colors and points differ in length")
            object.__setattr__(self, "colors", cols)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask_or_index) -> PointCloud:
        cols = None if self.colors is None else self.colors[mask_or_index]
        return PointCloud(self.points[mask_or_index], cols, self.frame_tag)

    @classmethod
    def concatenate(cls, clouds: list[PointCloud], frame_tag: str | None = None) -> PointCloud:
        if not clouds:
            return cls(np.zeros((0, 3)), frame_tag=frame_tag or "base")
        pts = np.vstack([c.points for c in clouds])
        cols = None
        if all(c.colors is not None for c in clouds):
            cols = np.vstack([c.colors for c in clouds])
        return cls(pts, cols, frame_tag or clouds[0].frame_tag)


def deproject(frame: RGBDFrame, frame_tag: str = "camera") -> PointCloud:
    """Back-project valid depth pixels through the pinhole model (camera frame)."""
    k = frame.intrinsics
    v, u = np.nonzero(frame.depth > 0)
    d = frame.depth[v, u].astype(float)
    pts = np.column_stack([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d])
    return PointCloud(pts, frame.color[v, u], frame_tag)


def transform_cloud(cloud: PointCloud, t: RigidTransform, frame_tag: str | None = None) -> PointCloud:
    return replace(cloud, points=t.apply(cloud.points), frame_tag=frame_tag or cloud.frame_tag)


def voxel_downsample(cloud: PointCloud, voxel_mm: float) -> PointCloud:
    """One centroid per occupied voxel; output order follows sorted voxel keys."""
    if voxel_mm <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel_mm).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n = len(counts)
    pts = np.zeros((n, 3))
    np.add.at(pts, inverse, cloud.points)
    pts /= counts[:, None]
    cols = None
    if cloud.colors is not None:
        acc = np.zeros((n, 3))
        np.add.at(acc, inverse, cloud.colors.astype(float))
        cols = np.round(acc / counts[:, None]).astype(np.uint8)
    return PointCloud(pts, cols, cloud.frame_tag)


class SpatialIndex:
    """Exact Euclidean nearest-neighbour queries over a fixed cloud."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("cannot index an empty cloud")
        self.points = pts
        self._tree = cKDTree(pts)

    def query(self, queries: np.ndarray, k: int = 1,
              max_distance: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
        """Return (distances, indices) as cKDTree does (eps=0, i.e. exact).

        Queries with no neighbour within ``max_distance`` get distance ``inf``
        and index ``len(self.points)``.
        """
        return self._tree.query(np.asarray(queries, dtype=float), k=k,
                                distance_upper_bound=max_distance, workers=-1)

    def nearest(self, query: np.ndarray) -> tuple[int, float]:
        d, i = self._tree.query(np.asarray(query, dtype=float).reshape(3))
        return int(i), float(d)


def nearest_neighbor(index: SpatialIndex, query: np.ndarray) -> tuple[int, float]:
    return index.nearest(query)


def mean_knn_distance(points: np.ndarray, k: int) -> np.ndarray:
    d, _ = SpatialIndex(points).query(points, k=k + 1)
    # column 0 is the point itself
    return d[:, 1:].mean(axis=1)


def remove_statistical_outliers(
    cloud: PointCloud, k: int = DEFAULT_SOR_K, std_ratio: float = DEFAULT_SOR_STD_RATIO
) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds mean + std_ratio * std."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(cloud) < k + 1:
        return cloud
    md = mean_knn_distance(cloud.points, k)
    mean = md.mean()
    # the relative slack keeps rounding noise from culling a perfectly uniform cloud
    threshold = mean + std_ratio * md.std() + 1e-9 * max(mean, 1.0)
    return cloud.subset(md <= threshold)


def save_ply(path: str | Path, cloud: PointCloud) -> None:
    has_color = cloud.colors is not None
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment frame {cloud.frame_tag}",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
    ]
    if has_color:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    # repr of a Python float round-trips exactly
    for i, p in enumerate(cloud.points.tolist()):
        row = f"{p[0]!r} {p[1]!r} {p[2]!r}"
        if has_color:
            c = cloud.colors[i]
            row += f" {int(c[0])} {int(c[1])} {int(c[2])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def load_ply(path: str | Path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise PlyFormatError("line 1: missing 'ply' magic")
    n_vertex = None
    props: list[str] = []
    frame_tag = "camera"
    header_end = None
    in_vertex = False
    for lineno, raw in enumerate(text[1:], start=2):
        parts = raw.split()
        if not parts:
            continue
        key = parts[0]
        if key == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise PlyFormatError(f"line {lineno}: only ascii PLY is supported")
        elif key == "comment":
            if len(parts) >= 3 and parts[1] == "frame":
                frame_tag = parts[2]
        elif key == "element":
            if len(parts) != 3:
                raise PlyFormatError(f"line {lineno}: malformed element line")
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(parts[2])
                except ValueError:
                    raise PlyFormatError(f"line {lineno}: bad vertex count {parts[2]!r}") from None
        elif key == "property":
            if len(parts) != 3:
                raise PlyFormatError(f"line {lineno}: malformed property line")
            if in_vertex:
                props.append(parts[2])
        elif key == "end_header":
            header_end = lineno
            break
        else:
            raise PlyFormatError(f"line {lineno}: unexpected header keyword {key!r}")
    if header_end is None:
        raise PlyFormatError(f"line {len(text)}: header not terminated")
    if n_vertex is None:
        raise PlyFormatError(f"line {header_end}: no vertex element declared")
    try:
        xyz = [props.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise PlyFormatError(f"line {header_end}: vertex needs x, y, z properties") from None
    rgb = [props.index(a) for a in ("red", "green", "blue")] if "red" in props else None

    body = [(i, ln) for i, ln in enumerate(text[header_end:], start=header_end + 1) if ln.strip()]
    if len(body) < n_vertex:
        raise PlyFormatError(
            f"line {header_end + len(body)}: expected {n_vertex} vertices, found {len(body)}"
        )
    pts = np.zeros((n_vertex, 3))
    cols = np.zeros((n_vertex, 3), dtype=np.uint8) if rgb else None
    for k, (lineno, ln) in enumerate(body[:n_vertex]):
        parts = ln.split()
        if len(parts) != len(props):
            raise PlyFormatError(f"line {lineno}: expected {len(props)} values, got {len(parts)}")
        try:
            pts[k] = [float(parts[j]) for j in xyz]
            if rgb:
                cols[k] = [int(parts[j]) for j in rgb]
        except ValueError:
            raise PlyFormatError(f"line {lineno}: non-numeric vertex data") from None
    return PointCloud(pts, cols, frame_tag)


def save_frame(directory: str | Path, name: str, frame: RGBDFrame) -> None:
    """Write ``name_color.png``, ``name_depth.png`` (uint16, 1 unit = 1 mm)
    and a ``name.json`` sidecar with intrinsics and capture pose."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(frame.color, dtype=np.uint8)).save(d / f"{name}_color.png")
    depth = np.clip(np.round(frame.depth), 0, 65535).astype(np.uint16)
    Image.fromarray(depth).save(d / f"{name}_depth.png")
    sidecar = {"intrinsics": frame.intrinsics.to_dict(), "capture_pose": frame.capture_pose.to_dict()}
    (d / f"{name}.json").write_text(json.dumps(sidecar, indent=2))


def load_frame(directory: str | Path, name: str) -> RGBDFrame:
    d = Path(directory)
    meta = json.loads((d / f"{name}.json").read_text())
    color = np.asarray(Image.open(d / f"{name}_color.png").convert("RGB"))
    depth = np.asarray(Image.open(d / f"{name}_depth.png"), dtype=np.float64)
    return RGBDFrame(
        color,
        depth,
        CameraIntrinsics.from_dict(meta["intrinsics"]),
        RigidTransform.from_dict(meta["capture_pose"]),
    )
