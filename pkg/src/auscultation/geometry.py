"""Rigid transforms, the camera/robot/stethoscope frame chain and the
small-angle pose update used by the registration solver.

All lengths are millimetres.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) (orthogonal polar factor, det +1)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element stored as rotation + translation (mm)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("transform has non-finite entries")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> RigidTransform:
        m = np.asarray(m, dtype=float)
        return cls(nearest_rotation(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map a single 3-vector or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        return invert(self)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r @ r.T, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) < tol
        )

    def to_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> RigidTransform:
        rot = np.asarray(d["rotation"], dtype=float)
        if rot.size != 9 or len(d["translation"]) != 3:
            raise ValueError("pose record needs 9 rotation and 3 translation numbers")
        return cls(nearest_rotation(rot.reshape(3, 3)), d["translation"])


def translation(x: float, y: float, z: float) -> RigidTransform:
    return RigidTransform(np.eye(3), [x, y, z])


def rotation_about(axis: str, angle: float) -> RigidTransform:
    """Pure rotation of ``angle`` radians about the x, y or z axis."""
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        r = [[1, 0, 0], [0, c, -s], [0, s, c]]
    elif axis == "y":
        r = [[c, 0, s], [0, 1, 0], [-s, 0, c]]
    elif axis == "z":
        r = [[c, -s, 0], [s, c, 0], [0, 0, 1]]
    else:
        raise ValueError(f"unknown axis {axis!r}")
    return RigidTransform(np.array(r, dtype=float), np.zeros(3))


def rotation_from_rotvec(rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(rotvec, dtype=float).reshape(3)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3) + skew(w)
    k = skew(w / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return ``a ∘ b`` (apply ``b`` first, then ``a``)."""
    r = nearest_rotation(a.rotation @ b.rotation)
    t = a.rotation @ b.translation + a.translation
    return RigidTransform(r, t)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def chain_to_base(p_lidar: np.ndarray, t_ee_base: RigidTransform, t_lidar_ee: RigidTransform) -> np.ndarray:
    """Express a LiDAR-frame point in robot-base coordinates."""
    return t_ee_base.apply(t_lidar_ee.apply(p_lidar))


def chain_to_stethoscope(
    p_lidar: np.ndarray, t_steth_ee: RigidTransform, t_lidar_ee: RigidTransform
) -> np.ndarray:
    """Express a LiDAR-frame point in the stethoscope frame.

    Both transforms map their frame into the end-effector frame, so the point
    goes LiDAR -> end-effector -> stethoscope.
    """
    return invert(t_steth_ee).apply(t_lidar_ee.apply(p_lidar))


@dataclass(frozen=True)
class TwistVector:
    """Small-motion pose increment: rotation (rad) then translation (mm)."""

    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0

    @classmethod
    def from_array(cls, xi: np.ndarray) -> TwistVector:
        return cls(*(float(v) for v in np.asarray(xi, dtype=float).reshape(6)))

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma, self.a, self.b, self.c])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))


def twist_matrix(xi) -> np.ndarray:
    """First-order 4x4 transform for a twist: [I + [w]x | t]."""
    x = xi.as_array() if isinstance(xi, TwistVector) else np.asarray(xi, dtype=float)
    al, be, ga, a, b, c = x
    return np.array(
        [
            [1.0, -ga, be, a],
            [ga, 1.0, -al, b],
            [-be, al, 1.0, c],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def apply_twist(xi, t_prev: RigidTransform) -> RigidTransform:
    """Left-multiply the linearised twist onto ``t_prev`` and repair the rotation."""
    m = twist_matrix(xi) @ t_prev.matrix()
    return RigidTransform(nearest_rotation(m[:3, :3]), m[:3, 3])


def save_poses(path: str | Path, poses: list[RigidTransform]) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in poses], indent=2))


def load_poses(path: str | Path) -> list[RigidTransform]:
    return [RigidTransform.from_dict(d) for d in json.loads(Path(path).read_text())]
