"""Multi-way registration with a line-process robust kernel.

Surfaces arrive already expressed in the robot base frame (capture poses from
odometry), so the solver only refines each surface by a small correction.
Outer loop: recompute mutual-nearest-neighbour correspondences, anneal the
robust scale ``mu``; inner loop: closed-form line-process weights followed by
one Gauss-Newton step on all poses jointly, with surface 0 held fixed.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform, apply_twist
from .pointcloud import (
    DEFAULT_SOR_K,
    DEFAULT_SOR_STD_RATIO,
    PointCloud,
    SpatialIndex,
    remove_statistical_outliers,
    transform_cloud,
)

logger = logging.getLogger(__name__)


class RegistrationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CorrespondenceSet:
    i: int
    j: int
    pairs: np.ndarray  # (K, 2) int: index into surface i, index into surface j

    def __post_init__(self):
        p = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "pairs", p)

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class LineProcess:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if np.any(w <= 0) or np.any(w > 1):
            raise ValueError("line-process weights must lie in (0, 1]")
        object.__setattr__(self, "weights", w)


@dataclass
class MultiwayProblem:
    surfaces: list[PointCloud]
    lam: float = 1.0
    mu: float | None = None  # initial robust scale, mm^2; defaults to max_corr_dist^2
    max_corr_dist: float = 25.0
    mu_floor: float = 1.0
    mu_divisor: float = 2.0
    iterations_per_mu: int = 4
    max_iterations: int = 256
    tolerance: float = 1e-6
    initial_poses: list[RigidTransform] | None = None
    sor_k: int = DEFAULT_SOR_K
    sor_std_ratio: float = DEFAULT_SOR_STD_RATIO

    def __post_init__(self):
        if len(self.surfaces) < 2:
            raise ValueError("multi-way registration needs at least two surfaces")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.mu is None:
            self.mu = self.max_corr_dist**2
        if self.mu <= 0 or self.mu_floor <= 0:
            raise ValueError("mu must be positive")
        if self.mu_divisor < 1 or self.iterations_per_mu < 1 or self.max_iterations < 1:
            raise ValueError("mu_divisor, iterations_per_mu and max_iterations must be at least 1")
        if self.initial_poses is not None and len(self.initial_poses) != len(self.surfaces):
            raise ValueError("one initial pose per surface required")

    @classmethod
    def from_config(cls, surfaces: list[PointCloud], config: dict | None) -> MultiwayProblem:
        config = dict(config or {})
        allowed = {
            "lam", "mu", "max_corr_dist", "mu_floor", "mu_divisor", "iterations_per_mu",
            "max_iterations", "tolerance", "sor_k", "sor_std_ratio",
        }
        unknown = set(config) - allowed
        if unknown:
            raise ValueError(f"unknown registration config keys: {sorted(unknown)}")
        return cls(surfaces, **config)

    def mu_schedule(self, iteration: int) -> float:
        phase = iteration // self.iterations_per_mu
        # cap the exponent so very late iterations cannot overflow the power
        mu = self.mu / float(self.mu_divisor) ** min(phase, 1000)
        return float(max(mu, self.mu_floor))


@dataclass
class RegistrationResult:
    poses: list[RigidTransform]
    stacked_update: np.ndarray
    objective_history: list[float]
    phase_history: list[int]
    merged: PointCloud
    iterations: int = 0
    converged: bool = False
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "poses": [p.to_dict() for p in self.poses],
            "stacked_update": [float(x) for x in self.stacked_update],
            "objective_history": [float(e) for e in self.objective_history],
            "phase_history": list(self.phase_history),
            "iterations": self.iterations,
            "converged": self.converged,
            "warnings": list(self.warnings),
        }


def find_correspondences(
    p_i: PointCloud,
    p_j: PointCloud,
    poses: tuple[RigidTransform, RigidTransform],
    max_corr_dist: float,
    i: int = 0,
    j: int = 1,
) -> CorrespondenceSet:
    """Mutual nearest neighbours within ``max_corr_dist`` under the given poses."""
    if len(p_i) == 0 or len(p_j) == 0:
        return CorrespondenceSet(i, j, np.zeros((0, 2), dtype=np.int64))
    a = poses[0].apply(p_i.points)
    b = poses[1].apply(p_j.points)
    d_ab, nn_ab = SpatialIndex(b).query(a, max_distance=max_corr_dist)
    _, nn_ba = SpatialIndex(a).query(b, max_distance=max_corr_dist)
    idx = np.arange(len(a))
    found = d_ab <= max_corr_dist
    back = np.full(len(a), -1)
    back[found] = nn_ba[nn_ab[found]]
    keep = found & (back == idx)
    pairs = np.column_stack([idx[keep], nn_ab[keep]])
    return CorrespondenceSet(i, j, pairs)


def update_line_process(residuals_sq: np.ndarray, mu: float) -> LineProcess:
    """Closed-form weights l = (mu / (mu + r^2))^2 for squared residuals r^2."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    r2 = np.asarray(residuals_sq, dtype=float)
    w = (mu / (mu + r2)) ** 2
    # keep the (0, 1] contract for astronomically large residuals
    w = np.maximum(w, np.finfo(float).tiny)
    return LineProcess(w)


def line_process_penalty(weights: np.ndarray, mu: float) -> np.ndarray:
    return mu * (np.sqrt(weights) - 1.0) ** 2


def _pair_residuals(surfaces, poses, corr: CorrespondenceSet) -> np.ndarray:
    p = poses[corr.i].apply(surfaces[corr.i].points[corr.pairs[:, 0]])
    q = poses[corr.j].apply(surfaces[corr.j].points[corr.pairs[:, 1]])
    return p - q


def residuals_squared(surfaces, poses, correspondences) -> list[np.ndarray]:
    return [np.einsum("ij,ij->i", r, r) for r in (_pair_residuals(surfaces, poses, c) for c in correspondences)]


def evaluate_objective(
    problem: MultiwayProblem,
    poses: list[RigidTransform],
    correspondences: list[CorrespondenceSet],
    line_process: list[LineProcess],
    mu: float | None = None,
) -> float:
    """Robust multi-way objective.

    ``lam * sum_consecutive |r|^2 + sum_pairs (l |r|^2 + mu (sqrt(l) - 1)^2)``;
    the consecutive-surface term reuses the pair's correspondences with unit
    weights.
    """
    mu = problem.mu if mu is None else mu
    total = 0.0
    for corr, lp, r2 in zip(correspondences, line_process, residuals_squared(problem.surfaces, poses, correspondences)):
        if corr.j == corr.i + 1:
            total += problem.lam * float(r2.sum())
        total += float(np.dot(lp.weights, r2)) + float(line_process_penalty(lp.weights, mu).sum())
    return total


def _normal_equations(problem, poses, correspondences, line_process):
    n = len(poses)
    h = np.zeros((6 * n, 6 * n))
    g = np.zeros(6 * n)
    for corr, lp in zip(correspondences, line_process):
        if len(corr) == 0:
            continue
        p = poses[corr.i].apply(problem.surfaces[corr.i].points[corr.pairs[:, 0]])
        q = poses[corr.j].apply(problem.surfaces[corr.j].points[corr.pairs[:, 1]])
        r = p - q
        w = lp.weights.copy()
        if corr.j == corr.i + 1:
            w = w + problem.lam
        # d(T_i p)/d(xi_i) = [-[p]x | I],  d(-T_j q)/d(xi_j) = [[q]x | -I]
        jac = np.concatenate([_point_jacobians(p, 1.0), _point_jacobians(q, -1.0)], axis=2).reshape(-1, 12)
        wj = jac * np.repeat(w, 3)[:, None]
        hb = wj.T @ jac
        gb = wj.T @ r.reshape(-1)
        idx = np.r_[6 * corr.i : 6 * corr.i + 6, 6 * corr.j : 6 * corr.j + 6]
        h[np.ix_(idx, idx)] += hb
        g[idx] += gb
    return h, g


def _point_jacobians(x: np.ndarray, sign: float) -> np.ndarray:
    """Per-point 3x6 Jacobian of ``sign * (I + [w]x) x + sign * t`` at zero twist."""
    k = len(x)
    j = np.zeros((k, 3, 6))
    # -[x]x columns
    j[:, 0, 1], j[:, 0, 2] = x[:, 2], -x[:, 1]
    j[:, 1, 0], j[:, 1, 2] = -x[:, 2], x[:, 0]
    j[:, 2, 0], j[:, 2, 1] = x[:, 1], -x[:, 0]
    j[:, :, 3:] = np.eye(3)
    return sign * j


def solve_pose_update(
    problem: MultiwayProblem,
    poses: list[RigidTransform],
    correspondences: list[CorrespondenceSet],
    line_process: list[LineProcess],
    anchor: int = 0,
    damping: float = 0.0,
) -> tuple[list[RigidTransform], np.ndarray]:
    """One Gauss-Newton step: solve ``J^T J Xi = -J^T r`` and apply every twist.

    Returns the updated poses and the stacked 6N update vector (zeros for the
    anchor). Rank-deficient systems are solved with diagonal damping and a
    :class:`RegistrationWarning`.
    """
    n = len(poses)
    h, g = _normal_equations(problem, poses, correspondences, line_process)
    free = np.array([k for k in range(6 * n) if k // 6 != anchor])
    hf = h[np.ix_(free, free)]
    gf = g[free]
    if damping > 0:
        hf = hf + damping * np.diag(np.diag(hf))
    xi = np.zeros(6 * n)
    if not np.any(gf):
        return list(poses), xi
    cond = np.linalg.cond(hf) if np.all(np.isfinite(hf)) else np.inf
    if not np.isfinite(cond) or cond > 1e12:
        warnings.warn(
            f"ill-conditioned pose system (cond={cond:.3g}); applying diagonal damping",
            RegistrationWarning,
            stacklevel=2,
        )
        scale = max(float(np.max(np.abs(np.diag(hf)))), 1.0)
        hf = hf + 1e-9 * scale * np.eye(len(hf)) + 1e-6 * np.diag(np.diag(hf))
    xi[free] = np.linalg.solve(hf, -gf)
    new = [apply_twist(xi[6 * k : 6 * k + 6], poses[k]) if k != anchor else poses[k] for k in range(n)]
    return new, xi


def _all_correspondences(problem, poses, pairs=None):
    n = len(problem.surfaces)
    out = []
    for i in range(n):
        for j in range(i + 1, n):
            if pairs is not None and (i, j) not in pairs:
                continue
            out.append(
                find_correspondences(
                    problem.surfaces[i], problem.surfaces[j], (poses[i], poses[j]), problem.max_corr_dist, i, j
                )
            )
    return out


def merge_surfaces(
    surfaces: list[PointCloud],
    poses: list[RigidTransform],
    sor_k: int = DEFAULT_SOR_K,
    sor_std_ratio: float = DEFAULT_SOR_STD_RATIO,
) -> PointCloud:
    """Apply poses, concatenate and filter statistical outliers."""
    clouds = [transform_cloud(s, t, "base") for s, t in zip(surfaces, poses)]
    return remove_statistical_outliers(PointCloud.concatenate(clouds, "base"), sor_k, sor_std_ratio)


def multiway_register(problem: MultiwayProblem) -> RegistrationResult:
    n = len(problem.surfaces)
    poses = list(problem.initial_poses or [RigidTransform.identity()] * n)
    history: list[float] = []
    phases: list[int] = []
    notes: list[str] = []
    xi = np.zeros(6 * n)
    converged = False
    correspondences: list[CorrespondenceSet] = []
    iteration = 0

    for iteration in range(problem.max_iterations):
        phase = iteration // problem.iterations_per_mu
        mu = problem.mu_schedule(iteration)
        if iteration % problem.iterations_per_mu == 0:
            correspondences = [c for c in _all_correspondences(problem, poses) if len(c)]
            if not correspondences:
                msg = "no correspondences found; returning input poses"
                if iteration == 0:
                    logger.warning(msg)
                    notes.append(msg)
                break
        r2 = residuals_squared(problem.surfaces, poses, correspondences)
        lp = [update_line_process(x, mu) for x in r2]
        energy = evaluate_objective(problem, poses, correspondences, lp, mu)
        history.append(energy)
        phases.append(phase)

        candidate, step = solve_pose_update(problem, poses, correspondences, lp)
        # Gauss-Newton with renormalisation is not guaranteed to descend;
        # backtrack so E(T, L) never increases inside a mu phase.
        scale = 1.0
        accepted = False
        for _ in range(8):
            e_new = evaluate_objective(problem, candidate, correspondences, lp, mu)
            if e_new <= energy + 1e-12 * max(1.0, abs(energy)):
                accepted = True
                break
            scale *= 0.5
            candidate = [apply_twist(scale * step[6 * k : 6 * k + 6], poses[k]) if k != 0 else poses[k] for k in range(n)]
        if accepted:
            poses = candidate
            xi = scale * step
        else:
            xi = np.zeros(6 * n)
        max_twist = float(np.linalg.norm(xi.reshape(n, 6), axis=1).max())
        # small steps at a large mu only mean the current correspondences are
        # exhausted; keep annealing until the floor is reached
        if max_twist < problem.tolerance and mu <= problem.mu_floor:
            converged = True
            break

    merged = merge_surfaces(problem.surfaces, poses, problem.sor_k, problem.sor_std_ratio)
    return RegistrationResult(
        poses=poses,
        stacked_update=xi,
        objective_history=history,
        phase_history=phases,
        merged=merged,
        iterations=len(history),
        converged=converged,
        warnings=notes,
    )
