"""Constant-force end effector: spring contact model plus a PID-servoed
linear actuator that regulates spring compression.

Positions are measured along the approach axis, increasing toward (and into)
the body surface, in mm. The stethoscope head is treated as massless, so the
contact force is the spring law applied to the current compression.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SpringModel:
    k_per_spring: float = 0.45  # N/mm
    spring_count: int = 2
    max_compression: float = 20.0  # mm

    def __post_init__(self):
        if self.k_per_spring <= 0:
            raise ValueError("spring constant must be positive")
        if self.spring_count < 1:
            raise ValueError("need at least one spring")
        if self.max_compression <= 0:
            raise ValueError("max_compression must be positive")

    @property
    def stiffness(self) -> float:
        return self.k_per_spring * self.spring_count


def spring_force(compression: float, spring: SpringModel = SpringModel()) -> float:
    """Hooke's law for the parallel springs, saturating at the travel limit."""
    if compression < 0:
        raise ValueError("compression must be non-negative")
    return spring.stiffness * min(compression, spring.max_compression)


def target_compression(force: float, spring: SpringModel = SpringModel()) -> float:
    f_max = spring_force(spring.max_compression, spring)
    if not 0 <= force <= f_max:
        raise ValueError(f"force {force} N outside [0, {f_max}] N")
    return force / spring.stiffness


@dataclass(frozen=True)
class PIDGains:
    kp: float = 50.0
    ki: float = 0.0
    kd: float = 0.0
    integral_limit: float | None = None  # mm*s; None -> speed_limit / ki

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0:
            raise ValueError("PID gains must be non-negative")


@dataclass
class PIDState:
    gains: PIDGains = field(default_factory=PIDGains)
    speed_limit: float = 28.0  # mm/s
    integral: float = 0.0
    previous_error: float | None = None

    def reset(self) -> None:
        self.integral = 0.0
        self.previous_error = None


def pid_step(state: PIDState, setpoint: float, measured: float, dt: float) -> float:
    """Advance the controller one tick; returns an actuator velocity (mm/s).

    The error is ``setpoint - measured`` compression, so a positive command
    extends the actuator toward the body. The integral is clamped for
    anti-windup and the output to the actuator speed limit.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    g = state.gains
    error = setpoint - measured
    limit = g.integral_limit
    if limit is None:
        limit = state.speed_limit / g.ki if g.ki > 0 else np.inf
    state.integral = float(np.clip(state.integral + error * dt, -limit, limit))
    derivative = 0.0 if state.previous_error is None else (error - state.previous_error) / dt
    state.previous_error = error
    command = g.kp * error + g.ki * state.integral + g.kd * derivative
    return float(np.clip(command, -state.speed_limit, state.speed_limit))


@dataclass(frozen=True)
class RampTrajectory:
    """Robot approach: hold ``start``, move linearly to ``end`` over ``move_time``
    beginning at ``t_start``, then hold."""

    start: float
    end: float
    t_start: float = 0.0
    move_time: float = 0.5

    def __call__(self, t: float) -> float:
        if self.move_time <= 0:
            return self.end if t >= self.t_start else self.start
        s = np.clip((t - self.t_start) / self.move_time, 0.0, 1.0)
        return float(self.start + s * (self.end - self.start))


@dataclass
class ContactSimConfig:
    spring: SpringModel = field(default_factory=SpringModel)
    gains: PIDGains = field(default_factory=PIDGains)
    target_force: float = 5.0
    surface_z: float = 0.0
    base_trajectory: RampTrajectory = field(
        default_factory=lambda: RampTrajectory(start=-5.0, end=5.0, t_start=0.25, move_time=0.5)
    )
    actuator_speed_limit: float = 28.0
    actuator_travel: tuple[float, float] = (-5.0, 15.0)  # 20 mm stroke
    sensor_noise_sigma: float = 0.05
    contact_threshold: float = 0.25  # mm of measured compression that engages the loop
    control_rate: float = 100.0
    duration: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.control_rate <= 0 or self.duration <= 0:
            raise ValueError("control_rate and duration must be positive")
        if self.target_force < 0:
            raise ValueError("target force must be non-negative")
        if self.actuator_travel[0] > 0 or self.actuator_travel[1] < 0:
            raise ValueError("actuator home position must lie inside its travel")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["actuator_travel"] = list(self.actuator_travel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ContactSimConfig:
        d = dict(d)
        kw = {}
        if "spring" in d:
            kw["spring"] = SpringModel(**d.pop("spring"))
        if "gains" in d:
            kw["gains"] = PIDGains(**d.pop("gains"))
        if "base_trajectory" in d:
            kw["base_trajectory"] = RampTrajectory(**d.pop("base_trajectory"))
        if "actuator_travel" in d:
            kw["actuator_travel"] = tuple(d.pop("actuator_travel"))
        return cls(**kw, **d)


def static_scenario(target_force: float, push_in: float = 5.0, seed: int = 0, **overrides) -> ContactSimConfig:
    """Start 5 mm above the surface and press ``push_in`` mm into it, then hold."""
    traj = RampTrajectory(start=-5.0, end=push_in, t_start=0.1, move_time=(push_in + 5.0) / 20.0)
    return ContactSimConfig(target_force=target_force, base_trajectory=traj, duration=3.0, seed=seed, **overrides)


def dynamic_scenario(target_force: float = 5.0, seed: int = 0, **overrides) -> ContactSimConfig:
    """5 mm above the surface, 10 mm travel in 0.5 s: first touch at t = 0.5 s."""
    traj = RampTrajectory(start=-5.0, end=5.0, t_start=0.25, move_time=0.5)
    return ContactSimConfig(target_force=target_force, base_trajectory=traj, duration=2.0, seed=seed, **overrides)


@dataclass
class ForceTrace:
    t: np.ndarray
    force: np.ndarray
    compression: np.ndarray
    actuator: np.ndarray
    in_contact: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "force_N", "compression_mm", "actuator_mm", "in_contact"])
        for row in zip(self.t, self.force, self.compression, self.actuator, self.in_contact):
            w.writerow([f"{row[0]:.4f}", f"{row[1]:.6f}", f"{row[2]:.6f}", f"{row[3]:.6f}", int(row[4])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def simulate_contact(config: ContactSimConfig) -> ForceTrace:
    dt = 1.0 / config.control_rate
    n = int(round(config.duration * config.control_rate)) + 1
    rng = np.random.default_rng(config.seed)
    noise = rng.normal(0.0, config.sensor_noise_sigma, n) if config.sensor_noise_sigma > 0 else np.zeros(n)
    setpoint = target_compression(config.target_force, config.spring)
    pid = PIDState(config.gains, config.actuator_speed_limit)
    lo, hi = config.actuator_travel

    t = np.arange(n) * dt
    force = np.zeros(n)
    comp = np.zeros(n)
    act = np.zeros(n)
    contact = np.zeros(n, dtype=bool)
    a = 0.0
    for k in range(n):
        tip = config.base_trajectory(t[k]) + a
        c = min(max(tip - config.surface_z, 0.0), config.spring.max_compression)
        comp[k], act[k], contact[k] = c, a, c > 0
        force[k] = spring_force(c, config.spring)
        measured = c + noise[k]
        if measured > config.contact_threshold:
            u = pid_step(pid, setpoint, measured, dt)
        else:
            # free air: hold position and keep the integrator from winding up
            u = 0.0
            pid.reset()
        a = min(max(a + u * dt, lo), hi)
    return ForceTrace(t, force, comp, act, contact)


@dataclass(frozen=True)
class TraceMetrics:
    defined: bool
    overshoot_pct: float = float("nan")
    settling_time: float = float("nan")  # s after first contact
    steady_state_error_pct: float = float("nan")
    peak_force: float = float("nan")
    steady_state_force: float = float("nan")
    first_contact_time: float = float("nan")


def trace_metrics(trace: ForceTrace, target_force: float, band: float = 0.02) -> TraceMetrics:
    if len(trace) == 0:
        raise ValueError("empty trace")
    if not trace.in_contact.any() or target_force <= 0:
        return TraceMetrics(defined=False)
    first = int(np.argmax(trace.in_contact))
    peak = float(trace.force.max())
    tail = trace.force[int(np.floor(0.8 * len(trace))) :]
    steady = float(tail.mean())
    outside = np.abs(trace.force[first:] - target_force) > band * target_force
    if not outside.any():
        settle = 0.0
    elif outside[-1]:
        settle = float("inf")
    else:
        last_out = first + int(np.nonzero(outside)[0][-1])
        settle = float(trace.t[last_out + 1] - trace.t[first])
    return TraceMetrics(
        defined=True,
        overshoot_pct=100.0 * (peak - target_force) / target_force,
        settling_time=settle,
        steady_state_error_pct=100.0 * (steady - target_force) / target_force,
        peak_force=peak,
        steady_state_force=steady,
        first_contact_time=float(trace.t[first]),
    )
