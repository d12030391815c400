import numpy as np
import pytest

from auscultation.contact import (
    ContactSimConfig,
    ForceTrace,
    PIDGains,
    PIDState,
    RampTrajectory,
    SpringModel,
    dynamic_scenario,
    pid_step,
    simulate_contact,
    spring_force,
    static_scenario,
    target_compression,
    trace_metrics,
)


def test_spring_force_examples():
    assert spring_force(0.0) == 0.0
    assert spring_force(5.556) == pytest.approx(5.0, abs=1e-3)
    assert spring_force(11.11) == pytest.approx(10.0, abs=1e-3)
    assert spring_force(50.0) == pytest.approx(0.9 * 20.0)  # saturates at the travel limit


def test_spring_force_rejects_negative_compression():
    with pytest.raises(ValueError):
        spring_force(-0.1)


def test_target_compression_examples():
    assert target_compression(0.0) == 0.0
    assert target_compression(15.0) == pytest.approx(16.67, abs=5e-3)
    for f in np.linspace(0, 18, 37):
        assert abs(spring_force(target_compression(f)) - f) <= 1e-12
    with pytest.raises(ValueError):
        target_compression(18.5)
    with pytest.raises(ValueError):
        target_compression(-1.0)


def test_spring_validation():
    with pytest.raises(ValueError):
        SpringModel(k_per_spring=0.0)
    with pytest.raises(ValueError):
        SpringModel(spring_count=0)
    with pytest.raises(ValueError):
        PIDGains(kp=-1.0)


def test_pid_zero_gains_give_zero_command():
    st = PIDState(PIDGains(0.0, 0.0, 0.0))
    assert pid_step(st, 5.0, 1.0, 0.01) == 0.0


def test_pid_proportional_law():
    st = PIDState(PIDGains(1.0, 0.0, 0.0))
    assert pid_step(st, 3.0, 1.0, 0.01) == 2.0


def test_pid_integral_grows_until_clamp():
    st = PIDState(PIDGains(0.0, 10.0, 0.0), speed_limit=28.0)
    dt, err = 0.01, 1.0
    commands = [pid_step(st, err, 0.0, dt) for _ in range(400)]
    # closed form before the clamp: ki * err * k * dt
    k = np.arange(1, 401)
    expected = np.minimum(10.0 * err * k * dt, 28.0)
    assert np.allclose(commands, expected)
    assert np.all(np.diff(commands) >= 0) and commands[-1] == 28.0


def test_pid_rejects_bad_dt():
    with pytest.raises(ValueError):
        pid_step(PIDState(), 1.0, 0.0, 0.0)


def test_ramp_trajectory():
    r = RampTrajectory(start=-5.0, end=5.0, t_start=0.25, move_time=0.5)
    assert r(0.0) == -5.0 and r(0.5) == pytest.approx(0.0) and r(2.0) == 5.0


def test_no_contact_gives_zero_force():
    cfg = ContactSimConfig(base_trajectory=RampTrajectory(-20.0, -10.0))
    trace = simulate_contact(cfg)
    assert np.all(trace.force == 0.0) and not trace.in_contact.any()
    assert not trace_metrics(trace, 5.0).defined


@pytest.mark.parametrize("target", [5.0, 10.0, 15.0])
@pytest.mark.parametrize("push_in", [3.0, 5.5, 8.0])
def test_static_force_independent_of_push_in(target, push_in):
    trace = simulate_contact(static_scenario(target, push_in, seed=int(push_in * 10)))
    m = trace_metrics(trace, target)
    assert abs(m.steady_state_error_pct) <= 2.0


def test_dynamic_scenario_overshoot_and_settling():
    trace = simulate_contact(dynamic_scenario(5.0))
    m = trace_metrics(trace, 5.0)
    assert np.all(trace.force[trace.t < 0.49] == 0.0)
    assert m.peak_force <= 5.5
    assert m.settling_time <= 0.5
    assert abs(m.steady_state_error_pct) <= 2.0


def test_trace_invariants():
    cfg = dynamic_scenario(10.0, seed=3)
    tr = simulate_contact(cfg)
    assert np.all(tr.force >= 0) and np.all(tr.compression >= 0)
    assert np.all(tr.compression <= cfg.spring.max_compression)
    assert np.array_equal(tr.force == 0, ~tr.in_contact)
    speed = np.abs(np.diff(tr.actuator)) * cfg.control_rate
    assert np.all(speed <= cfg.actuator_speed_limit + 1e-9)
    lo, hi = cfg.actuator_travel
    assert tr.actuator.min() >= lo and tr.actuator.max() <= hi


def test_higher_target_means_more_compression():
    comps = []
    for target in (2.0, 5.0, 10.0, 15.0):
        tr = simulate_contact(static_scenario(target, 5.0))
        comps.append(tr.compression[int(0.8 * len(tr)) :].mean())
    assert np.all(np.diff(comps) > 0)


def test_simulation_is_deterministic():
    a = simulate_contact(dynamic_scenario(5.0, seed=7)).to_csv()
    b = simulate_contact(dynamic_scenario(5.0, seed=7)).to_csv()
    assert a == b
    assert a != simulate_contact(dynamic_scenario(5.0, seed=8)).to_csv()


def make_trace(force, dt=0.01):
    force = np.asarray(force, dtype=float)
    t = np.arange(len(force)) * dt
    return ForceTrace(t, force, force / 0.9, np.zeros_like(force), force > 0)


def test_metrics_constant_trace():
    m = trace_metrics(make_trace(np.full(100, 5.0)), 5.0)
    assert m.defined
    assert m.overshoot_pct == 0.0 and m.settling_time == 0.0 and m.steady_state_error_pct == 0.0


def test_metrics_overshoot_from_peak():
    f = np.full(200, 5.0)
    f[20:40] = np.linspace(0, 5.36, 20)
    f[:20] = 0.0
    m = trace_metrics(make_trace(f), 5.0)
    assert m.overshoot_pct == pytest.approx(7.2)
    assert m.first_contact_time == pytest.approx(0.21)
    # last sample outside the band is index 39, so the trace settles at index 40
    assert m.settling_time == pytest.approx(0.40 - 0.21)


def test_metrics_never_settling():
    m = trace_metrics(make_trace(np.full(50, 6.0)), 5.0)
    assert m.settling_time == np.inf
    with pytest.raises(ValueError):
        trace_metrics(make_trace([]), 5.0)


def test_config_round_trip():
    cfg = dynamic_scenario(10.0, seed=4)
    back = ContactSimConfig.from_dict(cfg.to_dict())
    assert back == cfg
    with pytest.raises(ValueError):
        ContactSimConfig(control_rate=0.0)
    with pytest.raises(ValueError):
        ContactSimConfig(target_force=-1.0)


def test_trace_csv_columns(tmp_path):
    tr = simulate_contact(dynamic_scenario(5.0))
    text = tr.to_csv(tmp_path / "trace.csv")
    lines = text.splitlines()
    assert lines[0] == "t,force_N,compression_mm,actuator_mm,in_contact"
    assert len(lines) == len(tr) + 1
    assert (tmp_path / "trace.csv").read_text() == text
