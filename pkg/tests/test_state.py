import math

import pytest
from hypothesis import given, settings, strategies as st

from noiseplan.errors import ConfigError
from noiseplan.state import (
    Airspace,
    ControlBounds,
    EvtolState,
    Observer,
    OutOfDomainError,
    RotorPolicy,
    angle_diff,
    kino_dist,
    load_zones,
    ordinance_ok,
    relative_state,
    save_zones,
    simulate_step,
    wrap_angle,
    zone_from_dict,
)


def make_state(**kw):
    base = dict(v=30.0, rho=550.0, x=0.0, y=0.0, z=100.0, theta=0.0)
    base.update(kw)
    return EvtolState(**base)


ORIGIN = Observer(id="o", x=0.0, y=0.0, z=0.0)


class TestRelativeState:
    def test_observer_dead_ahead(self):
        rel = relative_state(make_state(x=100.0, z=50.0), ORIGIN)
        assert (rel.v, rel.rho) == (30.0, 550.0)
        assert rel.h == pytest.approx(50.0)
        assert rel.r == pytest.approx(100.0)
        assert rel.phi == pytest.approx(0.0)

    def test_directly_overhead_phi_is_zero(self):
        rel = relative_state(make_state(x=0.0, y=0.0, z=120.0, theta=1.3), ORIGIN)
        assert rel.h == pytest.approx(120.0)
        assert rel.r == 0.0
        assert rel.phi == 0.0

    def test_observer_to_the_left(self):
        rel = relative_state(make_state(x=0.0, y=100.0, z=50.0, theta=0.0), ORIGIN)
        assert rel.phi == pytest.approx(-math.pi / 2, abs=1e-12)

    def test_observer_altitude_subtracted(self):
        obs = Observer(id="hill", x=0.0, y=0.0, z=30.0)
        rel = relative_state(make_state(z=100.0, x=50.0), obs)
        assert rel.h == pytest.approx(70.0)

    @given(
        theta=st.floats(-10.0, 10.0),
        x=st.floats(-500.0, 500.0),
        y=st.floats(-500.0, 500.0),
    )
    @settings(max_examples=200)
    def test_phi_always_wrapped(self, theta, x, y):
        rel = relative_state(make_state(x=x, y=y, theta=theta), ORIGIN)
        assert -math.pi <= rel.phi < math.pi


class TestKinoDist:
    def test_reflexive(self):
        s = make_state()
        assert kino_dist(s, s) == 0.0

    def test_planar_pythagoras(self):
        assert kino_dist(make_state(), make_state(x=3.0, y=4.0)) == pytest.approx(5.0)

    def test_heading_only(self):
        a = make_state(theta=0.0)
        b = make_state(theta=-math.pi)  # shortest difference is pi
        assert kino_dist(a, b) == pytest.approx(math.sqrt(math.pi / 2), abs=1e-12)

    def test_mixed_frozen_value(self):
        a = make_state()
        b = make_state(x=3.0, y=4.0, theta=-math.pi)
        assert kino_dist(a, b) == pytest.approx(5.154686831107677, abs=1e-12)

    @given(
        dx=st.floats(-100, 100),
        dz=st.floats(-100, 100),
        t1=st.floats(-7, 7),
        t2=st.floats(-7, 7),
    )
    @settings(max_examples=200)
    def test_symmetry(self, dx, dz, t1, t2):
        a = make_state(theta=t1)
        b = make_state(x=dx, z=100.0 + dz, theta=t2)
        assert kino_dist(a, b) == pytest.approx(kino_dist(b, a), rel=1e-12)


BOUNDS = ControlBounds()
ROTOR = RotorPolicy()
BOX = Airspace(x=(0.0, 2200.0), y=(0.0, 2200.0), z=(0.0, 450.0))


class TestSimulateStep:
    def test_straight_segment(self):
        s = make_state(x=100.0, y=100.0, v=30.0)
        nxt = simulate_step(s, v_cmd=30.0, h_cmd=s.z, dtheta_cmd=0.0,
                            bounds=BOUNDS, airspace=BOX, dt=5.0, rotor=ROTOR)
        assert nxt.x == pytest.approx(100.0 + 30.0 * 5.0)
        assert nxt.y == pytest.approx(100.0)
        assert nxt.z == pytest.approx(s.z)
        assert nxt.theta == pytest.approx(0.0)

    def test_turn_rate_clamped(self):
        s = make_state(x=1000.0, y=1000.0)
        nxt = simulate_step(s, v_cmd=30.0, h_cmd=s.z, dtheta_cmd=math.radians(90.0),
                            bounds=BOUNDS, airspace=BOX, dt=5.0, rotor=ROTOR)
        assert nxt.theta == pytest.approx(math.radians(25.0), abs=1e-12)

    def test_acceleration_rate_limited(self):
        s = make_state(x=500.0, y=500.0, v=20.0)
        nxt = simulate_step(s, v_cmd=60.0, h_cmd=s.z, dtheta_cmd=0.0,
                            bounds=BOUNDS, airspace=BOX, dt=5.0, rotor=ROTOR)
        assert nxt.v == pytest.approx(45.0)

    def test_climb_rate_limited(self):
        s = make_state(x=500.0, y=500.0, z=100.0)
        nxt = simulate_step(s, v_cmd=30.0, h_cmd=450.0, dtheta_cmd=0.0,
                            bounds=BOUNDS, airspace=BOX, dt=5.0, rotor=ROTOR)
        assert nxt.z == pytest.approx(125.0)

    def test_rotor_follows_affine_policy(self):
        s = make_state(x=500.0, y=500.0, v=40.0)
        nxt = simulate_step(s, v_cmd=40.0, h_cmd=s.z, dtheta_cmd=0.0,
                            bounds=BOUNDS, airspace=BOX, dt=5.0, rotor=ROTOR)
        assert nxt.rho == pytest.approx(600.0)

    def test_leaving_airspace_raises(self):
        s = make_state(x=2150.0, y=1000.0, theta=0.0)
        with pytest.raises(OutOfDomainError):
            simulate_step(s, v_cmd=60.0, h_cmd=s.z, dtheta_cmd=0.0,
                          bounds=BOUNDS, airspace=BOX, dt=5.0, rotor=ROTOR)


class TestRotorPolicy:
    def test_endpoints(self):
        assert ROTOR.rho(20.0) == pytest.approx(500.0)
        assert ROTOR.rho(60.0) == pytest.approx(700.0)

    @given(v=st.floats(20.0, 60.0))
    @settings(max_examples=100)
    def test_monotone_in_speed(self, v):
        assert ROTOR.rho(v) <= ROTOR.rho(min(v + 1.0, 60.0)) + 1e-12


class TestOrdinance:
    def test_compliant(self):
        assert ordinance_ok(44.0, 42.0, 45.0, 43.0)

    def test_boundary_is_compliant(self):
        assert ordinance_ok(45.0, 43.0, 45.0, 43.0)

    def test_single_violation_fails(self):
        assert not ordinance_ok(46.0, 30.0, 45.0, 43.0)


@given(a=st.floats(-20.0, 20.0))
@settings(max_examples=200)
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi <= w < math.pi
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_angle_diff_shortest():
    assert angle_diff(math.radians(170.0), math.radians(-170.0)) == pytest.approx(
        math.radians(-20.0), abs=1e-12
    )


class TestZoneFiles:
    def test_roundtrip(self, tmp_path):
        zones = [
            zone_from_dict(
                {"id": "z1", "x": 1000.0, "y": 1100.0, "L_inst": 35.0,
                 "L_eq": 30.0, "dt": 6}
            )
        ]
        box = Airspace(x=(0, 2200), y=(0, 2200), z=(0, 450))
        p = tmp_path / "zones.json"
        save_zones(p, zones, box)
        zs, aspace = load_zones(p)
        assert zs == zones
        assert aspace == box

    def test_missing_key_rejected(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"observers": [{"id": "a", "x": 0, "y": 0}]}')
        with pytest.raises(ConfigError):
            load_zones(p)

    def test_duplicate_ids_rejected(self, tmp_path):
        p = tmp_path / "dup.json"
        obs = '{"id": "a", "x": 0, "y": 0, "L_inst": 40, "L_eq": 38, "dt": 3}'
        p.write_text(
            '{"observers": [%s, %s], "airspace": {"x": [0, 1], "y": [0, 1], "z": [0, 1]}}'
            % (obs, obs)
        )
        with pytest.raises(ConfigError):
            load_zones(p)

    def test_bad_dt_rejected(self):
        with pytest.raises(ConfigError):
            zone_from_dict(
                {"id": "a", "x": 0, "y": 0, "L_inst": 40, "L_eq": 38, "dt": 0}
            )
