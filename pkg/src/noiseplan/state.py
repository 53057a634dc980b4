"""Vehicle state, observer geometry, single-step dynamics, and zone files.

The vehicle state is (v, rho, x, y, z, theta): ground speed, rotor speed,
ENU position, heading. An observer sees the vehicle through the relative
state (v, rho, h, r, phi): the same speed and rotor speed plus vertical
offset, horizontal range, and the heading-relative azimuth of the observer
bearing. All angles are radians, wrapped to [-pi, pi).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

TWO_PI = 2.0 * math.pi


class StateError(Exception):
    pass


class OutOfDomainError(StateError):
    """A simulated step left the airspace box."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    if -math.pi <= a < math.pi:
        # Already in range; the arithmetic below would round angles much
        # smaller than pi away to zero.
        return a
    a = math.fmod(a + math.pi, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    return a - math.pi


def angle_diff(a: float, b: float) -> float:
    """Shortest signed angular difference a - b, in [-pi, pi)."""
    return wrap_angle(a - b)


@dataclass(frozen=True)
class EvtolState:
    v: float
    rho: float
    x: float
    y: float
    z: float
    theta: float


@dataclass(frozen=True)
class Observer:
    id: str
    x: float
    y: float
    z: float = 0.0


@dataclass(frozen=True)
class RelativeState:
    """Vehicle state as seen from an observer."""

    v: float
    rho: float
    h: float
    r: float
    phi: float


@dataclass(frozen=True)
class NoiseZone:
    """Observer plus its ordinance: instantaneous and Leq limits over dt steps."""

    observer: Observer
    l_inst: float
    l_eq: float
    dt: int

    def __post_init__(self):
        if self.dt < 1:
            raise ConfigError(f"zone {self.observer.id}: dt must be >= 1")


@dataclass(frozen=True)
class Airspace:
    """Axis-aligned flight volume."""

    x: tuple[float, float]
    y: tuple[float, float]
    z: tuple[float, float]

    def contains(self, x: float, y: float, z: float) -> bool:
        return (
            self.x[0] <= x <= self.x[1]
            and self.y[0] <= y <= self.y[1]
            and self.z[0] <= z <= self.z[1]
        )


@dataclass(frozen=True)
class ControlBounds:
    """Admissible command envelope and per-second rate limits."""

    v_min: float = 20.0
    v_max: float = 60.0
    h_min: float = 50.0
    h_max: float = 450.0
    dv_max: float = 5.0  # m/s^2
    dh_max: float = 5.0  # m/s vertical rate
    dtheta_max: float = math.radians(5.0)  # rad/s yaw rate


@dataclass(frozen=True)
class RotorPolicy:
    """Affine rotor-speed schedule rho(v) over the speed envelope."""

    rho_min: float = 500.0
    rho_max: float = 700.0
    v_min: float = 20.0
    v_max: float = 60.0

    def rho(self, v: float) -> float:
        if self.v_max == self.v_min:
            return self.rho_min
        frac = (v - self.v_min) / (self.v_max - self.v_min)
        return self.rho_min + (self.rho_max - self.rho_min) * frac


def relative_state(state: EvtolState, observer: Observer) -> RelativeState:
    """Observer-relative state; phi is defined as 0 directly overhead (r=0)."""
    dx = state.x - observer.x
    dy = state.y - observer.y
    h = state.z - observer.z
    r = math.hypot(dx, dy)
    if r == 0.0:
        phi = 0.0
    else:
        phi = wrap_angle(state.theta - math.atan2(dy, dx))
    return RelativeState(v=state.v, rho=state.rho, h=h, r=r, phi=phi)


def kino_dist(a: EvtolState, b: EvtolState) -> float:
    """Position-plus-heading metric used for nearest-neighbor queries.

    sqrt(dx^2 + dy^2 + dz^2 + dtheta^2 / (2*pi)) with the shortest angular
    difference; speed and rotor state do not enter.
    """
    dth = angle_diff(a.theta, b.theta)
    return math.sqrt(
        (a.x - b.x) ** 2
        + (a.y - b.y) ** 2
        + (a.z - b.z) ** 2
        + dth * dth / TWO_PI
    )


def _clamp(value: float, lo: float, hi: float) -> float:
    return lo if value < lo else hi if value > hi else value


def simulate_step(
    state: EvtolState,
    v_cmd: float,
    h_cmd: float,
    dtheta_cmd: float,
    bounds: ControlBounds,
    airspace: Airspace,
    dt: float,
    rotor: RotorPolicy,
) -> EvtolState:
    """Advance one timestep under rate-limited commands.

    Heading turns by dtheta_cmd clamped to the yaw-rate budget, speed and
    altitude slew toward their commands at the acceleration / climb-rate
    limits, position integrates at the new speed along the new heading, and
    rotor speed follows the affine policy. Raises OutOfDomainError if the
    new position leaves the airspace.
    """
    max_turn = bounds.dtheta_max * dt
    theta = wrap_angle(state.theta + _clamp(dtheta_cmd, -max_turn, max_turn))
    dv = _clamp(v_cmd - state.v, -bounds.dv_max * dt, bounds.dv_max * dt)
    v = _clamp(state.v + dv, bounds.v_min, bounds.v_max)
    dz = _clamp(h_cmd - state.z, -bounds.dh_max * dt, bounds.dh_max * dt)
    z = state.z + dz
    x = state.x + v * math.cos(theta) * dt
    y = state.y + v * math.sin(theta) * dt
    if not airspace.contains(x, y, z):
        raise OutOfDomainError(f"step to ({x:.1f}, {y:.1f}, {z:.1f}) exits airspace")
    return EvtolState(v=v, rho=rotor.rho(v), x=x, y=y, z=z, theta=theta)


def ordinance_ok(l_inst: float, l_eq: float, max_inst: float, max_eq: float) -> bool:
    """Non-strict ordinance predicate: both levels at or below their limits."""
    return l_inst <= max_inst and l_eq <= max_eq


# ---------------------------------------------------------------------------
# zone / airspace file format
# ---------------------------------------------------------------------------

def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ConfigError(f"{context}: missing key {key!r}")
    return mapping[key]


def _axis(pair, context: str) -> tuple[float, float]:
    if not isinstance(pair, (list, tuple)) or len(pair) != 2:
        raise ConfigError(f"{context}: expected [lo, hi]")
    lo, hi = float(pair[0]), float(pair[1])
    if not lo < hi:
        raise ConfigError(f"{context}: need lo < hi, got {pair}")
    return lo, hi


def airspace_from_dict(d: dict) -> Airspace:
    return Airspace(
        x=_axis(_require(d, "x", "airspace"), "airspace.x"),
        y=_axis(_require(d, "y", "airspace"), "airspace.y"),
        z=_axis(_require(d, "z", "airspace"), "airspace.z"),
    )


def zone_from_dict(d: dict) -> NoiseZone:
    obs = Observer(
        id=str(_require(d, "id", "observer")),
        x=float(_require(d, "x", "observer")),
        y=float(_require(d, "y", "observer")),
        z=float(d.get("z", 0.0)),
    )
    return NoiseZone(
        observer=obs,
        l_inst=float(_require(d, "L_inst", f"observer {obs.id}")),
        l_eq=float(_require(d, "L_eq", f"observer {obs.id}")),
        dt=int(_require(d, "dt", f"observer {obs.id}")),
    )


def zone_to_dict(z: NoiseZone) -> dict:
    return {
        "id": z.observer.id,
        "x": z.observer.x,
        "y": z.observer.y,
        "z": z.observer.z,
        "L_inst": z.l_inst,
        "L_eq": z.l_eq,
        "dt": z.dt,
    }


def load_zones(path: str | Path) -> tuple[list[NoiseZone], Airspace]:
    """Read a zone file: {"observers": [...], "airspace": {x, y, z}}."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    observers = _require(raw, "observers", str(path))
    if not isinstance(observers, list) or not observers:
        raise ConfigError(f"{path}: 'observers' must be a non-empty list")
    zones = [zone_from_dict(o) for o in observers]
    ids = [z.observer.id for z in zones]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{path}: duplicate observer ids")
    airspace = airspace_from_dict(_require(raw, "airspace", str(path)))
    return zones, airspace


def save_zones(path: str | Path, zones: list[NoiseZone], airspace: Airspace) -> None:
    payload = {
        "observers": [zone_to_dict(z) for z in zones],
        "airspace": {
            "x": list(airspace.x),
            "y": list(airspace.y),
            "z": list(airspace.z),
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
