"""Noise-aware kinodynamic tree planner.

Grows a tree of simulated flight states from a start state toward a goal
region, rejecting any step whose predicted noise footprint would break a
tightened zone threshold and any step that comes too close to already
scheduled traffic. Thresholds are tightened by the certified model error so
that a plan accepted against model predictions also satisfies the original
ordinance under the physical source. Sequential multi-vehicle planning
renews per-zone noise budgets by subtracting the energy already granted to
earlier plans.

Sliding equivalent levels use a global timeline: the window at step t covers
steps max(0, t - dt_w)..t, and steps where a vehicle is not flying count as
silent samples. That convention makes combined multi-vehicle window energy
exactly linear in the per-plan contributions.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from math import fsum
from pathlib import Path

import numpy as np

from ._kernels import nearest_state
from .acoustics import (
    NonPositiveEnergyError,
    db_subtract,
    energy,
    is_silent,
    level_from_energy,
)
from .errors import ConfigError
from .model import CompositeNoiseModel, subseed
from .state import (
    Airspace,
    ControlBounds,
    EvtolState,
    NoiseZone,
    OutOfDomainError,
    RotorPolicy,
    airspace_from_dict,
    angle_diff,
    kino_dist,
    load_zones,
    relative_state,
    simulate_step,
    zone_from_dict,
)

TWO_PI = 2.0 * math.pi

DEFAULT_AIRSPACE = Airspace(x=(0.0, 2200.0), y=(0.0, 2200.0), z=(0.0, 450.0))


class PlannerError(Exception):
    pass


class InfeasibleTighteningError(PlannerError):
    """A zone threshold is too low to survive the certified-error margin."""


class BudgetExhaustedError(PlannerError):
    """A zone's renewed noise budget is gone at some timestep."""

    def __init__(self, zone_id: str, step: int, kind: str):
        self.zone_id = zone_id
        self.step = step
        self.kind = kind
        super().__init__(
            f"zone {zone_id}: {kind} budget exhausted at step {step}"
        )


# ---------------------------------------------------------------------------
# cost weights and planner configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostWeights:
    """Weights of the per-step cost terms.

    A step pays for distance traveled in the tree metric, for flying high,
    accelerating, and climbing (the kinodynamic comfort terms), earns a
    discount for speed, and near the goal pays extra for residual altitude
    and speed so that approaches settle low and slow.
    """

    w_dist: float = 1.0
    w_speed: float = 0.05
    w_kino: float = 0.01
    kino_alt: float = 1.0
    kino_accel: float = 1.0
    kino_climb: float = 1.0
    prox_alt: float = 0.005
    prox_speed: float = 0.01
    prox_radius: float = 300.0

    def __post_init__(self):
        for name in (f.name for f in dataclasses.fields(self)):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0.0:
                raise ConfigError(f"cost weight {name} must be finite and >= 0")


@dataclass(frozen=True)
class PlannerConfig:
    n_iter: int = 3000
    n_atmp: int = 20
    eps_g: float = 50.0
    goal_bias: float = 0.1
    dt: float = 5.0
    collision_radius: float = 100.0
    strategy: str = "uniform"
    rewire_radius: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_iter < 0:
            raise ConfigError("n_iter must be >= 0")
        if self.n_atmp < 1:
            raise ConfigError("n_atmp must be >= 1")
        if self.eps_g < 0.0:
            raise ConfigError("eps_g must be >= 0")
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ConfigError("goal_bias must lie in [0, 1]")
        if self.dt <= 0.0:
            raise ConfigError("dt must be positive")
        if self.collision_radius < 0.0:
            raise ConfigError("collision_radius must be >= 0")
        if self.strategy not in ("uniform", "pruned"):
            raise ConfigError("strategy must be 'uniform' or 'pruned'")
        if self.rewire_radius is not None and self.rewire_radius <= 0.0:
            raise ConfigError("rewire_radius must be positive when set")


@dataclass
class PlanStats:
    """Counters collected during one plan() call."""

    iterations: int = 0
    nodes: int = 0
    steer_attempts: int = 0
    steer_accepts: int = 0
    noise_rejections: int = 0
    collision_rejections: int = 0
    airspace_rejections: int = 0
    pruned_draws: int = 0
    rewire_accepts: int = 0
    goal_nodes: int = 0
    first_goal_iter: int | None = None
    best_cost: float = math.nan

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# zone tightening
# ---------------------------------------------------------------------------


@dataclass
class TightenedZone:
    """A noise zone with planning thresholds lowered by a safety margin.

    ``l_inst`` and ``l_eq`` are the static tightened limits. When budget
    renewal is in play, ``inst_steps`` and ``eq_steps`` hold per-timestep
    limits; lookups past the end of those arrays clamp to the last entry,
    which is safe because earlier traffic has landed by then.
    """

    zone: NoiseZone
    delta: float
    l_inst: float
    l_eq: float
    inst_steps: np.ndarray | None = None
    eq_steps: np.ndarray | None = None

    def inst_at(self, t: int) -> float:
        if self.inst_steps is None:
            return self.l_inst
        return float(self.inst_steps[min(t, len(self.inst_steps) - 1)])

    def eq_at(self, t: int) -> float:
        if self.eq_steps is None:
            return self.l_eq
        return float(self.eq_steps[min(t, len(self.eq_steps) - 1)])


def tighten_zones(zones: list[NoiseZone], delta: float) -> list[TightenedZone]:
    """Tighten thresholds by removing a delta-sized source in energy terms.

    Each limit L becomes the level of energy(L) - energy(delta). A silent
    delta leaves zones unchanged. Raises InfeasibleTighteningError when a
    threshold is at or below the margin, naming the zone.
    """
    out = []
    for zone in zones:
        if is_silent(delta):
            out.append(TightenedZone(zone=zone, delta=delta,
                                     l_inst=zone.l_inst, l_eq=zone.l_eq))
            continue
        try:
            l_inst = db_subtract(zone.l_inst, delta)
            l_eq = db_subtract(zone.l_eq, delta)
        except NonPositiveEnergyError as exc:
            raise InfeasibleTighteningError(
                f"zone {zone.observer.id}: margin {delta:g} dBA leaves no "
                f"energy under limits ({zone.l_inst:g}, {zone.l_eq:g})"
            ) from exc
        out.append(TightenedZone(zone=zone, delta=delta, l_inst=l_inst, l_eq=l_eq))
    return out


def tighten_zones_linear(zones: list[NoiseZone], delta: float) -> list[TightenedZone]:
    """Tighten thresholds by plain level subtraction, L - delta.

    Stronger than the energy form for small margins and always feasible, so
    the planning pipeline uses it by default. A silent delta leaves zones
    unchanged.
    """
    out = []
    for zone in zones:
        if is_silent(delta):
            l_inst, l_eq = zone.l_inst, zone.l_eq
        else:
            l_inst, l_eq = zone.l_inst - delta, zone.l_eq - delta
        out.append(TightenedZone(zone=zone, delta=delta, l_inst=l_inst, l_eq=l_eq))
    return out


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------


def get_cost(
    current: EvtolState,
    candidate: EvtolState,
    goal: EvtolState,
    weights: CostWeights,
    parent_cost: float,
    dt: float,
) -> float:
    """Cumulative path cost of reaching ``candidate`` from ``current``.

    Adds to the parent's cost: the tree-metric step length, the weighted
    comfort terms (altitude held, speed change, climb rate), a speed
    discount, and, within ``prox_radius`` of the goal, an approach penalty
    on remaining altitude and speed scaled by how deep into that radius the
    candidate sits.
    """
    climb_rate = (candidate.z - current.z) / dt
    d_goal = math.dist(
        (candidate.x, candidate.y, candidate.z), (goal.x, goal.y, goal.z)
    )
    step_cost = (
        weights.w_dist * kino_dist(current, candidate)
        + weights.w_kino
        * (
            weights.kino_alt * candidate.z
            + weights.kino_accel * abs(candidate.v - current.v)
            + weights.kino_climb * abs(climb_rate)
        )
        - weights.w_speed * candidate.v
        + max(0.0, weights.prox_radius - d_goal)
        * (weights.prox_alt * candidate.z + weights.prox_speed * candidate.v)
    )
    return parent_cost + step_cost


# ---------------------------------------------------------------------------
# search tree
# ---------------------------------------------------------------------------


class TreeNode:
    """One tree vertex: a state, its lineage, and its noise history.

    ``win`` holds one energy array per zone covering the trailing window of
    global timesteps (length zone.dt + 1, NaN marks steps before step 0).
    """

    __slots__ = ("state", "parent", "cost", "time", "inst", "leq", "win")

    def __init__(self, state, parent, cost, time, inst, leq, win):
        self.state = state
        self.parent = parent
        self.cost = cost
        self.time = time
        self.inst = inst
        self.leq = leq
        self.win = win


def _root_windows(zones: list[TightenedZone], t_start: int,
                  inst_levels) -> tuple[np.ndarray, ...]:
    wins = []
    for tz, level in zip(zones, inst_levels):
        width = tz.zone.dt + 1
        w = np.full(width, np.nan)
        for k in range(width):
            step = t_start - (width - 1 - k)
            if step >= 0:
                w[k] = 0.0
        w[-1] = energy(level)
        wins.append(w)
    return tuple(wins)


def _child_windows(parent_win, inst_levels) -> tuple[np.ndarray, ...]:
    wins = []
    for w, level in zip(parent_win, inst_levels):
        shifted = np.empty_like(w)
        shifted[:-1] = w[1:]
        shifted[-1] = energy(level)
        wins.append(shifted)
    return tuple(wins)


def _window_leqs(wins) -> tuple[float, ...]:
    return tuple(level_from_energy(float(np.nanmean(w))) for w in wins)


def _predict_zone_levels(model: CompositeNoiseModel, state: EvtolState,
                         zones: list[TightenedZone]) -> np.ndarray:
    rels = [relative_state(state, tz.zone.observer) for tz in zones]
    return model.predict_batch(
        np.array([re.v for re in rels]),
        np.array([re.rho for re in rels]),
        np.array([re.h for re in rels]),
        np.array([re.r for re in rels]),
        np.array([re.phi for re in rels]),
    )


def _noise_ok(levels, wins, zones, t: int) -> bool:
    for level, w, tz in zip(levels, wins, zones):
        if level > tz.inst_at(t):
            return False
        if float(np.nanmean(w)) > energy(tz.eq_at(t)):
            return False
    return True


def _dist3(a: EvtolState, b: EvtolState) -> float:
    return math.dist((a.x, a.y, a.z), (b.x, b.y, b.z))


# ---------------------------------------------------------------------------
# collision checks against scheduled traffic
# ---------------------------------------------------------------------------


def _plan_position(plan: "MotionPlan", step: int):
    if step < plan.times[0] or step > plan.times[-1]:
        return None
    s = plan.states[step - plan.times[0]]
    return (s.x, s.y, s.z)


def detect_collision(
    current: EvtolState,
    candidate: EvtolState,
    t: int,
    scheduled,
    radius: float,
) -> bool:
    """True iff stepping current -> candidate over timestep t..t+1 passes
    strictly closer than ``radius`` to any scheduled plan.

    Two probes per plan: the step endpoint against the plan's position at
    t+1, and the segment midpoint against the plan's segment midpoint. A
    plan only participates where it is active; exactly ``radius`` apart is
    still safe.
    """
    if not scheduled:
        return False
    end = (candidate.x, candidate.y, candidate.z)
    mid = (
        0.5 * (current.x + candidate.x),
        0.5 * (current.y + candidate.y),
        0.5 * (current.z + candidate.z),
    )
    for plan in scheduled:
        p_end = _plan_position(plan, t + 1)
        if p_end is not None and math.dist(end, p_end) < radius:
            return True
        p_now = _plan_position(plan, t)
        if p_now is not None and p_end is not None:
            p_mid = tuple(0.5 * (a + b) for a, b in zip(p_now, p_end))
            if math.dist(mid, p_mid) < radius:
                return True
    return False


# ---------------------------------------------------------------------------
# steering
# ---------------------------------------------------------------------------


def steer(
    q_near: TreeNode,
    xi_rand: EvtolState,
    zones: list[TightenedZone],
    model: CompositeNoiseModel,
    weights: CostWeights,
    cfg: PlannerConfig,
    *,
    goal: EvtolState,
    bounds: ControlBounds,
    airspace: Airspace,
    rotor: RotorPolicy,
    rng: np.random.Generator,
    scheduled=(),
    stats: PlanStats | None = None,
) -> TreeNode | None:
    """Try ``cfg.n_atmp`` one-step commands from ``q_near`` and return the
    cheapest admissible outcome, or None if every attempt failed a check.

    The sampled state ``xi_rand`` has already done its job selecting
    ``q_near``; command selection here competes on path cost alone. Commands
    draw uniformly from the speed/altitude/turn box. Under the "pruned"
    strategy every noise failure shrinks the box, capping speed at the
    failed speed command and flooring altitude at the failed altitude
    command, so later attempts steer away from loud regimes. With no noise
    failures both strategies consume identical draws and behave identically.

    The returned node's parent index is left unset for the caller.
    """
    del xi_rand
    if stats is None:
        stats = PlanStats()
    prune = cfg.strategy == "pruned"
    draws = rng.random((cfg.n_atmp, 3))
    v_hi = bounds.v_max
    h_lo = bounds.h_min
    max_turn = bounds.dtheta_max * cfg.dt
    t_new = q_near.time + 1
    best = None
    for u in draws:
        if v_hi < bounds.v_max or h_lo > bounds.h_min:
            stats.pruned_draws += 1
        v_cmd = bounds.v_min + u[0] * (v_hi - bounds.v_min)
        h_cmd = h_lo + u[1] * (bounds.h_max - h_lo)
        dtheta_cmd = -max_turn + u[2] * 2.0 * max_turn
        stats.steer_attempts += 1
        try:
            s_new = simulate_step(
                q_near.state, v_cmd, h_cmd, dtheta_cmd,
                bounds, airspace, cfg.dt, rotor,
            )
        except OutOfDomainError:
            stats.airspace_rejections += 1
            continue
        levels = _predict_zone_levels(model, s_new, zones)
        wins = _child_windows(q_near.win, levels)
        if not _noise_ok(levels, wins, zones, t_new):
            stats.noise_rejections += 1
            if prune:
                v_hi = v_cmd
                h_lo = h_cmd
            continue
        if detect_collision(q_near.state, s_new, q_near.time, scheduled,
                            cfg.collision_radius):
            stats.collision_rejections += 1
            continue
        cost = get_cost(q_near.state, s_new, goal, weights, q_near.cost, cfg.dt)
        if best is None or cost < best.cost:
            best = TreeNode(
                state=s_new, parent=None, cost=cost, time=t_new,
                inst=tuple(float(x) for x in levels),
                leq=_window_leqs(wins), win=wins,
            )
    return best


# ---------------------------------------------------------------------------
# vectorized one-step simulation (rewire fast path)
# ---------------------------------------------------------------------------


def _simulate_batch(state, v_cmds, h_cmds, dtheta_cmds, bounds, airspace,
                    dt, rotor):
    """Array mirror of simulate_step from a single source state.

    Returns (v, z, x, y, theta, rho, ok) where ok flags steps that stay
    inside the airspace instead of raising. Must track the scalar step
    bitwise; tested in lockstep against it.
    """
    v_cmds = np.asarray(v_cmds, dtype=float)
    h_cmds = np.asarray(h_cmds, dtype=float)
    dtheta_cmds = np.asarray(dtheta_cmds, dtype=float)
    max_turn = bounds.dtheta_max * dt
    raw = state.theta + np.clip(dtheta_cmds, -max_turn, max_turn)
    in_range = (raw >= -math.pi) & (raw < math.pi)
    wrapped = np.mod(raw + math.pi, TWO_PI) - math.pi
    theta = np.where(in_range, raw, wrapped)
    dv = np.clip(v_cmds - state.v, -bounds.dv_max * dt, bounds.dv_max * dt)
    v = np.clip(state.v + dv, bounds.v_min, bounds.v_max)
    dz = np.clip(h_cmds - state.z, -bounds.dh_max * dt, bounds.dh_max * dt)
    z = state.z + dz
    x = state.x + v * np.cos(theta) * dt
    y = state.y + v * np.sin(theta) * dt
    ok = (
        (airspace.x[0] <= x) & (x <= airspace.x[1])
        & (airspace.y[0] <= y) & (y <= airspace.y[1])
        & (airspace.z[0] <= z) & (z <= airspace.z[1])
    )
    if rotor.v_max == rotor.v_min:
        rho = np.full_like(v, rotor.rho_min)
    else:
        frac = (v - rotor.v_min) / (rotor.v_max - rotor.v_min)
        rho = rotor.rho_min + (rotor.rho_max - rotor.rho_min) * frac
    return v, z, x, y, theta, rho, ok


# ---------------------------------------------------------------------------
# rewiring
# ---------------------------------------------------------------------------


def _rewire(
    nodes: list[TreeNode],
    coords: tuple[np.ndarray, ...],
    child_count: np.ndarray,
    new_idx: int,
    goal_set: set[int],
    zones: list[TightenedZone],
    model: CompositeNoiseModel,
    weights: CostWeights,
    cfg: PlannerConfig,
    *,
    goal: EvtolState,
    bounds: ControlBounds,
    airspace: Airspace,
    rotor: RotorPolicy,
    rng: np.random.Generator,
    scheduled,
    stats: PlanStats,
) -> None:
    """One rewire pass: try to re-route existing leaves through the new node.

    Draws one fresh command per node from the full command box and simulates
    all of them from the new node in one vectorized step. A leaf is replaced
    in place only when its candidate actually reaches it, landing within the
    goal tolerance of the leaf's own state, and offers a strictly cheaper
    route that passes the noise and collision checks. The reach requirement
    keeps every accepted rewire a re-route to (essentially) the same state:
    without it, cheap shallow candidates far from a leaf would displace the
    search frontier wholesale. Internal nodes and the root keep their
    subtrees intact, so path continuity and stored costs stay consistent.
    """
    q_new = nodes[new_idx]
    n = len(nodes)
    draws = rng.random((n, 3))
    max_turn = bounds.dtheta_max * cfg.dt
    v_cmds = bounds.v_min + draws[:, 0] * (bounds.v_max - bounds.v_min)
    h_cmds = bounds.h_min + draws[:, 1] * (bounds.h_max - bounds.h_min)
    dthetas = -max_turn + draws[:, 2] * 2.0 * max_turn
    v, z, x, y, theta, rho, ok = _simulate_batch(
        q_new.state, v_cmds, h_cmds, dthetas, bounds, airspace, cfg.dt, rotor
    )
    t_new = q_new.time + 1

    cand = np.flatnonzero(ok)
    cand = cand[(cand != 0) & (cand != new_idx)]
    cand = cand[child_count[cand] == 0]
    xs, ys, zs, thetas = coords
    if cfg.rewire_radius is not None and cand.size:
        dth = np.mod(thetas[cand] - q_new.state.theta + math.pi, TWO_PI) - math.pi
        d2 = (
            (xs[cand] - q_new.state.x) ** 2
            + (ys[cand] - q_new.state.y) ** 2
            + (zs[cand] - q_new.state.z) ** 2
            + dth * dth / TWO_PI
        )
        cand = cand[d2 <= cfg.rewire_radius**2]
    if cand.size:
        dth = np.mod(theta[cand] - thetas[cand] + math.pi, TWO_PI) - math.pi
        reach2 = (
            (x[cand] - xs[cand]) ** 2
            + (y[cand] - ys[cand]) ** 2
            + (z[cand] - zs[cand]) ** 2
            + dth * dth / TWO_PI
        )
        cand = cand[reach2 <= cfg.eps_g**2]
    if not cand.size:
        return

    # batched noise screening: predicted instant levels per candidate/zone,
    # then window means rebuilt from the shared parent window
    n_c = cand.size
    inst = np.empty((n_c, len(zones)))
    for zi, tz in enumerate(zones):
        obs = tz.zone.observer
        dx = x[cand] - obs.x
        dy = y[cand] - obs.y
        r = np.hypot(dx, dy)
        phi_raw = theta[cand] - np.arctan2(dy, dx)
        in_range = (phi_raw >= -math.pi) & (phi_raw < math.pi)
        phi = np.where(in_range, phi_raw, np.mod(phi_raw + math.pi, TWO_PI) - math.pi)
        phi = np.where(r == 0.0, 0.0, phi)
        inst[:, zi] = model.predict_batch(v[cand], rho[cand], z[cand] - obs.z, r, phi)

    pass_mask = np.ones(n_c, dtype=bool)
    for zi, tz in enumerate(zones):
        pass_mask &= inst[:, zi] <= tz.inst_at(t_new)
        w = q_new.win[zi]
        base_sum = float(np.nansum(w[1:]))
        base_cnt = int(np.count_nonzero(~np.isnan(w[1:])))
        mean_e = (base_sum + 10.0 ** (inst[:, zi] / 10.0)) / (base_cnt + 1)
        pass_mask &= mean_e <= energy(tz.eq_at(t_new))

    for j in np.flatnonzero(pass_mask):
        k = int(cand[j])
        s_new = EvtolState(
            v=float(v[k]), rho=float(rho[k]), x=float(x[k]), y=float(y[k]),
            z=float(z[k]), theta=float(theta[k]),
        )
        cost = get_cost(q_new.state, s_new, goal, weights, q_new.cost, cfg.dt)
        if cost >= nodes[k].cost:
            continue
        if detect_collision(q_new.state, s_new, q_new.time, scheduled,
                            cfg.collision_radius):
            stats.collision_rejections += 1
            continue
        levels = inst[j]
        wins = _child_windows(q_new.win, levels)
        old_parent = nodes[k].parent
        child_count[old_parent] -= 1
        child_count[new_idx] += 1
        nodes[k] = TreeNode(
            state=s_new, parent=new_idx, cost=cost, time=t_new,
            inst=tuple(float(lv) for lv in levels),
            leq=_window_leqs(wins), win=wins,
        )
        xs[k], ys[k], zs[k], thetas[k] = s_new.x, s_new.y, s_new.z, s_new.theta
        if _dist3(s_new, goal) <= cfg.eps_g:
            goal_set.add(k)
        else:
            goal_set.discard(k)
        stats.rewire_accepts += 1


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------


@dataclass
class MotionPlan:
    """A committed flight: states at consecutive timesteps plus the noise
    levels the planner predicted for each zone along the way."""

    states: list[EvtolState]
    times: list[int]
    inst_traces: dict[str, list[float]]
    leq_traces: dict[str, list[float]]
    cost: float

    @property
    def t_o(self) -> int:
        return self.times[0]

    @property
    def t_f(self) -> int:
        return self.times[-1]


def _extract_plan(nodes: list[TreeNode], idx: int,
                  zones: list[TightenedZone]) -> MotionPlan:
    chain = []
    k = idx
    while k is not None:
        chain.append(nodes[k])
        k = nodes[k].parent
    chain.reverse()
    zone_ids = [tz.zone.observer.id for tz in zones]
    return MotionPlan(
        states=[nd.state for nd in chain],
        times=[nd.time for nd in chain],
        inst_traces={zid: [nd.inst[zi] for nd in chain]
                     for zi, zid in enumerate(zone_ids)},
        leq_traces={zid: [nd.leq[zi] for nd in chain]
                    for zi, zid in enumerate(zone_ids)},
        cost=nodes[idx].cost,
    )


def plan(
    start: EvtolState,
    goal: EvtolState,
    zones: list[TightenedZone],
    model: CompositeNoiseModel,
    weights: CostWeights | None = None,
    cfg: PlannerConfig | None = None,
    *,
    scheduled=(),
    bounds: ControlBounds | None = None,
    airspace: Airspace | None = None,
    rotor: RotorPolicy | None = None,
    t_start: int = 0,
) -> tuple[MotionPlan | None, PlanStats]:
    """Grow a noise-aware tree from ``start`` and return the cheapest plan
    ending within ``cfg.eps_g`` of ``goal``, or None if no admissible path
    was found in ``cfg.n_iter`` iterations.

    The root is checked against the zone thresholds up front; a start state
    that already violates them cannot be planned around, so the call returns
    no plan immediately. A start already inside the goal region returns the
    zero-length plan. One seeded generator drives every random draw, so
    equal inputs give equal plans.
    """
    weights = weights if weights is not None else CostWeights()
    cfg = cfg if cfg is not None else PlannerConfig()
    bounds = bounds if bounds is not None else ControlBounds()
    airspace = airspace if airspace is not None else DEFAULT_AIRSPACE
    rotor = rotor if rotor is not None else RotorPolicy()
    for name, s in (("start", start), ("goal", goal)):
        if not airspace.contains(s.x, s.y, s.z):
            raise ValueError(f"{name} state lies outside the airspace")
    if t_start < 0:
        raise ValueError("t_start must be >= 0")

    stats = PlanStats()
    rng = np.random.default_rng(cfg.seed)

    root_levels = _predict_zone_levels(model, start, zones)
    root_wins = _root_windows(zones, t_start, root_levels)
    root = TreeNode(
        state=start, parent=None, cost=0.0, time=t_start,
        inst=tuple(float(x) for x in root_levels),
        leq=_window_leqs(root_wins), win=root_wins,
    )
    if not _noise_ok(root_levels, root_wins, zones, t_start):
        stats.nodes = 1
        return None, stats

    nodes = [root]
    cap = cfg.n_iter + 1
    xs = np.empty(cap)
    ys = np.empty(cap)
    zs = np.empty(cap)
    thetas = np.empty(cap)
    xs[0], ys[0], zs[0], thetas[0] = start.x, start.y, start.z, start.theta
    child_count = np.zeros(cap, dtype=np.int64)
    coords = (xs, ys, zs, thetas)
    goal_set: set[int] = set()

    if _dist3(start, goal) <= cfg.eps_g:
        stats.nodes = 1
        stats.goal_nodes = 1
        stats.first_goal_iter = 0
        stats.best_cost = 0.0
        return _extract_plan(nodes, 0, zones), stats

    z_lo = max(bounds.h_min, airspace.z[0])
    z_hi = min(bounds.h_max, airspace.z[1])
    for _ in range(cfg.n_iter):
        stats.iterations += 1
        if rng.random() < cfg.goal_bias:
            xi_rand = goal
        else:
            u = rng.random(4)
            xi_rand = EvtolState(
                v=0.0, rho=0.0,
                x=airspace.x[0] + u[0] * (airspace.x[1] - airspace.x[0]),
                y=airspace.y[0] + u[1] * (airspace.y[1] - airspace.y[0]),
                z=z_lo + u[2] * (z_hi - z_lo),
                theta=-math.pi + u[3] * TWO_PI,
            )
        n = len(nodes)
        near_idx = nearest_state(
            xs[:n], ys[:n], zs[:n], thetas[:n],
            xi_rand.x, xi_rand.y, xi_rand.z, xi_rand.theta,
        )
        q_new = steer(
            nodes[near_idx], xi_rand, zones, model, weights, cfg,
            goal=goal, bounds=bounds, airspace=airspace, rotor=rotor,
            rng=rng, scheduled=scheduled, stats=stats,
        )
        if q_new is None:
            continue
        q_new.parent = near_idx
        new_idx = len(nodes)
        nodes.append(q_new)
        xs[new_idx] = q_new.state.x
        ys[new_idx] = q_new.state.y
        zs[new_idx] = q_new.state.z
        thetas[new_idx] = q_new.state.theta
        child_count[near_idx] += 1
        stats.steer_accepts += 1
        if _dist3(q_new.state, goal) <= cfg.eps_g:
            goal_set.add(new_idx)
        _rewire(
            nodes, coords, child_count, new_idx, goal_set, zones, model,
            weights, cfg, goal=goal, bounds=bounds, airspace=airspace,
            rotor=rotor, rng=rng, scheduled=scheduled, stats=stats,
        )
        if goal_set and stats.first_goal_iter is None:
            stats.first_goal_iter = stats.iterations

    stats.nodes = len(nodes)
    stats.goal_nodes = len(goal_set)
    if not goal_set:
        return None, stats
    best = min(goal_set, key=lambda k: nodes[k].cost)
    stats.best_cost = nodes[best].cost
    return _extract_plan(nodes, best, zones), stats


def plan_continuity_ok(
    plan: MotionPlan,
    *,
    bounds: ControlBounds | None = None,
    airspace: Airspace | None = None,
    rotor: RotorPolicy | None = None,
    dt: float = 5.0,
    tol: float = 1e-9,
) -> bool:
    """Check that consecutive plan states are one simulated step apart.

    Re-derives each step's commands from the successor state (speed and
    altitude targets, shortest heading change) and replays them through the
    simulator; every field must match within ``tol`` and timesteps must be
    consecutive.
    """
    bounds = bounds if bounds is not None else ControlBounds()
    airspace = airspace if airspace is not None else DEFAULT_AIRSPACE
    rotor = rotor if rotor is not None else RotorPolicy()
    for k in range(len(plan.states) - 1):
        if plan.times[k + 1] != plan.times[k] + 1:
            return False
        s, s2 = plan.states[k], plan.states[k + 1]
        try:
            sim = simulate_step(
                s, s2.v, s2.z, angle_diff(s2.theta, s.theta),
                bounds, airspace, dt, rotor,
            )
        except OutOfDomainError:
            return False
        if (
            abs(sim.v - s2.v) > tol
            or abs(sim.rho - s2.rho) > tol
            or abs(sim.x - s2.x) > tol
            or abs(sim.y - s2.y) > tol
            or abs(sim.z - s2.z) > tol
            or abs(angle_diff(sim.theta, s2.theta)) > tol
        ):
            return False
    return True


# ---------------------------------------------------------------------------
# audits against the physical source
# ---------------------------------------------------------------------------


def _global_leq_levels(inst_levels: list[float], times: list[int],
                       dt_window: int) -> list[float]:
    """Sliding global-window equivalent levels for one contiguous trace.

    The window at step t spans steps max(0, t - dt_window)..t; steps before
    the trace began count as silent samples.
    """
    energies = [energy(level) for level in inst_levels]
    out = []
    for k, t in enumerate(times):
        width = t - max(0, t - dt_window) + 1
        window = energies[max(0, k - dt_window): k + 1]
        out.append(level_from_energy(fsum(window) / width))
    return out


def audit_plan(plan: MotionPlan, zones: list[NoiseZone], oracle) -> dict:
    """Replay a plan against the physical source and the original, untightened
    thresholds.

    Evaluates the oracle at every state/zone pair (ground ranges beyond the
    oracle's far edge clamp to it; the true level out there is lower, so the
    audit stays conservative), rebuilds the sliding equivalent levels on the
    global timeline, and reports worst margins per zone. ``ok`` is True only
    if every instant and equivalent level respects its original limit.
    """
    r_hi = oracle.domain.r[1]
    report: dict = {"ok": True, "zones": {}}
    for zone in zones:
        rels = [relative_state(s, zone.observer) for s in plan.states]
        inst = [
            float(oracle.eval(re.v, re.rho, re.h, min(re.r, r_hi), re.phi))
            for re in rels
        ]
        leqs = _global_leq_levels(inst, plan.times, zone.dt)
        inst_margin = zone.l_inst - max(inst)
        eq_margin = zone.l_eq - max(leqs)
        ok = inst_margin >= 0.0 and eq_margin >= 0.0
        report["zones"][zone.observer.id] = {
            "inst": inst,
            "leq": leqs,
            "inst_margin": inst_margin,
            "eq_margin": eq_margin,
            "ok": ok,
        }
        report["ok"] = report["ok"] and ok
    return report


def audit_combined(plans: list[MotionPlan], zones: list[NoiseZone],
                   oracle) -> dict:
    """Audit the summed noise of several plans against the original limits.

    Per zone, adds the oracle energies of all active plans at each global
    step, then checks the combined instant level and the combined sliding
    equivalent level. Uses the same conservative far-range clamp as
    audit_plan.
    """
    live = [p for p in plans if p is not None]
    report: dict = {"ok": True, "zones": {}}
    if not live:
        return report
    t_max = max(p.t_f for p in live)
    r_hi = oracle.domain.r[1]
    for zone in zones:
        combined = np.zeros(t_max + 1)
        for p in live:
            for s, t in zip(p.states, p.times):
                re = relative_state(s, zone.observer)
                combined[t] += energy(
                    float(oracle.eval(re.v, re.rho, re.h, min(re.r, r_hi), re.phi))
                )
        inst = [level_from_energy(e) for e in combined]
        leqs = _global_leq_levels(inst, list(range(t_max + 1)), zone.dt)
        inst_margin = zone.l_inst - max(inst)
        eq_margin = zone.l_eq - max(leqs)
        ok = inst_margin >= 0.0 and eq_margin >= 0.0
        report["zones"][zone.observer.id] = {
            "inst": inst,
            "leq": leqs,
            "inst_margin": inst_margin,
            "eq_margin": eq_margin,
            "ok": ok,
        }
        report["ok"] = report["ok"] and ok
    return report


def min_pairwise_separation(plans: list[MotionPlan]) -> float:
    """Smallest 3-D distance between any two plans at a shared timestep.

    Returns inf when no two plans are ever airborne at the same step.
    """
    live = [p for p in plans if p is not None]
    best = math.inf
    for i in range(len(live)):
        for j in range(i + 1, len(live)):
            a, b = live[i], live[j]
            lo = max(a.t_o, b.t_o)
            hi = min(a.t_f, b.t_f)
            for t in range(lo, hi + 1):
                pa = _plan_position(a, t)
                pb = _plan_position(b, t)
                best = min(best, math.dist(pa, pb))
    return best


# ---------------------------------------------------------------------------
# sequential multi-vehicle planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlightRequest:
    id: str
    start: EvtolState
    goal: EvtolState
    t0: int = 0


@dataclass
class MultiPlanResult:
    plans: list[MotionPlan | None]
    stats: list[PlanStats]
    tightened: list[TightenedZone]
    remaining: dict[str, dict[str, np.ndarray]]
    horizon: int


def renewed_thresholds(
    tightened: list[TightenedZone],
    plans: list[MotionPlan],
    horizon: int,
) -> list[TightenedZone]:
    """Per-step thresholds left over after earlier plans spent their share.

    For each zone the tightened limits are converted to energy, the
    predicted energy of every prior plan is subtracted step by step (instant
    levels directly, equivalent levels through the global sliding window,
    which is linear in the per-step energies), and what remains converts
    back to dBA arrays. Raises BudgetExhaustedError at the first step where
    a budget reaches zero or below.
    """
    live = [p for p in plans if p is not None]
    out = []
    for tz in tightened:
        zid = tz.zone.observer.id
        dtw = tz.zone.dt
        inst_prior = np.zeros(horizon)
        for p in live:
            trace = p.inst_traces[zid]
            for level, t in zip(trace, p.times):
                if t < horizon:
                    inst_prior[t] += energy(level)
        csum = np.concatenate(([0.0], np.cumsum(inst_prior)))
        t_arr = np.arange(horizon)
        lo = np.maximum(0, t_arr - dtw)
        eq_prior = (csum[t_arr + 1] - csum[lo]) / (t_arr - lo + 1)

        inst_left = energy(tz.l_inst) - inst_prior
        eq_left = energy(tz.l_eq) - eq_prior
        for kind, left in (("inst", inst_left), ("eq", eq_left)):
            bad = np.flatnonzero(left <= 0.0)
            if bad.size:
                raise BudgetExhaustedError(zid, int(bad[0]), kind)
        out.append(
            TightenedZone(
                zone=tz.zone, delta=tz.delta, l_inst=tz.l_inst, l_eq=tz.l_eq,
                inst_steps=10.0 * np.log10(inst_left),
                eq_steps=10.0 * np.log10(eq_left),
            )
        )
    return out


def plan_multi(
    requests: list[FlightRequest],
    zones: list[NoiseZone],
    model: CompositeNoiseModel,
    weights: CostWeights | None = None,
    cfg: PlannerConfig | None = None,
    *,
    bounds: ControlBounds | None = None,
    airspace: Airspace | None = None,
    rotor: RotorPolicy | None = None,
    tighten: str = "linear",
) -> MultiPlanResult:
    """Plan several flights first-come-first-served under shared noise budgets.

    Zones are tightened once by the model's certified error (level
    subtraction by default, energy subtraction with ``tighten="energy"``).
    Each request then plans against thresholds renewed by subtracting the
    predicted energy of all earlier plans, and against those plans as
    traffic for collision checks. A request that finds no path yields None
    in the result and spends no budget. Every request draws from its own
    generator seeded from cfg.seed and the request id.
    """
    weights = weights if weights is not None else CostWeights()
    cfg = cfg if cfg is not None else PlannerConfig()
    if tighten == "linear":
        tightened = tighten_zones_linear(zones, model.delta)
    elif tighten == "energy":
        tightened = tighten_zones(zones, model.delta)
    else:
        raise ConfigError("tighten must be 'linear' or 'energy'")

    max_dtw = max((z.dt for z in zones), default=0)
    plans: list[MotionPlan | None] = []
    all_stats: list[PlanStats] = []
    for i, req in enumerate(requests):
        horizon = max(
            [p.t_f for p in plans if p is not None] + [req.t0]
        ) + max_dtw + 2
        renewed = renewed_thresholds(tightened, plans, horizon)
        req_cfg = dataclasses.replace(
            cfg, seed=subseed(cfg.seed, f"request:{i}:{req.id}")
        )
        p, st = plan(
            req.start, req.goal, renewed, model, weights, req_cfg,
            scheduled=[q for q in plans if q is not None],
            bounds=bounds, airspace=airspace, rotor=rotor, t_start=req.t0,
        )
        plans.append(p)
        all_stats.append(st)

    horizon = max(
        [p.t_f for p in plans if p is not None] + [r.t0 for r in requests] + [0]
    ) + max_dtw + 2
    remaining: dict[str, dict[str, np.ndarray]] = {}
    final = renewed_thresholds(tightened, plans, horizon)
    for tz in final:
        remaining[tz.zone.observer.id] = {
            "inst": 10.0 ** (tz.inst_steps / 10.0),
            "eq": 10.0 ** (tz.eq_steps / 10.0),
        }
    return MultiPlanResult(
        plans=plans, stats=all_stats, tightened=tightened,
        remaining=remaining, horizon=horizon,
    )


# ---------------------------------------------------------------------------
# scenario and plan file formats
# ---------------------------------------------------------------------------


def _dataclass_from_dict(cls, data: dict, context: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{context}: {exc}") from exc


def state_from_dict(d: dict, rotor: RotorPolicy | None = None) -> EvtolState:
    """Build a state from a JSON object; rho defaults to the rotor policy."""
    try:
        v = float(d["v"])
        rho = float(d["rho"]) if "rho" in d else (rotor or RotorPolicy()).rho(v)
        return EvtolState(
            v=v, rho=rho, x=float(d["x"]), y=float(d["y"]),
            z=float(d["z"]), theta=float(d.get("theta", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed state object: {exc}") from exc


def state_to_dict(s: EvtolState) -> dict:
    return {"v": s.v, "rho": s.rho, "x": s.x, "y": s.y, "z": s.z,
            "theta": s.theta}


@dataclass
class Scenario:
    """Everything one planning run needs, as loaded from a scenario file."""

    zones: list[NoiseZone]
    airspace: Airspace
    start: EvtolState | None
    goal: EvtolState | None
    requests: list[FlightRequest]
    weights: CostWeights
    cfg: PlannerConfig
    bounds: ControlBounds
    rotor: RotorPolicy


def scenario_from_dict(data: dict, base_dir: str | Path | None = None) -> Scenario:
    if not isinstance(data, dict):
        raise ConfigError("scenario file must hold a JSON object")
    rotor = _dataclass_from_dict(RotorPolicy, data.get("rotor", {}), "rotor")
    bounds = _dataclass_from_dict(ControlBounds, data.get("bounds", {}), "bounds")
    weights = _dataclass_from_dict(CostWeights, data.get("weights", {}), "weights")
    cfg_d = dict(data.get("config", {}))
    if "rewire_radius" in cfg_d and cfg_d["rewire_radius"] is not None:
        cfg_d["rewire_radius"] = float(cfg_d["rewire_radius"])
    cfg = _dataclass_from_dict(PlannerConfig, cfg_d, "config")

    if "zones_file" in data:
        ref = Path(data["zones_file"])
        if not ref.is_absolute() and base_dir is not None:
            ref = Path(base_dir) / ref
        zones, airspace = load_zones(ref)
    elif "zones" in data:
        zones = [zone_from_dict(z) for z in data["zones"]]
        airspace = (
            airspace_from_dict(data["airspace"])
            if "airspace" in data else DEFAULT_AIRSPACE
        )
    else:
        raise ConfigError("scenario needs either 'zones' or 'zones_file'")

    start = state_from_dict(data["start"], rotor) if "start" in data else None
    goal = state_from_dict(data["goal"], rotor) if "goal" in data else None
    requests = []
    for i, rd in enumerate(data.get("requests", [])):
        if "start" not in rd or "goal" not in rd:
            raise ConfigError(f"request {i}: needs 'start' and 'goal'")
        requests.append(
            FlightRequest(
                id=str(rd.get("id", f"flight-{i}")),
                start=state_from_dict(rd["start"], rotor),
                goal=state_from_dict(rd["goal"], rotor),
                t0=int(rd.get("t0", 0)),
            )
        )
    return Scenario(
        zones=zones, airspace=airspace, start=start, goal=goal,
        requests=requests, weights=weights, cfg=cfg, bounds=bounds,
        rotor=rotor,
    )


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return scenario_from_dict(data, base_dir=path.parent)


def plan_to_dict(plan: MotionPlan, stats: PlanStats | None = None) -> dict:
    out = {
        "states": [state_to_dict(s) for s in plan.states],
        "times": list(plan.times),
        "inst": {zid: list(tr) for zid, tr in plan.inst_traces.items()},
        "leq": {zid: list(tr) for zid, tr in plan.leq_traces.items()},
        "cost": plan.cost,
    }
    if stats is not None:
        out["stats"] = stats.to_dict()
    return out


def plan_from_dict(data: dict) -> MotionPlan:
    try:
        return MotionPlan(
            states=[state_from_dict(s) for s in data["states"]],
            times=[int(t) for t in data["times"]],
            inst_traces={k: [float(x) for x in v]
                         for k, v in data["inst"].items()},
            leq_traces={k: [float(x) for x in v]
                        for k, v in data["leq"].items()},
            cost=float(data["cost"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed plan data: {exc}") from exc


def save_plan(path: str | Path, plan: MotionPlan,
              stats: PlanStats | None = None) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan, stats), indent=2))


def load_plan(path: str | Path) -> MotionPlan:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return plan_from_dict(data)


def save_plan_traces_csv(path: str | Path, plan: MotionPlan) -> None:
    """Write the flight trace as CSV: one row per timestep with the state
    and the per-zone predicted levels, nine significant digits."""
    zone_ids = list(plan.inst_traces)
    header = ["t", "x", "y", "z", "v", "rho", "theta"]
    header += [f"inst_{zid}" for zid in zone_ids]
    header += [f"leq_{zid}" for zid in zone_ids]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k, (s, t) in enumerate(zip(plan.states, plan.times)):
            row = [t, s.x, s.y, s.z, s.v, s.rho, s.theta]
            row += [plan.inst_traces[zid][k] for zid in zone_ids]
            row += [plan.leq_traces[zid][k] for zid in zone_ids]
            writer.writerow(
                [row[0]] + [f"{val:.9g}" for val in row[1:]]
            )
