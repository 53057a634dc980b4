"""Azimuthal sector partitioning.

Splits [-pi, pi) into half-open sectors inside which the oracle's noise level,
evaluated under worst-case flight conditions, varies by at most mu_phi. The
sweep walks the circle in fixed angular increments and closes a sector the
first time the level drifts more than mu_phi away from the sector's starting
level. Sectors are stored sorted by lower bound; indices follow sweep order,
which starts at 0 rad so the sector containing 0 is always index 1.

The sweep runs the circle as two half-turns, [0, pi) and [-pi, 0), so that no
stored sector straddles the -pi/pi seam. If the full circle produces no
natural closure at all, the result collapses to a single sector covering
[-pi, pi).
"""

from __future__ import annotations

import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .state import wrap_angle


class PartitionError(Exception):
    """Base class for partitioning failures."""


class StepTooCoarseError(PartitionError):
    """A single sweep step jumped more than twice the variation budget."""


@dataclass(frozen=True)
class AzimuthSector:
    """Half-open azimuth range [lo, hi) with a representative angle.

    Parameters
    ----------
    m : int
        Sector index, 1-based, assigned in sweep order.
    lo, hi : float
        Bounds in radians, lo < hi, both within [-pi, pi].
    rep : float
        Representative angle used when a single azimuth must stand in for
        the whole sector; the midpoint by construction.
    """

    m: int
    lo: float
    hi: float
    rep: float

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"sector index must be >= 1, got {self.m}")
        if not self.lo < self.hi:
            raise ValueError(f"empty sector range [{self.lo}, {self.hi})")
        if not (self.lo <= self.rep < self.hi):
            raise ValueError(
                f"representative {self.rep} outside [{self.lo}, {self.hi})"
            )

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, phi: float) -> bool:
        return self.lo <= phi < self.hi


@dataclass(frozen=True)
class Partition:
    """Ordered, disjoint sectors covering [-pi, pi) exactly."""

    sectors: tuple[AzimuthSector, ...]
    mu_phi: float
    _los: tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mu_phi <= 0.0:
            raise ValueError(f"mu_phi must be positive, got {self.mu_phi}")
        if not self.sectors:
            raise ValueError("partition needs at least one sector")
        secs = tuple(sorted(self.sectors, key=lambda s: s.lo))
        if secs[0].lo != -math.pi or secs[-1].hi != math.pi:
            raise ValueError("sectors must span exactly [-pi, pi)")
        for a, b in zip(secs, secs[1:]):
            if a.hi != b.lo:
                raise ValueError(
                    f"gap or overlap between sectors at {a.hi} vs {b.lo}"
                )
        object.__setattr__(self, "sectors", secs)
        object.__setattr__(self, "_los", tuple(s.lo for s in secs))

    def __len__(self) -> int:
        return len(self.sectors)

    def by_index(self, m: int) -> AzimuthSector:
        for s in self.sectors:
            if s.m == m:
                return s
        raise KeyError(f"no sector with index {m}")


def sector_of(partition: Partition, phi: float) -> AzimuthSector:
    """Return the unique sector containing phi (wrapped into [-pi, pi)).

    Half-open ranges make boundaries unambiguous: an angle equal to one
    sector's upper bound belongs to the next sector.
    """
    phi = wrap_angle(phi)
    idx = bisect_right(partition._los, phi) - 1
    return partition.sectors[idx]


def _probe_condition(oracle) -> tuple[float, float, float, float]:
    """Loudest steady condition: fastest, highest-RPM, lowest, closest."""
    d = oracle.domain
    r = d.r[0] if d.r[0] > 0.0 else min(1.0, d.r[1])
    return (d.v[1], d.rho[1], d.h[0], r)


def partition_azimuth(
    oracle,
    mu_phi: float,
    dphi_step: float = math.radians(0.1),
    worst: tuple[float, float, float, float] | None = None,
) -> Partition:
    """Sweep the circle and close sectors whenever the level drifts > mu_phi.

    Parameters
    ----------
    oracle : NoiseOracle
        Evaluated at fixed worst-case (v, rho, h, r) while phi sweeps.
    mu_phi : float
        Per-sector variation budget in dBA.
    dphi_step : float
        Sweep increment in radians. Default 0.1 degree.
    worst : tuple, optional
        Override the probe condition (v, rho, h, r). Defaults to the loudest
        corner of the oracle domain with the smallest positive range.

    Raises
    ------
    StepTooCoarseError
        If a sector one step wide still varies by more than 2 * mu_phi.
    """
    if mu_phi <= 0.0:
        raise ValueError(f"mu_phi must be positive, got {mu_phi}")
    if dphi_step <= 0.0:
        raise ValueError(f"dphi_step must be positive, got {dphi_step}")
    v, rho, h, r = worst if worst is not None else _probe_condition(oracle)

    def _sweep_half(lo: float, hi: float) -> tuple[list[tuple[float, float]], bool]:
        """Close sectors over [lo, hi); returns (bounds, any natural closure)."""
        n_steps = max(1, math.ceil((hi - lo) / dphi_step))
        grid = lo + dphi_step * np.arange(n_steps)
        grid = grid[grid < hi]
        levels = oracle.eval_batch(
            np.full(grid.size, v), np.full(grid.size, rho),
            np.full(grid.size, h), np.full(grid.size, r), grid,
        )
        bounds: list[tuple[float, float]] = []
        start_i = 0
        natural = False
        for i in range(1, grid.size):
            gap = abs(levels[i] - levels[start_i])
            if gap > mu_phi:
                if i - start_i == 1 and gap > 2.0 * mu_phi:
                    raise StepTooCoarseError(
                        f"one step of {dphi_step} rad varies by {gap:.3f} dBA, "
                        f"more than twice the budget {mu_phi}"
                    )
                bounds.append((float(grid[start_i]), float(grid[i])))
                start_i = i
                natural = True
        bounds.append((float(grid[start_i]), hi))
        return bounds, natural

    pos, nat_pos = _sweep_half(0.0, math.pi)
    neg, nat_neg = _sweep_half(-math.pi, 0.0)
    if not (nat_pos or nat_neg):
        only = AzimuthSector(m=1, lo=-math.pi, hi=math.pi, rep=0.0)
        return Partition(sectors=(only,), mu_phi=mu_phi)

    sectors = []
    for m, (lo, hi) in enumerate(pos + neg, start=1):
        sectors.append(AzimuthSector(m=m, lo=lo, hi=hi, rep=0.5 * (lo + hi)))
    return Partition(sectors=tuple(sectors), mu_phi=mu_phi)


def partition_to_dict(partition: Partition) -> dict:
    return {
        "mu_phi": partition.mu_phi,
        "sectors": [
            {
                "m": s.m,
                "lo_deg": math.degrees(s.lo),
                "hi_deg": math.degrees(s.hi),
                "rep_deg": math.degrees(s.rep),
            }
            for s in partition.sectors
        ],
    }


def partition_from_dict(data: dict) -> Partition:
    try:
        mu_phi = float(data["mu_phi"])
        raw = list(data["sectors"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed partition data: {exc}") from exc
    if not raw:
        raise ConfigError("partition has no sectors")
    try:
        rows = sorted(
            (
                (int(s["m"]), math.radians(float(s["lo_deg"])),
                 math.radians(float(s["hi_deg"])),
                 math.radians(float(s["rep_deg"])))
                for s in raw
            ),
            key=lambda t: t[1],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed sector entry: {exc}") from exc

    # Degree round-trips wobble in the last bits; snap the chain back to an
    # exact cover but refuse genuine gaps.
    tol = 1e-9
    if abs(rows[0][1] + math.pi) > tol or abs(rows[-1][2] - math.pi) > tol:
        raise ConfigError("sectors do not span [-180, 180) degrees")
    sectors = []
    lo = -math.pi
    for i, (m, _, hi, rep) in enumerate(rows):
        if i + 1 < len(rows):
            nxt = rows[i + 1][1]
            if abs(hi - nxt) > tol:
                raise ConfigError(f"gap or overlap near {math.degrees(hi):.6f} deg")
            hi = nxt
        else:
            hi = math.pi
        rep = min(max(rep, lo), math.nextafter(hi, lo))
        try:
            sectors.append(AzimuthSector(m=m, lo=lo, hi=hi, rep=rep))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        lo = hi
    try:
        return Partition(sectors=tuple(sectors), mu_phi=mu_phi)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def save_partition(path, partition: Partition) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(partition_to_dict(partition), f, indent=2, sort_keys=True)
        f.write("\n")


def load_partition(path) -> Partition:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read partition file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("partition file must hold a JSON object")
    return partition_from_dict(data)
