"""Dataset construction: adaptive hypercube sampling and uniform lattices.

active_sample runs a breadth-first subdivision of the (v, rho, h) box at a
fixed range and azimuth: each dequeued cube is judged by the level gap between
its two antipodal corners in the monotone order, accepted when the gap is
within mu_act, split into eight children otherwise. Because the oracle is
monotone (increasing in v and rho, decreasing in h and r), that corner gap
bounds the true variation everywhere inside the cube.

lattice_dataset builds the uniform baseline: every pair of antipodal corners
over a fixed grid of levels per axis, crossed with the azimuth sectors.
refine_lattice doubles the (v, rho, h) resolution until every cell meets a
target gap, which serves as the like-for-like cost comparator for the
adaptive strategy.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .state import RelativeState


class SamplingError(Exception):
    """Base class for dataset-construction failures."""


class RefinementFailedError(SamplingError):
    """Lattice refinement hit its round cap before meeting the gap target."""


class ThresholdUnreachable(UserWarning):
    """A minimum-size cube still exceeds the gap budget; accepted flagged."""


# Children of a split, ordered by subdivision-index sum then lexicographic.
_CHILD_ORDER = (
    (0, 0, 0),
    (0, 0, 1), (0, 1, 0), (1, 0, 0),
    (0, 1, 1), (1, 0, 1), (1, 1, 0),
    (1, 1, 1),
)

DEFAULT_MIN_EDGE = (1.0, 10.0, 5.0)


@dataclass(frozen=True)
class Hypercube:
    """Axis-aligned box over (v, rho, h) at one fixed range and azimuth.

    The monotone order inverts altitude: the corner with the highest level
    is (v_hi, rho_hi, h_lo) and the lowest is (v_lo, rho_lo, h_hi).
    """

    v: tuple[float, float]
    rho: tuple[float, float]
    h: tuple[float, float]
    r: float
    phi: float

    def __post_init__(self):
        for name, (lo, hi) in (("v", self.v), ("rho", self.rho), ("h", self.h)):
            if not lo <= hi:
                raise ValueError(f"{name} range [{lo}, {hi}] is inverted")

    @property
    def max_corner(self) -> tuple[float, float, float]:
        return (self.v[1], self.rho[1], self.h[0])

    @property
    def min_corner(self) -> tuple[float, float, float]:
        return (self.v[0], self.rho[0], self.h[1])

    @property
    def edges(self) -> tuple[float, float, float]:
        return (
            self.v[1] - self.v[0],
            self.rho[1] - self.rho[0],
            self.h[1] - self.h[0],
        )

    def contains(self, v: float, rho: float, h: float) -> bool:
        return (
            self.v[0] <= v <= self.v[1]
            and self.rho[0] <= rho <= self.rho[1]
            and self.h[0] <= h <= self.h[1]
        )

    def split(self) -> tuple["Hypercube", ...]:
        """Eight children at the per-axis midpoints, in ranked order."""
        mv = 0.5 * (self.v[0] + self.v[1])
        mr = 0.5 * (self.rho[0] + self.rho[1])
        mh = 0.5 * (self.h[0] + self.h[1])
        v_halves = ((self.v[0], mv), (mv, self.v[1]))
        rho_halves = ((self.rho[0], mr), (mr, self.rho[1]))
        h_halves = ((self.h[0], mh), (mh, self.h[1]))
        return tuple(
            Hypercube(
                v=v_halves[j], rho=rho_halves[k], h=h_halves[l],
                r=self.r, phi=self.phi,
            )
            for j, k, l in _CHILD_ORDER
        )


@dataclass(frozen=True)
class Cell:
    """4-D lattice cell: ranges on (v, rho, h, r) at one sector azimuth.

    The r range may be degenerate (single slice). Altitude and range are
    inverted in the monotone order, mirroring Hypercube.
    """

    v: tuple[float, float]
    rho: tuple[float, float]
    h: tuple[float, float]
    r: tuple[float, float]
    m: int
    phi: float

    @property
    def max_corner(self) -> tuple[float, float, float, float]:
        return (self.v[1], self.rho[1], self.h[0], self.r[0])

    @property
    def min_corner(self) -> tuple[float, float, float, float]:
        return (self.v[0], self.rho[0], self.h[1], self.r[1])


@dataclass(frozen=True)
class CubeRecord:
    """An accepted cube (or cell) with its corner levels."""

    cube: object
    l_min: float
    l_max: float
    flagged: bool = False

    @property
    def gap(self) -> float:
        return self.l_max - self.l_min


@dataclass
class CertifiedDataset:
    """Samples plus the accepted cubes that vouch for their coverage."""

    samples: list[tuple[RelativeState, float]]
    records: list[CubeRecord]
    mu_act: float
    oracle_evals: int
    corner_requests: int = 0

    @property
    def accepted_cubes(self) -> list:
        return [rec.cube for rec in self.records]

    @property
    def flagged_count(self) -> int:
        return sum(1 for rec in self.records if rec.flagged)

    def merge(self, other: "CertifiedDataset") -> "CertifiedDataset":
        """Pool two datasets; duplicate sample states are kept once."""
        seen = set()
        samples = []
        for state, level in self.samples + other.samples:
            key = (state.v, state.rho, state.h, state.r, state.phi)
            if key not in seen:
                seen.add(key)
                samples.append((state, level))
        return CertifiedDataset(
            samples=samples,
            records=self.records + other.records,
            mu_act=max(self.mu_act, other.mu_act),
            oracle_evals=self.oracle_evals + other.oracle_evals,
            corner_requests=self.corner_requests + other.corner_requests,
        )


def corner_cache_key(
    v: float, rho: float, h: float,
    bounds: tuple[tuple[float, float], ...],
) -> tuple[int, int, int]:
    """Quantized per-axis offsets so shared corners hash identically.

    Each coordinate becomes its offset from the root lower bound in units
    of one millionth of the axis span; midpoint arithmetic keeps corners
    exactly on that grid, and anything closer than half a quantum collides
    deliberately.
    """
    key = []
    for x, (lo, hi) in zip((v, rho, h), bounds):
        span = hi - lo
        key.append(round((x - lo) / span * 1e6) if span > 0.0 else 0)
    return tuple(key)


def active_sample(
    bounds: tuple[tuple[float, float], ...],
    r: float,
    phi: float,
    oracle,
    mu_act: float,
    min_edge: tuple[float, float, float] = DEFAULT_MIN_EDGE,
) -> CertifiedDataset:
    """Breadth-first adaptive subdivision of the (v, rho, h) box.

    Parameters
    ----------
    bounds : three (lo, hi) pairs
        Root box over v, rho, h. Must be non-degenerate.
    r, phi : float
        Fixed range and azimuth for every evaluation.
    oracle : NoiseOracle
        Monotone source of truth.
    mu_act : float
        Corner-gap acceptance budget in dBA.
    min_edge : three floats
        Per-axis edge floors. A violating cube whose edges are all at or
        below the floor is accepted flagged (a ThresholdUnreachable warning
        reports it) instead of splitting forever.

    Returns
    -------
    CertifiedDataset
        Unique corner samples sorted by (v, rho, h), acceptance records in
        queue order, and the number of oracle evaluations spent.
    """
    if mu_act <= 0.0:
        raise ValueError(f"mu_act must be positive, got {mu_act}")
    if len(bounds) != 3 or len(min_edge) != 3:
        raise ValueError("bounds and min_edge must cover the three axes")
    for name, (lo, hi) in zip(("v", "rho", "h"), bounds):
        if not lo < hi:
            raise ValueError(f"degenerate {name} range [{lo}, {hi}]")
    if any(e <= 0.0 for e in min_edge):
        raise ValueError("min_edge entries must be positive")

    cache: dict[tuple[int, int, int], tuple[RelativeState, float]] = {}
    evals = 0
    requests = 0

    def corner(v: float, rho: float, h: float) -> float:
        nonlocal evals, requests
        requests += 1
        key = corner_cache_key(v, rho, h, bounds)
        hit = cache.get(key)
        if hit is None:
            level = oracle.eval(v, rho, h, r, phi)
            evals += 1
            cache[key] = (RelativeState(v=v, rho=rho, h=h, r=r, phi=phi), level)
            return level
        return hit[1]

    root = Hypercube(v=bounds[0], rho=bounds[1], h=bounds[2], r=r, phi=phi)
    queue = deque([root])
    records: list[CubeRecord] = []
    while queue:
        cube = queue.popleft()
        l_max = corner(*cube.max_corner)
        l_min = corner(*cube.min_corner)
        gap = l_max - l_min
        if gap <= mu_act:
            records.append(CubeRecord(cube=cube, l_min=l_min, l_max=l_max))
            continue
        at_floor = all(e <= f + 1e-12 for e, f in zip(cube.edges, min_edge))
        if at_floor:
            warnings.warn(
                ThresholdUnreachable(
                    f"cube v={list(cube.v)} rho={list(cube.rho)} "
                    f"h={list(cube.h)} r={cube.r:g} phi={cube.phi:.4f} "
                    f"at the edge floor still varies by {gap:.3f} dBA "
                    f"(budget {mu_act}); accepting flagged"
                )
            )
            records.append(
                CubeRecord(cube=cube, l_min=l_min, l_max=l_max, flagged=True)
            )
            continue
        queue.extend(cube.split())

    samples = sorted(cache.values(), key=lambda sl: (sl[0].v, sl[0].rho, sl[0].h))
    return CertifiedDataset(
        samples=list(samples),
        records=records,
        mu_act=mu_act,
        oracle_evals=evals,
        corner_requests=requests,
    )


def _cell_pairs(levels: np.ndarray) -> list[tuple[float, float]]:
    if levels.size == 1:
        return [(float(levels[0]), float(levels[0]))]
    return [
        (float(levels[i]), float(levels[i + 1])) for i in range(levels.size - 1)
    ]


def lattice_dataset(
    v_levels, rho_levels, h_levels, r_levels, partition, oracle,
    mu_act: float = math.inf,
) -> CertifiedDataset:
    """All antipodal corner pairs over a fixed grid, per azimuth sector.

    Every cell spans adjacent levels on each axis (a single r level pins
    that axis instead). Corner states shared between neighboring cells are
    evaluated once. mu_act is carried through for bookkeeping; the lattice
    itself applies no acceptance test.
    """
    axes = []
    for name, levels in (
        ("v", v_levels), ("rho", rho_levels), ("h", h_levels), ("r", r_levels),
    ):
        arr = np.asarray(sorted(set(float(x) for x in np.ravel(levels))))
        if arr.size == 0:
            raise ValueError(f"no {name} levels given")
        if name != "r" and arr.size < 2:
            raise ValueError(f"axis {name} needs at least 2 levels")
        axes.append(arr)
    v_arr, rho_arr, h_arr, r_arr = axes

    cells = [
        Cell(v=vp, rho=rp, h=hp, r=rr, m=sector.m, phi=sector.rep)
        for sector in partition.sectors
        for vp in _cell_pairs(v_arr)
        for rp in _cell_pairs(rho_arr)
        for hp in _cell_pairs(h_arr)
        for rr in _cell_pairs(r_arr)
    ]

    # Deduplicate corner states, then evaluate the unique ones in one batch.
    unique: dict[tuple, int] = {}
    points = []
    for cell in cells:
        for corner in (cell.max_corner, cell.min_corner):
            key = corner + (cell.phi,)
            if key not in unique:
                unique[key] = len(points)
                points.append(key)
    pts = np.array(points)
    levels = oracle.eval_batch(pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3], pts[:, 4])

    records = []
    for cell in cells:
        l_max = float(levels[unique[cell.max_corner + (cell.phi,)]])
        l_min = float(levels[unique[cell.min_corner + (cell.phi,)]])
        records.append(CubeRecord(cube=cell, l_min=l_min, l_max=l_max))

    samples = [
        (RelativeState(v=p[0], rho=p[1], h=p[2], r=p[3], phi=p[4]), float(lv))
        for p, lv in zip(points, levels)
    ]
    samples.sort(key=lambda sl: (sl[0].phi, sl[0].r, sl[0].v, sl[0].rho, sl[0].h))
    return CertifiedDataset(
        samples=samples,
        records=records,
        mu_act=mu_act,
        oracle_evals=len(points),
        corner_requests=2 * len(cells),
    )


def pair_count(n_v: int, n_rho: int, n_h: int, n_r: int, n_sectors: int) -> int:
    """Closed-form number of lattice cells for given level counts."""
    r_cells = max(1, n_r - 1)
    return (n_v - 1) * (n_rho - 1) * (n_h - 1) * r_cells * n_sectors


def _midpoint_refine(levels: np.ndarray, geometric: bool = False) -> np.ndarray:
    if geometric:
        los, his = levels[:-1], levels[1:]
        mids = np.where(los > 0.0, np.sqrt(los * his), 0.5 * (los + his))
    else:
        mids = 0.5 * (levels[:-1] + levels[1:])
    return np.sort(np.concatenate([levels, mids]))


def refine_lattice(
    v_levels, rho_levels, h_levels, r_levels, partition, oracle,
    mu_act: float, max_rounds: int = 12, max_cells: int = 2_000_000,
) -> tuple[CertifiedDataset, dict]:
    """Double every axis's resolution until all cell gaps are within mu_act.

    v, rho and h get arithmetic midpoints; r gets geometric ones, matching
    its logarithmic effect on the level through the slant range. Returns the
    final dataset and the level arrays that achieved the target.

    Raises
    ------
    RefinementFailedError
        If max_rounds doublings still leave a violating cell, or the next
        round would exceed max_cells cells. Start from grids shaped to the
        oracle (log-spaced r, enough levels per axis) to converge quickly.
    """
    arrs = {
        "v": np.asarray(v_levels, dtype=float),
        "rho": np.asarray(rho_levels, dtype=float),
        "h": np.asarray(h_levels, dtype=float),
        "r": np.asarray(r_levels, dtype=float),
    }
    for _ in range(max_rounds + 1):
        n_cells = pair_count(
            arrs["v"].size, arrs["rho"].size, arrs["h"].size, arrs["r"].size,
            len(partition),
        )
        if n_cells > max_cells:
            raise RefinementFailedError(
                f"refinement would need {n_cells} cells (cap {max_cells}); "
                "start from a finer or better-shaped grid"
            )
        ds = lattice_dataset(
            arrs["v"], arrs["rho"], arrs["h"], arrs["r"], partition, oracle,
            mu_act=mu_act,
        )
        worst = max(rec.gap for rec in ds.records)
        if worst <= mu_act:
            return ds, {name: arr.tolist() for name, arr in arrs.items()}
        arrs["v"] = _midpoint_refine(arrs["v"])
        arrs["rho"] = _midpoint_refine(arrs["rho"])
        arrs["h"] = _midpoint_refine(arrs["h"])
        if arrs["r"].size > 1:
            arrs["r"] = _midpoint_refine(arrs["r"], geometric=True)
    raise RefinementFailedError(
        f"cells still exceed {mu_act} dBA after {max_rounds} refinement rounds"
    )


CSV_HEADER = ["v", "rho", "h", "r", "phi", "L"]


def save_dataset_csv(path, dataset: CertifiedDataset) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for state, level in dataset.samples:
            writer.writerow(
                f"{x:.9g}"
                for x in (state.v, state.rho, state.h, state.r, state.phi, level)
            )


def load_dataset_csv(path) -> list[tuple[RelativeState, float]]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != CSV_HEADER:
                raise ConfigError(
                    f"dataset header must be {','.join(CSV_HEADER)}, got {header}"
                )
            samples = []
            for row in reader:
                if len(row) != 6:
                    raise ConfigError(f"bad dataset row: {row}")
                v, rho, h, r, phi, level = (float(x) for x in row)
                samples.append((RelativeState(v=v, rho=rho, h=h, r=r, phi=phi), level))
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"bad dataset value in {path}: {exc}") from exc
    if not samples:
        raise ConfigError(f"dataset {path} holds no samples")
    return samples


def _cube_entry(rec: CubeRecord) -> dict:
    cube = rec.cube
    entry = {
        "v": list(cube.v),
        "rho": list(cube.rho),
        "h": list(cube.h),
        "l_min": rec.l_min,
        "l_max": rec.l_max,
        "gap": rec.gap,
        "flagged": rec.flagged,
    }
    if isinstance(cube, Cell):
        entry["r"] = list(cube.r)
        entry["m"] = cube.m
    else:
        entry["r"] = cube.r
    entry["phi"] = cube.phi
    return entry


def save_cube_log(path, dataset: CertifiedDataset) -> None:
    payload = {
        "mu_act": dataset.mu_act,
        "oracle_evals": dataset.oracle_evals,
        "corner_requests": dataset.corner_requests,
        "n_samples": len(dataset.samples),
        "cubes": [_cube_entry(rec) for rec in dataset.records],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _record_from_entry(entry: dict, where: str) -> CubeRecord:
    try:
        common = {
            "v": tuple(float(x) for x in entry["v"]),
            "rho": tuple(float(x) for x in entry["rho"]),
            "h": tuple(float(x) for x in entry["h"]),
            "phi": float(entry["phi"]),
        }
        if "m" in entry:
            cube = Cell(
                r=tuple(float(x) for x in entry["r"]),
                m=int(entry["m"]), **common,
            )
        else:
            cube = Hypercube(r=float(entry["r"]), **common)
        return CubeRecord(
            cube=cube,
            l_min=float(entry["l_min"]),
            l_max=float(entry["l_max"]),
            flagged=bool(entry.get("flagged", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: bad cube entry: {exc}") from exc


def load_cube_log(path) -> tuple[list[CubeRecord], dict]:
    """Read a cube log back into records plus its bookkeeping header."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read cube log {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cubes = raw.get("cubes")
    if not isinstance(cubes, list) or not cubes:
        raise ConfigError(f"{path}: 'cubes' must be a non-empty list")
    records = [_record_from_entry(e, str(path)) for e in cubes]
    meta = {
        "mu_act": float(raw.get("mu_act", math.inf)),
        "oracle_evals": int(raw.get("oracle_evals", 0)),
        "corner_requests": int(raw.get("corner_requests", 0)),
        "n_samples": int(raw.get("n_samples", 0)),
    }
    return records, meta
