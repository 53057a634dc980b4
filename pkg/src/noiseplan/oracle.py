"""Ground-truth noise sources: a synthetic analytic oracle and recorded tables.

The synthetic oracle maps an observer-relative state (v, rho, h, r, phi) to an
A-weighted level:

    L = L0 + a_v*log10(v/v_ref) + a_rho*log10(rho/rho_ref)
        - k*log10(slant/d_ref) + sum_n A_n*cos(n*phi),   slant = hypot(h, r)

It is monotone nondecreasing in v and rho and nonincreasing in h and r by
construction, with bounded azimuthal variation, which is exactly the structure
the certified training pipeline assumes. Every evaluation is counted so
sampling strategies can be compared by oracle cost.

Note on the azimuthal lobes: the default amplitudes are chosen so g(phi) has
extrema only at phi = 0 and +-pi. Both are forced sector boundaries of the
azimuth partition, so within any sector g is monotone and its variation
relative to the sector midpoint never exceeds the variation relative to the
sector edge. User-supplied lobes with interior extrema weaken the certified
bound's azimuth term and should be avoided.
"""

from __future__ import annotations

import csv
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError


class OracleError(Exception):
    pass


class DomainViolationError(OracleError):
    """Query outside the oracle's declared domain box."""


class SingularPointError(OracleError):
    """Query at zero slant range (h = r = 0), where the level diverges."""


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box of valid (v, rho, h, r) queries; phi is unrestricted."""

    v: tuple[float, float] = (20.0, 60.0)
    rho: tuple[float, float] = (500.0, 700.0)
    h: tuple[float, float] = (50.0, 450.0)
    r: tuple[float, float] = (0.0, 3200.0)

    def check(self, v: float, rho: float, h: float, r: float) -> None:
        for name, value, (lo, hi) in (
            ("v", v, self.v),
            ("rho", rho, self.rho),
            ("h", h, self.h),
            ("r", r, self.r),
        ):
            if not (lo <= value <= hi):
                raise DomainViolationError(
                    f"{name}={value!r} outside [{lo}, {hi}]"
                )

    def to_dict(self) -> dict:
        return {"v": list(self.v), "rho": list(self.rho),
                "h": list(self.h), "r": list(self.r)}

    @classmethod
    def from_dict(cls, d: dict) -> "Domain":
        def axis(key):
            pair = d[key]
            return float(pair[0]), float(pair[1])

        try:
            return cls(v=axis("v"), rho=axis("rho"), h=axis("h"), r=axis("r"))
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise ConfigError(f"bad domain spec: {e}") from e


@dataclass(frozen=True)
class SyntheticOracleParams:
    L0: float = 41.0
    a_v: float = 6.0
    a_rho: float = 3.0
    k: float = 16.0
    v_ref: float = 60.0
    rho_ref: float = 700.0
    d_ref: float = 50.0
    phi_amps: tuple[float, ...] = (1.6, 0.35)
    domain: Domain = field(default_factory=Domain)


class SyntheticOracle:
    """Analytic noise oracle with a thread-safe evaluation counter."""

    def __init__(self, params: SyntheticOracleParams | None = None):
        self.params = params or SyntheticOracleParams()
        self._count = 0
        self._lock = threading.Lock()

    @property
    def domain(self) -> Domain:
        return self.params.domain

    @property
    def n_evals(self) -> int:
        return self._count

    def reset_counter(self) -> None:
        with self._lock:
            self._count = 0

    def _charge(self, n: int) -> None:
        with self._lock:
            self._count += n

    def _g(self, phi):
        total = 0.0
        for n, amp in enumerate(self.params.phi_amps, start=1):
            total = total + amp * np.cos(n * phi)
        return total

    def eval(self, v: float, rho: float, h: float, r: float, phi: float) -> float:
        if h == 0.0 and r == 0.0:
            raise SingularPointError("slant range is zero at h=r=0")
        self.domain.check(v, rho, h, r)
        self._charge(1)
        p = self.params
        slant = math.hypot(h, r)
        return (
            p.L0
            + p.a_v * math.log10(v / p.v_ref)
            + p.a_rho * math.log10(rho / p.rho_ref)
            - p.k * math.log10(slant / p.d_ref)
            + float(self._g(phi))
        )

    def eval_batch(self, v, rho, h, r, phi) -> np.ndarray:
        """Vectorized evaluation; raises on any out-of-domain element."""
        v, rho, h, r, phi = (np.asarray(a, dtype=float) for a in (v, rho, h, r, phi))
        v, rho, h, r, phi = np.broadcast_arrays(v, rho, h, r, phi)
        slant = np.hypot(h, r)
        if np.any(slant == 0.0):
            raise SingularPointError("slant range is zero at h=r=0")
        d = self.domain
        for name, arr, (lo, hi) in (
            ("v", v, d.v), ("rho", rho, d.rho), ("h", h, d.h), ("r", r, d.r)
        ):
            if np.any(arr < lo) or np.any(arr > hi):
                bad = arr[(arr < lo) | (arr > hi)].flat[0]
                raise DomainViolationError(f"{name}={bad!r} outside [{lo}, {hi}]")
        self._charge(int(v.size))
        p = self.params
        return (
            p.L0
            + p.a_v * np.log10(v / p.v_ref)
            + p.a_rho * np.log10(rho / p.rho_ref)
            - p.k * np.log10(slant / p.d_ref)
            + self._g(phi)
        )


class TabulatedOracle:
    """Exact-match oracle over recorded (v, rho, h, r, phi, L) rows.

    Intended for table-driven tests and replaying recorded data; queries are
    keyed on values rounded to 9 significant digits, matching the CSV format.
    """

    def __init__(self, rows, domain: Domain):
        self.domain = domain
        self._table: dict[tuple, float] = {}
        for v, rho, h, r, phi, level in rows:
            self._table[self._key(v, rho, h, r, phi)] = float(level)
        self._count = 0
        self._lock = threading.Lock()

    @staticmethod
    def _key(v, rho, h, r, phi) -> tuple:
        return tuple(float(f"{x:.9g}") for x in (v, rho, h, r, phi))

    @property
    def n_evals(self) -> int:
        return self._count

    def eval(self, v, rho, h, r, phi) -> float:
        self.domain.check(v, rho, h, r)
        key = self._key(v, rho, h, r, phi)
        if key not in self._table:
            raise DomainViolationError(f"no recorded sample at {key}")
        with self._lock:
            self._count += 1
        return self._table[key]

    def eval_batch(self, v, rho, h, r, phi) -> np.ndarray:
        arrays = [np.atleast_1d(np.asarray(a, dtype=float))
                  for a in np.broadcast_arrays(v, rho, h, r, phi)]
        return np.array([self.eval(*vals) for vals in zip(*arrays)])


def verify_monotone(oracle, n_pairs: int = 1000, seed: int = 0) -> float:
    """Fraction of random ordered pairs that respect the monotone order.

    A pair (lower, upper) is ordered when upper has v and rho at least as
    large and h and r at least as small, at identical phi. Returns the
    fraction with oracle(upper) >= oracle(lower); 1.0 means no observed
    violation of the monotone structure.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    d = oracle.domain
    lo = np.array([d.v[0], d.rho[0], d.h[0], d.r[0]])
    hi = np.array([d.v[1], d.rho[1], d.h[1], d.r[1]])
    a = rng.uniform(lo, hi, size=(n_pairs, 4))
    b = rng.uniform(lo, hi, size=(n_pairs, 4))
    lower = np.empty_like(a)
    upper = np.empty_like(a)
    # v, rho: upper takes the max; h, r: upper takes the min
    lower[:, :2] = np.minimum(a[:, :2], b[:, :2])
    upper[:, :2] = np.maximum(a[:, :2], b[:, :2])
    lower[:, 2:] = np.maximum(a[:, 2:], b[:, 2:])
    upper[:, 2:] = np.minimum(a[:, 2:], b[:, 2:])
    phi = rng.uniform(-math.pi, math.pi, size=n_pairs)
    l_low = oracle.eval_batch(lower[:, 0], lower[:, 1], lower[:, 2], lower[:, 3], phi)
    l_up = oracle.eval_batch(upper[:, 0], upper[:, 1], upper[:, 2], upper[:, 3], phi)
    return float(np.count_nonzero(l_up >= l_low) / n_pairs)


# ---------------------------------------------------------------------------
# oracle spec files
# ---------------------------------------------------------------------------

def save_oracle_spec(path: str | Path, oracle: SyntheticOracle) -> None:
    p = oracle.params
    payload = {
        "type": "synthetic",
        "params": {
            "L0": p.L0, "a_v": p.a_v, "a_rho": p.a_rho, "k": p.k,
            "v_ref": p.v_ref, "rho_ref": p.rho_ref, "d_ref": p.d_ref,
            "phi_amps": list(p.phi_amps),
        },
        "domain": p.domain.to_dict(),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_oracle(path: str | Path):
    """Load an oracle spec: synthetic parameters or a recorded-sample table."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    kind = raw.get("type")
    if kind == "synthetic":
        params = raw.get("params", {})
        try:
            return SyntheticOracle(SyntheticOracleParams(
                L0=float(params["L0"]),
                a_v=float(params["a_v"]),
                a_rho=float(params["a_rho"]),
                k=float(params["k"]),
                v_ref=float(params["v_ref"]),
                rho_ref=float(params["rho_ref"]),
                d_ref=float(params["d_ref"]),
                phi_amps=tuple(float(a) for a in params["phi_amps"]),
                domain=Domain.from_dict(raw["domain"]),
            ))
        except KeyError as e:
            raise ConfigError(f"{path}: missing oracle parameter {e}") from e
    if kind == "recorded":
        csv_path = path.parent / raw["csv"]
        rows = load_recorded_csv(csv_path)
        return TabulatedOracle(rows, Domain.from_dict(raw["domain"]))
    raise ConfigError(f"{path}: unknown oracle type {kind!r}")


def load_recorded_csv(path: str | Path) -> list[tuple]:
    expected = ["v", "rho", "h", "r", "phi", "L"]
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != expected:
            raise ConfigError(f"{path}: header must be {','.join(expected)}")
        for line in reader:
            rows.append(tuple(float(x) for x in line))
    return rows


def save_recorded_csv(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["v", "rho", "h", "r", "phi", "L"])
        for row in rows:
            writer.writerow([f"{x:.9g}" for x in row])
