"""Monotone per-sector noise models with certified worst-case error bounds.

Each azimuth sector gets its own small network that is monotone by
construction: raw weights are squared so the effective weights cannot go
negative, the activations are increasing, and the two decreasing inputs
(altitude and range) are flipped during normalization. The composite model
dispatches on the sector containing the query azimuth.

certify computes, per antipodal corner-pair cell of a test lattice, the
midpoint constants C (oracle) and D (network) and the three error terms
T1 = |eta - C|, T2 = |NN - D|, T3 = |C - D|, maximized over the cell's two
corners; the sector bound is delta_m = mu_phi + max over cells of
(T1 + T2 + T3). Monotonicity of both functions pins their cube extrema to
those corners, which is what makes the finite check sufficient.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from hashlib import sha256

import numpy as np

from ._kernels import mlp_forward, mlp_train, n_params
from .errors import ConfigError
from .oracle import Domain, DomainViolationError
from .partition import Partition, partition_from_dict, partition_to_dict, sector_of
from .state import RelativeState, wrap_angle


class ModelError(Exception):
    """Base class for model failures."""


class NonFiniteLossError(ModelError):
    """Training diverged; the learning rate is too hot for this data."""


class BoundViolatedError(ModelError):
    """Observed error exceeded a certified bound; an assumption is broken."""


class EmptyDatasetError(ModelError):
    """No cells or samples where some were required."""


class EmptyRequestError(ModelError):
    """A request asked for zero work."""


def subseed(seed: int, label: str) -> int:
    """Deterministic derived seed, stable across platforms and runs."""
    return int.from_bytes(
        sha256(f"{seed}:{label}".encode()).digest()[:8], "big"
    )


@dataclass(frozen=True)
class TrainingConfig:
    hidden: tuple[int, int] = (16, 16)
    learning_rate: float = 0.5
    epochs: int = 5000

    def __post_init__(self):
        if len(self.hidden) != 2 or any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden must be two positive sizes, got {self.hidden}")
        if self.learning_rate <= 0.0 or self.epochs < 1:
            raise ValueError("learning rate and epochs must be positive")


@dataclass
class MonotonicNetwork:
    """Sign-constrained MLP over normalized (v, rho, h, r).

    Normalization maps each input to [0, 1] with the decreasing axes
    (h, r) reversed, so the network only ever needs increasing behavior.
    The scalar output is affinely mapped back to dBA.
    """

    raw: np.ndarray
    hidden: tuple[int, int]
    x_lo: np.ndarray
    x_hi: np.ndarray
    y_lo: float
    y_scale: float
    train_residual: float = math.nan

    def normalize(self, v, rho, h, r) -> np.ndarray:
        v, rho, h, r = np.broadcast_arrays(
            *(np.asarray(a, dtype=float) for a in (v, rho, h, r))
        )
        span = self.x_hi - self.x_lo
        X = np.empty((v.size, 4))
        X[:, 0] = (v.ravel() - self.x_lo[0]) / span[0]
        X[:, 1] = (rho.ravel() - self.x_lo[1]) / span[1]
        X[:, 2] = (self.x_hi[2] - h.ravel()) / span[2]
        X[:, 3] = (self.x_hi[3] - r.ravel()) / span[3]
        return X

    def forward(self, v, rho, h, r) -> np.ndarray:
        X = np.ascontiguousarray(self.normalize(v, rho, h, r))
        y = mlp_forward(self.raw, X, self.hidden[0], self.hidden[1])
        return y * self.y_scale + self.y_lo

    def forward_scalar(self, v: float, rho: float, h: float, r: float) -> float:
        return float(self.forward([v], [rho], [h], [r])[0])


def train_sector(
    samples: list[tuple[RelativeState, float]],
    domain: Domain,
    hyper: TrainingConfig,
    seed: int,
) -> MonotonicNetwork:
    """Fit one sector's network by full-batch gradient descent.

    All samples must share the sector's representative azimuth; the azimuth
    itself is not an input. Deterministic for a given seed.

    Raises
    ------
    NonFiniteLossError
        If the loss leaves the reals before the epoch budget ends.
    """
    if len(samples) < 2:
        raise ValueError(f"need at least 2 samples, got {len(samples)}")
    phis = {s.phi for s, _ in samples}
    if len(phis) != 1:
        raise ValueError(f"samples span {len(phis)} azimuths; expected one")

    x_lo = np.array([domain.v[0], domain.rho[0], domain.h[0], domain.r[0]])
    x_hi = np.array([domain.v[1], domain.rho[1], domain.h[1], domain.r[1]])
    levels = np.array([lv for _, lv in samples])
    y_lo = float(levels.min())
    y_scale = float(max(levels.max() - y_lo, 1e-9))

    net = MonotonicNetwork(
        raw=np.empty(0), hidden=hyper.hidden, x_lo=x_lo, x_hi=x_hi,
        y_lo=y_lo, y_scale=y_scale,
    )
    X = np.ascontiguousarray(net.normalize(
        [s.v for s, _ in samples], [s.rho for s, _ in samples],
        [s.h for s, _ in samples], [s.r for s, _ in samples],
    ))
    t = np.ascontiguousarray((levels - y_lo) / y_scale)

    rng = np.random.default_rng(seed)
    h1, h2 = hyper.hidden
    # Raw weights start near sqrt(0.1) with a tight spread so the squared
    # weights are ~0.1 and every tanh sits in its near-linear band; hidden
    # biases cancel the mean preactivation (inputs average 0.5 after
    # normalization) and the output bias starts at the target midpoint.
    raw0 = np.zeros(n_params(4, h1, h2))
    w1r = rng.normal(math.sqrt(0.1), 0.1, (4, h1))
    raw0[:4 * h1] = w1r.ravel()
    raw0[4 * h1:5 * h1] = -0.5 * (w1r * w1r).sum(axis=0)
    off = 5 * h1
    raw0[off:off + h1 * h2] = rng.normal(math.sqrt(0.1), 0.1, h1 * h2)
    off += h1 * h2 + h2
    raw0[off:off + h2] = rng.normal(math.sqrt(0.1), 0.1, h2)
    raw0[-1] = 0.5
    raw, losses, done = mlp_train(
        raw0, X, t, h1, h2, hyper.learning_rate, hyper.epochs
    )
    if done < hyper.epochs:
        raise NonFiniteLossError(
            f"loss became non-finite at epoch {done}; "
            f"lower the learning rate (was {hyper.learning_rate})"
        )
    net.raw = raw
    preds = mlp_forward(raw, X, h1, h2) * y_scale + y_lo
    net.train_residual = float(np.max(np.abs(preds - levels)))
    return net


@dataclass
class CellBound:
    """Certification record for one corner-pair cell."""

    t1: float
    t2: float
    t3: float
    bound: float
    eta_max: float
    eta_min: float
    nn_max: float
    nn_min: float


@dataclass
class SectorModel:
    sector: object
    net: MonotonicNetwork
    delta_m: float = math.nan
    worst: CellBound | None = None


def certify(
    net: MonotonicNetwork,
    records: list,
    mu_phi: float,
) -> tuple[float, list[CellBound]]:
    """Certified worst-case error for one sector over its lattice cells.

    records are corner-pair acceptance records (oracle levels attached)
    whose cubes expose 4-D max_corner/min_corner tuples.
    """
    if not records:
        raise EmptyDatasetError("no cells to certify")
    max_pts = np.array([rec.cube.max_corner for rec in records], dtype=float)
    min_pts = np.array([rec.cube.min_corner for rec in records], dtype=float)
    nn_max = net.forward(max_pts[:, 0], max_pts[:, 1], max_pts[:, 2], max_pts[:, 3])
    nn_min = net.forward(min_pts[:, 0], min_pts[:, 1], min_pts[:, 2], min_pts[:, 3])

    bounds = []
    for i, rec in enumerate(records):
        c = 0.5 * (rec.l_max + rec.l_min)
        d = 0.5 * (float(nn_max[i]) + float(nn_min[i]))
        t1 = max(abs(rec.l_max - c), abs(rec.l_min - c))
        t2 = max(abs(float(nn_max[i]) - d), abs(float(nn_min[i]) - d))
        t3 = abs(c - d)
        bounds.append(CellBound(
            t1=t1, t2=t2, t3=t3, bound=mu_phi + t1 + t2 + t3,
            eta_max=rec.l_max, eta_min=rec.l_min,
            nn_max=float(nn_max[i]), nn_min=float(nn_min[i]),
        ))
    delta_m = max(b.bound for b in bounds)
    return delta_m, bounds


@dataclass
class CompositeNoiseModel:
    """Sector-dispatched noise predictor with certified error bounds."""

    partition: Partition
    models: dict[int, SectorModel]
    domain: Domain
    mu_phi: float

    def __post_init__(self):
        have = set(self.models)
        want = {s.m for s in self.partition.sectors}
        if have != want:
            raise ValueError(f"model sectors {have} do not match partition {want}")

    @property
    def delta(self) -> float:
        return max(sm.delta_m for sm in self.models.values())

    def _check_domain(self, v, rho, h, r):
        for name, arr, (lo, hi) in (
            ("v", v, self.domain.v),
            ("rho", rho, self.domain.rho),
            ("h", h, self.domain.h),
        ):
            if np.any(arr < lo) or np.any(arr > hi):
                raise DomainViolationError(f"{name} outside [{lo}, {hi}]")
        if np.any(r < self.domain.r[0]):
            raise DomainViolationError(
                f"r below {self.domain.r[0]}; no conservative prediction exists"
            )

    def predict_batch(self, v, rho, h, r, phi) -> np.ndarray:
        """Vectorized sector dispatch. Ranges beyond the domain's far edge
        clamp to it: the true level out there is lower, so the clamped
        prediction (and its bound) stays on the safe side."""
        v, rho, h, r, phi = np.broadcast_arrays(
            *(np.asarray(a, dtype=float) for a in (v, rho, h, r, phi))
        )
        self._check_domain(v, rho, h, r)
        r = np.minimum(r, self.domain.r[1])
        phi_w = np.array([wrap_angle(p) for p in phi.ravel()]).reshape(phi.shape)
        los = np.array(self.partition._los)
        idx = np.searchsorted(los, phi_w.ravel(), side="right") - 1
        out = np.empty(phi_w.size)
        flat = (v.ravel(), rho.ravel(), h.ravel(), r.ravel())
        for k, sector in enumerate(self.partition.sectors):
            mask = idx == k
            if not mask.any():
                continue
            net = self.models[sector.m].net
            out[mask] = net.forward(
                flat[0][mask], flat[1][mask], flat[2][mask], flat[3][mask]
            )
        return out.reshape(phi_w.shape)

    def predict(self, state: RelativeState) -> float:
        return float(self.predict_batch(
            state.v, state.rho, state.h, state.r, state.phi
        ))

    def sector_delta(self, phi: float) -> float:
        return self.models[sector_of(self.partition, phi).m].delta_m


def train_composite(
    samples: list[tuple[RelativeState, float]],
    partition: Partition,
    domain: Domain,
    hyper: TrainingConfig,
    seed: int,
) -> CompositeNoiseModel:
    """One network per sector, trained on that sector's sample slice."""
    by_sector: dict[int, list] = {s.m: [] for s in partition.sectors}
    for state, level in samples:
        by_sector[sector_of(partition, state.phi).m].append((state, level))
    models = {}
    for sector in partition.sectors:
        slice_m = by_sector[sector.m]
        if len(slice_m) < 2:
            raise EmptyDatasetError(
                f"sector {sector.m} has {len(slice_m)} samples; need at least 2"
            )
        net = train_sector(slice_m, domain, hyper, subseed(seed, f"train:{sector.m}"))
        models[sector.m] = SectorModel(sector=sector, net=net)
    return CompositeNoiseModel(
        partition=partition, models=models, domain=domain, mu_phi=partition.mu_phi
    )


def certify_composite(model: CompositeNoiseModel, records: list) -> dict:
    """Certify every sector from a pooled lattice record list.

    Returns a report dict with per-sector rows; also writes delta_m and the
    worst cell onto each SectorModel in place.
    """
    by_sector: dict[int, list] = {m: [] for m in model.models}
    for rec in records:
        by_sector[rec.cube.m].append(rec)
    rows = []
    for sector in model.partition.sectors:
        sm = model.models[sector.m]
        delta_m, bounds = certify(sm.net, by_sector[sector.m], model.mu_phi)
        worst = max(bounds, key=lambda b: b.bound)
        sm.delta_m = delta_m
        sm.worst = worst
        rows.append({
            "m": sector.m,
            "T1": worst.t1,
            "T2": worst.t2,
            "T3": worst.t3,
            "delta_m": delta_m,
            "n_cells": len(bounds),
        })
    return {"mu_phi": model.mu_phi, "delta": model.delta, "sectors": rows}


def validate_bound(
    model: CompositeNoiseModel,
    oracle,
    n_points: int,
    seed: int,
) -> dict:
    """Compare predictions to the oracle at fresh random states.

    Raises BoundViolatedError if any sector's observed worst error exceeds
    its certified delta_m; that means an assumption (usually monotonicity)
    does not hold.
    """
    if n_points < 1:
        raise EmptyRequestError(f"n_points must be >= 1, got {n_points}")
    rng = np.random.default_rng(seed)
    d = model.domain
    v = rng.uniform(d.v[0], d.v[1], n_points)
    rho = rng.uniform(d.rho[0], d.rho[1], n_points)
    h = rng.uniform(d.h[0], d.h[1], n_points)
    r = rng.uniform(d.r[0], d.r[1], n_points)
    phi = rng.uniform(-math.pi, math.pi, n_points)

    eta = oracle.eval_batch(v, rho, h, r, phi)
    pred = model.predict_batch(v, rho, h, r, phi)
    err = np.abs(eta - pred)

    los = np.array(model.partition._los)
    idx = np.searchsorted(los, phi, side="right") - 1
    sectors = {}
    violations = []
    for k, sector in enumerate(model.partition.sectors):
        mask = idx == k
        if not mask.any():
            continue
        worst = float(err[mask].max())
        delta_m = model.models[sector.m].delta_m
        sectors[sector.m] = {
            "max_err": worst, "delta_m": delta_m, "n": int(mask.sum()),
        }
        if worst > delta_m:
            violations.append((sector.m, worst, delta_m))
    if violations:
        detail = "; ".join(
            f"sector {m}: err {e:.4f} > bound {b:.4f}" for m, e, b in violations
        )
        raise BoundViolatedError(detail)
    return {
        "n_points": n_points,
        "max_err": float(err.max()),
        "delta": model.delta,
        "sectors": sectors,
    }


def model_to_dict(model: CompositeNoiseModel) -> dict:
    return {
        "domain": model.domain.to_dict(),
        "partition": partition_to_dict(model.partition),
        "mu_phi": model.mu_phi,
        "delta": model.delta,
        "sectors": [
            {
                "m": sector.m,
                "delta_m": model.models[sector.m].delta_m,
                "net": {
                    "hidden": list(model.models[sector.m].net.hidden),
                    "raw": model.models[sector.m].net.raw.tolist(),
                    "x_lo": model.models[sector.m].net.x_lo.tolist(),
                    "x_hi": model.models[sector.m].net.x_hi.tolist(),
                    "y_lo": model.models[sector.m].net.y_lo,
                    "y_scale": model.models[sector.m].net.y_scale,
                    "train_residual": model.models[sector.m].net.train_residual,
                },
            }
            for sector in model.partition.sectors
        ],
    }


def model_from_dict(data: dict) -> CompositeNoiseModel:
    try:
        domain = Domain.from_dict(data["domain"])
        partition = partition_from_dict(data["partition"])
        mu_phi = float(data["mu_phi"])
        models = {}
        for entry in data["sectors"]:
            m = int(entry["m"])
            nd = entry["net"]
            net = MonotonicNetwork(
                raw=np.array(nd["raw"], dtype=float),
                hidden=tuple(int(x) for x in nd["hidden"]),
                x_lo=np.array(nd["x_lo"], dtype=float),
                x_hi=np.array(nd["x_hi"], dtype=float),
                y_lo=float(nd["y_lo"]),
                y_scale=float(nd["y_scale"]),
                train_residual=float(nd["train_residual"]),
            )
            models[m] = SectorModel(
                sector=partition.by_index(m), net=net,
                delta_m=float(entry["delta_m"]),
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed model data: {exc}") from exc
    try:
        return CompositeNoiseModel(
            partition=partition, models=models, domain=domain, mu_phi=mu_phi
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def save_model(path, model: CompositeNoiseModel) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model_to_dict(model), f, indent=2, sort_keys=True)
        f.write("\n")


def load_model(path) -> CompositeNoiseModel:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model file {path}: {exc}") from exc
    return model_from_dict(data)


def save_certification_report(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
