"""Command-line pipeline with reproducible run manifests.

Each subcommand reads JSON/CSV inputs, writes its artifacts into the --out
directory, and finishes by writing manifest.json there: the command name,
tool version, seed, flag values, and SHA-256 digests of every input and
output file. Reruns with the same inputs and seed produce byte-identical
artifacts, so two manifests match exactly when a result was reproduced.

Exit codes: 0 success, 2 planning infeasible (no path, or a shared noise
budget exhausted), 3 certified bound violated, 4 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import re
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_BOUND_VIOLATED = 3
EXIT_CONFIG = 4

_ID_PATTERN = re.compile(r"[A-Za-z0-9_-]+")


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; 2 means infeasible
    here, so remap usage problems to the config-error slot."""

    def error(self, message):
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


# ---------------------------------------------------------------------------
# manifest plumbing
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _prepare_out(out: str) -> Path:
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return path


def _write_manifest(out_dir: Path, command: str, seed: int | None,
                    inputs: list[tuple[str, str]], outputs: list[str],
                    parameters: dict) -> None:
    """Record what produced this directory. Output files are listed by
    name only, so the manifest does not depend on where --out points."""
    for role, path in inputs:
        if not Path(path).is_file():
            raise ConfigError(f"{role} input vanished during the run: {path}")
    manifest = {
        "command": command,
        "tool": {"name": "noiseplan", "version": __version__},
        "seed": seed,
        "parameters": parameters,
        "inputs": [
            {"role": role, "path": str(path), "sha256": _sha256(Path(path))}
            for role, path in inputs
        ],
        "outputs": [
            {"file": name, "sha256": _sha256(out_dir / name)}
            for name in sorted(outputs)
        ],
    }
    _write_json(out_dir / "manifest.json", manifest)


def _float_list(text: str, flag: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(
            f"{flag}: expected comma-separated numbers, got {text!r}"
        ) from exc
    if not values:
        raise ConfigError(f"{flag}: no values given")
    return values


def _int_tuple(text: str, flag: str) -> tuple[int, ...]:
    try:
        values = tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(
            f"{flag}: expected comma-separated integers, got {text!r}"
        ) from exc
    if not values:
        raise ConfigError(f"{flag}: no values given")
    return values


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_partition(args) -> int:
    from .oracle import load_oracle
    from .partition import partition_azimuth, save_partition

    oracle = load_oracle(args.oracle)
    part = partition_azimuth(
        oracle, args.mu_phi, dphi_step=math.radians(args.step_deg)
    )
    out = _prepare_out(args.out)
    save_partition(out / "partition.json", part)

    lines = [
        f"azimuth partition: {len(part.sectors)} sectors, "
        f"mu_phi {args.mu_phi:g} dBA",
        f"{'sector':>6}  {'angular range (deg)':>26}  {'width (deg)':>11}",
    ]
    for s in part.sectors:
        lo, hi = math.degrees(s.lo), math.degrees(s.hi)
        lines.append(f"{s.m:>6}  [{lo:>10.3f}, {hi:>10.3f})  {hi - lo:>11.3f}")
    (out / "partition_report.txt").write_text("\n".join(lines) + "\n")

    _write_manifest(
        out, "partition", None,
        [("oracle", args.oracle)],
        ["partition.json", "partition_report.txt"],
        {"mu_phi": args.mu_phi, "step_deg": args.step_deg},
    )
    print(f"{len(part.sectors)} sectors (mu_phi {args.mu_phi:g} dBA) -> {out}")
    return EXIT_OK


def _cmd_sample(args) -> int:
    import warnings

    from .oracle import load_oracle
    from .partition import load_partition
    from .sampling import (
        CertifiedDataset, active_sample, lattice_dataset, refine_lattice,
        save_cube_log, save_dataset_csv,
    )

    oracle = load_oracle(args.oracle)
    part = load_partition(args.partition)
    r_levels = _float_list(args.r_grid, "--r-grid")
    out = _prepare_out(args.out)
    parameters = {"mode": args.mode, "mu_act": args.mu_act,
                  "refine": args.refine}

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if args.mode == "active":
            samples, records = [], []
            evals = corners = 0
            d = oracle.domain
            for sector in part.sectors:
                for r in r_levels:
                    ds = active_sample(
                        (d.v, d.rho, d.h), r, sector.rep, oracle, args.mu_act
                    )
                    samples.extend(ds.samples)
                    records.extend(ds.records)
                    evals += ds.oracle_evals
                    corners += ds.corner_requests
            dataset = CertifiedDataset(
                samples=samples, records=records, mu_act=args.mu_act,
                oracle_evals=evals, corner_requests=corners,
            )
            grids = {"r": r_levels}
        else:
            for flag in ("v_grid", "rho_grid", "h_grid"):
                if getattr(args, flag) is None:
                    raise ConfigError(
                        f"lattice mode needs --{flag.replace('_', '-')}"
                    )
            v_l = _float_list(args.v_grid, "--v-grid")
            rho_l = _float_list(args.rho_grid, "--rho-grid")
            h_l = _float_list(args.h_grid, "--h-grid")
            if args.refine:
                dataset, grids = refine_lattice(
                    v_l, rho_l, h_l, r_levels, part, oracle,
                    mu_act=args.mu_act,
                )
            else:
                dataset = lattice_dataset(
                    v_l, rho_l, h_l, r_levels, part, oracle,
                    mu_act=args.mu_act,
                )
                grids = {"v": v_l, "rho": rho_l, "h": h_l, "r": r_levels}
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)

    save_dataset_csv(out / "dataset.csv", dataset)
    save_cube_log(out / "cubes.json", dataset)
    _write_json(out / "grids.json", grids)
    _write_manifest(
        out, "sample", None,
        [("oracle", args.oracle), ("partition", args.partition)],
        ["dataset.csv", "cubes.json", "grids.json"],
        parameters,
    )
    flagged = sum(1 for rec in dataset.records if rec.flagged)
    print(
        f"{len(dataset.samples)} samples, {dataset.oracle_evals} oracle "
        f"evals, {flagged} flagged cubes -> {out}"
    )
    return EXIT_OK


def _cmd_train_certify(args) -> int:
    from .model import (
        TrainingConfig, certify_composite, save_certification_report,
        save_model, train_composite,
    )
    from .oracle import Domain
    from .partition import load_partition
    from .sampling import Cell, load_cube_log, load_dataset_csv

    samples = load_dataset_csv(args.dataset)
    part = load_partition(args.partition)
    records, _meta = load_cube_log(args.lattice)
    if not all(isinstance(rec.cube, Cell) for rec in records):
        raise ConfigError(
            f"{args.lattice}: certification needs sector lattice cells; "
            "this cube log came from an active-mode run"
        )
    known = {s.m for s in part.sectors}
    foreign = sorted({rec.cube.m for rec in records} - known)
    if foreign:
        raise ConfigError(
            f"{args.lattice}: cells reference sectors {foreign} "
            "missing from the partition"
        )

    # The model is certified exactly on the lattice hull, so that hull is
    # the normalization domain.
    domain = Domain(
        v=(min(r.cube.v[0] for r in records),
           max(r.cube.v[1] for r in records)),
        rho=(min(r.cube.rho[0] for r in records),
             max(r.cube.rho[1] for r in records)),
        h=(min(r.cube.h[0] for r in records),
           max(r.cube.h[1] for r in records)),
        r=(min(r.cube.r[0] for r in records),
           max(r.cube.r[1] for r in records)),
    )
    hyper = TrainingConfig(
        hidden=_int_tuple(args.hidden, "--hidden"),
        learning_rate=args.lr, epochs=args.epochs,
    )
    model = train_composite(samples, part, domain, hyper, seed=args.seed)
    report = certify_composite(model, records)

    out = _prepare_out(args.out)
    save_model(out / "model.json", model)
    save_certification_report(out / "certification.json", report)
    lines = [
        f"certified sector bounds, mu_phi {report['mu_phi']:g} dBA",
        f"{'sector':>6}  {'cells':>7}  {'T1':>7}  {'T2':>7}  {'T3':>7}"
        f"  {'delta_m':>8}",
    ]
    for row in report["sectors"]:
        lines.append(
            f"{row['m']:>6}  {row['n_cells']:>7}  {row['T1']:>7.3f}  "
            f"{row['T2']:>7.3f}  {row['T3']:>7.3f}  {row['delta_m']:>8.3f}"
        )
    lines.append(f"overall delta: {report['delta']:.4f} dBA")
    (out / "certification_report.txt").write_text("\n".join(lines) + "\n")

    _write_manifest(
        out, "train-certify", args.seed,
        [("dataset", args.dataset), ("lattice", args.lattice),
         ("partition", args.partition)],
        ["model.json", "certification.json", "certification_report.txt"],
        {"hidden": args.hidden, "epochs": args.epochs, "lr": args.lr},
    )
    print(
        f"delta {report['delta']:.4f} dBA over {len(part.sectors)} "
        f"sectors -> {out}"
    )
    return EXIT_OK


def _cmd_plan(args) -> int:
    import dataclasses

    from .model import load_model
    from .planner import (
        load_scenario, plan, save_plan, save_plan_traces_csv, tighten_zones,
        tighten_zones_linear,
    )

    scenario = load_scenario(args.scenario)
    if scenario.start is None or scenario.goal is None:
        raise ConfigError(
            f"{args.scenario}: no start/goal; request lists go to plan-multi"
        )
    model = load_model(args.model)
    tighten = tighten_zones if args.tighten == "energy" else tighten_zones_linear
    tightened = tighten(scenario.zones, model.delta)
    cfg = scenario.cfg
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = _prepare_out(args.out)
    inputs = [("scenario", args.scenario), ("model", args.model)]

    def _run(run_cfg):
        return plan(
            scenario.start, scenario.goal, tightened, model,
            scenario.weights, run_cfg, bounds=scenario.bounds,
            airspace=scenario.airspace, rotor=scenario.rotor,
        )

    if args.compare:
        comparison = {}
        outputs = []
        for strategy in ("uniform", "pruned"):
            p, stats = _run(dataclasses.replace(cfg, strategy=strategy))
            comparison[strategy] = {
                "found": p is not None,
                "first_goal_iter": stats.first_goal_iter,
                "noise_rejections": stats.noise_rejections,
                "pruned_draws": stats.pruned_draws,
                "cost": None if p is None else p.cost,
                "steps": None if p is None else len(p.states) - 1,
            }
            if p is not None:
                save_plan(out / f"plan_{strategy}.json", p, stats)
                save_plan_traces_csv(out / f"traces_{strategy}.csv", p)
                outputs += [f"plan_{strategy}.json", f"traces_{strategy}.csv"]
        _write_json(out / "comparison.json", comparison)
        outputs.append("comparison.json")
        _write_manifest(
            out, "plan", cfg.seed, inputs, outputs,
            {"tighten": args.tighten, "compare": True},
        )
        for strategy, row in comparison.items():
            if row["found"]:
                print(
                    f"{strategy}: first goal at iteration "
                    f"{row['first_goal_iter']}, cost {row['cost']:.3f}"
                )
            else:
                print(f"{strategy}: no path")
        if all(row["found"] for row in comparison.values()):
            return EXIT_OK
        return EXIT_INFEASIBLE

    if args.strategy is not None:
        cfg = dataclasses.replace(cfg, strategy=args.strategy)
    p, stats = _run(cfg)
    if p is None:
        print(
            f"no path within {stats.iterations} iterations "
            f"({stats.noise_rejections} noise rejections, "
            f"{stats.airspace_rejections} airspace rejections)",
            file=sys.stderr,
        )
        return EXIT_INFEASIBLE
    save_plan(out / "plan.json", p, stats)
    save_plan_traces_csv(out / "traces.csv", p)
    _write_manifest(
        out, "plan", cfg.seed, inputs, ["plan.json", "traces.csv"],
        {"tighten": args.tighten, "compare": False,
         "strategy": cfg.strategy},
    )
    print(
        f"plan: {len(p.states) - 1} steps, cost {p.cost:.3f}, "
        f"first goal at iteration {stats.first_goal_iter}"
    )
    return EXIT_OK


def _cmd_plan_multi(args) -> int:
    import dataclasses

    from .model import load_model
    from .planner import (
        load_scenario, min_pairwise_separation, plan_multi, save_plan,
        save_plan_traces_csv,
    )

    scenario = load_scenario(args.scenario)
    if not scenario.requests:
        raise ConfigError(
            f"{args.scenario}: no requests; single flights go to plan"
        )
    for req in scenario.requests:
        if not _ID_PATTERN.fullmatch(req.id):
            raise ConfigError(
                f"request id {req.id!r} must match {_ID_PATTERN.pattern}"
            )
    if len({req.id for req in scenario.requests}) != len(scenario.requests):
        raise ConfigError("request ids must be unique")
    model = load_model(args.model)
    cfg = scenario.cfg
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = _prepare_out(args.out)

    result = plan_multi(
        scenario.requests, scenario.zones, model, scenario.weights, cfg,
        bounds=scenario.bounds, airspace=scenario.airspace,
        rotor=scenario.rotor, tighten=args.tighten,
    )

    outputs = []
    rows = []
    for req, p, stats in zip(scenario.requests, result.plans, result.stats):
        row = {
            "id": req.id, "t0": req.t0, "found": p is not None,
            "noise_rejections": stats.noise_rejections,
            "collision_rejections": stats.collision_rejections,
        }
        if p is not None:
            row.update(t_f=p.t_f, steps=len(p.states) - 1, cost=p.cost)
            save_plan(out / f"plan_{req.id}.json", p, stats)
            save_plan_traces_csv(out / f"traces_{req.id}.csv", p)
            outputs += [f"plan_{req.id}.json", f"traces_{req.id}.csv"]
        rows.append(row)
    separation = min_pairwise_separation(result.plans)
    summary = {
        "requests": rows,
        "horizon": result.horizon,
        "min_separation": separation if math.isfinite(separation) else None,
    }
    _write_json(out / "summary.json", summary)
    outputs.append("summary.json")
    _write_manifest(
        out, "plan-multi", cfg.seed,
        [("scenario", args.scenario), ("model", args.model)],
        outputs, {"tighten": args.tighten},
    )
    for row in rows:
        if row["found"]:
            print(f"{row['id']}: departs t={row['t0']}, arrives t={row['t_f']}")
        else:
            print(f"{row['id']}: no path")
    if all(row["found"] for row in rows):
        return EXIT_OK
    return EXIT_INFEASIBLE


def _cmd_validate(args) -> int:
    from .model import load_model, validate_bound
    from .oracle import load_oracle

    model = load_model(args.model)
    oracle = load_oracle(args.oracle)
    out = _prepare_out(args.out)
    report = validate_bound(model, oracle, args.n_points, args.seed)
    _write_json(out / "validation.json", report)
    _write_manifest(
        out, "validate", args.seed,
        [("model", args.model), ("oracle", args.oracle)],
        ["validation.json"],
        {"n_points": args.n_points},
    )
    print(
        f"max error {report['max_err']:.4f} dBA within certified delta "
        f"{report['delta']:.4f} over {args.n_points} points"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="noiseplan",
        description="Certified noise-aware eVTOL motion planning pipeline.",
    )
    parser.add_argument(
        "--version", action="version", version=f"noiseplan {__version__}"
    )
    parser.add_argument(
        "--threads", type=int, metavar="N",
        help="cap BLAS and OpenMP thread pools for numeric work",
    )
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    p = sub.add_parser(
        "partition",
        help="sweep azimuth and close sectors within a variation budget",
    )
    p.add_argument("--oracle", required=True, help="oracle spec JSON")
    p.add_argument("--mu-phi", type=float, required=True,
                   help="per-sector variation budget in dBA")
    p.add_argument("--step-deg", type=float, default=0.1,
                   help="sweep increment in degrees (default 0.1)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser(
        "sample",
        help="build a training dataset: adaptive cubes or a uniform lattice",
    )
    p.add_argument("--oracle", required=True, help="oracle spec JSON")
    p.add_argument("--partition", required=True, help="partition JSON")
    p.add_argument("--mu-act", type=float, default=1.5,
                   help="per-cube variation budget in dBA (default 1.5)")
    p.add_argument("--mode", choices=("active", "lattice"), default="active")
    p.add_argument("--r-grid", required=True,
                   help="comma-separated range levels in meters")
    p.add_argument("--v-grid", help="lattice mode: speed levels")
    p.add_argument("--rho-grid", help="lattice mode: rotor-speed levels")
    p.add_argument("--h-grid", help="lattice mode: altitude levels")
    p.add_argument("--refine", action="store_true",
                   help="lattice mode: double resolution until gaps "
                        "meet --mu-act")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser(
        "train-certify",
        help="fit sector networks and certify worst-case error per cell",
    )
    p.add_argument("--dataset", required=True, help="training samples CSV")
    p.add_argument("--lattice", required=True,
                   help="cube log JSON from a lattice-mode sample run")
    p.add_argument("--partition", required=True, help="partition JSON")
    p.add_argument("--hidden", default="16,16",
                   help="hidden layer widths (default 16,16)")
    p.add_argument("--epochs", type=int, default=5000)
    p.add_argument("--lr", type=float, default=0.5,
                   help="gradient step size (default 0.5)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_train_certify)

    p = sub.add_parser(
        "plan", help="plan one flight under tightened noise ordinances"
    )
    p.add_argument("--scenario", required=True, help="scenario JSON")
    p.add_argument("--model", required=True, help="certified model JSON")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--strategy", choices=("uniform", "pruned"),
                   help="override the scenario sampling strategy")
    p.add_argument("--compare", action="store_true",
                   help="run both strategies on one seed and write "
                        "comparison.json")
    p.add_argument("--tighten", choices=("linear", "energy"),
                   default="linear")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser(
        "plan-multi",
        help="plan sequential flight requests under shared noise budgets",
    )
    p.add_argument("--scenario", required=True, help="scenario JSON")
    p.add_argument("--model", required=True, help="certified model JSON")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--tighten", choices=("linear", "energy"),
                   default="linear")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_plan_multi)

    p = sub.add_parser(
        "validate",
        help="check model predictions against the oracle at random states",
    )
    p.add_argument("--model", required=True, help="certified model JSON")
    p.add_argument("--oracle", required=True, help="oracle spec JSON")
    p.add_argument("-n", "--n-points", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_validate)

    return parser


def _dispatch(args) -> int:
    from .model import BoundViolatedError, ModelError
    from .oracle import OracleError
    from .partition import PartitionError
    from .planner import (
        BudgetExhaustedError, InfeasibleTighteningError, PlannerError,
    )
    from .sampling import SamplingError
    from .state import StateError

    try:
        return args.func(args)
    except (BudgetExhaustedError, InfeasibleTighteningError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except BoundViolatedError as exc:
        print(f"certified bound violated: {exc}", file=sys.stderr)
        return EXIT_BOUND_VIOLATED
    except (ValueError, OSError, ModelError, OracleError, PartitionError,
            PlannerError, SamplingError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        # Pools size themselves when numpy first loads, which the command
        # handlers defer until after this point.
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    return _dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
