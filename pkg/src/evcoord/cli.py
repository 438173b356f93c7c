"""Command-line front end: generate, solve, baseline, compare, selftest."""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .admm import AdmmOptions, run
from .ev_solver import SolverOptions
from .model import ScenarioError, ev_cost, grid_cost
from .scenario import (GenConfig, asap_plus, generate_scenario, load_scenario, metrics,
                       save_scenario)

logger = logging.getLogger("evcoord")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_SELFTEST = 4

LOG_ENV = "EVCOORD_LOG_LEVEL"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, payload) -> None:
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def config_hash(config: dict) -> str:
    blob = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def write_manifest(out: Path, command: str, config: dict, files: list[Path],
                   seed: Optional[int] = None, inputs: Optional[dict] = None) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "config_hash": config_hash(config),
        "inputs": inputs or {},
        "files": {p.name: _sha256(p) for p in sorted(files)},
    }
    path = out / "manifest.json"
    write_json(path, manifest)
    return path


def read_config(path: Optional[str]) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if path is None:
        return parser
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}", EXIT_IO)
    try:
        parser.read(p, encoding="utf-8")
    except configparser.Error as exc:
        raise CliError(f"cannot parse config {p}: {exc}", EXIT_VALIDATION) from None
    return parser


def _section(parser: configparser.ConfigParser, name: str) -> dict:
    return dict(parser[name]) if parser.has_section(name) else {}


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}", EXIT_IO) from None
    return out


def _load(path: str):
    try:
        return load_scenario(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_IO) from None


def _inputs_digest(directory: str) -> dict:
    base = Path(directory)
    return {p.name: _sha256(p) for p in sorted(base.glob("*.csv"))}


def write_schedule(path: Path, ids, profiles) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ev_id", "slot", "kw"])
        for ev, row in zip(ids, profiles):
            for t, x in enumerate(row):
                w.writerow([ev, t, repr(float(x))])


def write_loads(path: Path, feeder_ids, loads, caps) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feeder_id", "slot", "load_mw", "capacity_mw"])
        for fid, lrow, crow in zip(feeder_ids, loads, caps):
            for t, (x, c) in enumerate(zip(lrow, crow)):
                w.writerow([fid, t, repr(float(x)), repr(float(c))])


TRACE_COLUMNS = ["iter", "grid_cost", "grid_cost_consensus", "objective", "rel_gap", "dual",
                 "decentralized_grid_cost", "primal_residual", "dual_residual",
                 "eps_primal", "eps_dual", "s1_mean_iterations", "s1_converged_fraction"]


def write_trace(path: Path, trace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for rec in trace:
            w.writerow(["" if rec.get(c) is None else repr(rec[c]) if isinstance(rec[c], float)
                        else rec[c] for c in TRACE_COLUMNS])


# ---------------------------------------------------------------- options

_ADMM_KEYS = {
    "rho": float, "kappa_rho": float, "kappa": float, "max_iter": int, "gap_tol": float,
    "residual_abs": float, "residual_rel": float, "certificate_period": int, "threads": int,
    "s1_tol": float, "s1_max_iter": int, "d1_tol": float, "d1_max_iter": int,
    "warm_start": bool, "project_prices": bool, "seed": int, "init": str,
}


def _parse_value(kind, raw):
    if kind is bool:
        text = str(raw).strip().lower()
        if text not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return text in ("1", "true", "yes", "on")
    if kind is int:
        value = float(raw)
        if value != int(value):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(value)
    if kind is str:
        return str(raw).strip()
    return float(raw)


def admm_options(section: dict, overrides: dict) -> AdmmOptions:
    values = {}
    for key, raw in {**section, **{k: v for k, v in overrides.items() if v is not None}}.items():
        if key not in _ADMM_KEYS:
            raise CliError(f"unknown solver parameter {key!r}", EXIT_VALIDATION)
        try:
            values[key] = _parse_value(_ADMM_KEYS[key], raw)
        except ValueError as exc:
            raise CliError(f"invalid solver parameter {key}: {exc}", EXIT_VALIDATION) from None
    base = AdmmOptions()
    s1 = base.s1_opts
    d1 = base.d1_opts
    if "s1_tol" in values or "s1_max_iter" in values:
        s1 = replace(s1, tol=values.pop("s1_tol", s1.tol), max_iter=values.pop("s1_max_iter", s1.max_iter))
    if "d1_tol" in values or "d1_max_iter" in values:
        d1 = replace(d1, tol=values.pop("d1_tol", d1.tol), max_iter=values.pop("d1_max_iter", d1.max_iter))
    tols = list(base.residual_tols)
    if "residual_abs" in values:
        tols[0] = values.pop("residual_abs")
    if "residual_rel" in values:
        tols[1] = values.pop("residual_rel")
    if "threads" not in values:
        values["threads"] = os.cpu_count() or 1
    try:
        return replace(base, s1_opts=s1, d1_opts=d1, residual_tols=tuple(tols), **values)
    except ValueError as exc:
        raise CliError(f"invalid solver options: {exc}", EXIT_VALIDATION) from None


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    parser = read_config(args.config)
    section = _section(parser, "generator")
    if args.seed is not None:
        section["seed"] = str(args.seed)
    config = GenConfig.from_mapping(section)
    scenario = generate_scenario(config)
    out = _out_dir(args.out)
    files = save_scenario(scenario, out)
    cfg = asdict(config)
    write_manifest(out, "generate", cfg, files, seed=config.seed)
    print(f"wrote {scenario.n_evs} EVs, {scenario.n_feeders} feeders, T={scenario.T} to {out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    parser = read_config(args.config)
    overrides = {"rho": args.rho, "kappa_rho": args.kappa_rho, "gap_tol": args.gap_tol,
                 "max_iter": args.max_iter, "threads": args.threads,
                 "certificate_period": args.certificate_period, "seed": args.seed}
    opts = admm_options(_section(parser, "admm"), overrides)
    scenario = _load(args.scenario)
    out = _out_dir(args.out)
    state, solution = run(scenario, opts, decentralized=args.decentralized)
    report = solution.to_report(scenario)
    paths = [out / "schedule.csv", out / "report.json", out / "trace.csv", out / "loads.csv"]
    write_schedule(paths[0], scenario.ev_ids, state.p)
    write_json(paths[1], report)
    write_trace(paths[2], state.trace)
    write_loads(paths[3], scenario.feeders.ids, state.hat_l, scenario.capacity)
    write_manifest(out, "solve", report["options"], paths, seed=opts.seed,
                   inputs=_inputs_digest(args.scenario))
    gap = solution.certificate.rel_gap
    print(f"status={solution.status} iterations={solution.iterations} "
          f"violation={solution.metrics.total_max_violation:.6g} MW "
          f"gap={'n/a' if gap is None else f'{gap:.4g}'}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    scenario = _load(args.scenario)
    out = _out_dir(args.out)
    profiles = asap_plus(scenario)
    loads = scenario.aggregate(profiles)
    rep = metrics(loads, scenario.capacity)
    kappa = AdmmOptions().kappa_for(scenario)
    ev_part = float(np.sum(ev_cost(profiles, kappa)))
    grid = grid_cost(loads, scenario.capacity)
    report = {
        "kind": "asap_plus",
        "n_evs": scenario.n_evs,
        "n_feeders": scenario.n_feeders,
        "horizon": scenario.T,
        "kappa": kappa,
        "objective": {"total": ev_part + grid, "grid": grid, "ev": ev_part},
        "metrics": rep.to_dict(),
        "feeder_ids": list(scenario.feeders.ids),
        "notes": list(scenario.notes),
    }
    paths = [out / "schedule.csv", out / "report.json", out / "loads.csv"]
    write_schedule(paths[0], scenario.ev_ids, profiles)
    write_json(paths[1], report)
    write_loads(paths[2], scenario.feeders.ids, loads, scenario.capacity)
    write_manifest(out, "baseline", {"kind": "asap_plus"}, paths,
                   inputs=_inputs_digest(args.scenario))
    print(f"ASAP+ violation={rep.total_max_violation:.6g} MW over {rep.feeders_over_threshold} feeder(s)")
    return EXIT_OK


def _read_report(path: str) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    if not p.is_file():
        raise CliError(f"run report not found: {p}", EXIT_IO)
    try:
        report = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"{p} is not valid JSON: {exc}", EXIT_VALIDATION) from None
    if not isinstance(report, dict) or "metrics" not in report:
        raise CliError(f"{p} lacks a metrics section", EXIT_VALIDATION)
    return report


def _ratio(a, b):
    if a is None or b is None:
        return None
    if b == 0:
        return 1.0 if a == 0 else None
    return a / b


def compare_reports(a: dict, b: dict) -> dict:
    ma, mb = a["metrics"], b["metrics"]
    if a.get("feeder_ids") != b.get("feeder_ids") or a.get("horizon") != b.get("horizon"):
        raise CliError("run reports describe different scenarios", EXIT_VALIDATION)
    keys = ["total_max_violation", "feeders_over_threshold", "pvr_load", "pvr_overload"]
    rows = {k: {"a": ma.get(k), "b": mb.get(k), "ratio": _ratio(ma.get(k), mb.get(k))} for k in keys}
    oa, ob = a.get("objective", {}).get("total"), b.get("objective", {}).get("total")
    rows["objective"] = {"a": oa, "b": ob, "ratio": _ratio(oa, ob)}
    return {"a_kind": a.get("kind"), "b_kind": b.get("kind"), "metrics": rows}


def cmd_compare(args) -> int:
    a, b = _read_report(args.run[0]), _read_report(args.run[1])
    result = compare_reports(a, b)
    out = Path(args.out)
    try:
        if out.parent and not out.parent.exists():
            out.parent.mkdir(parents=True)
        write_json(out, result)
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}", EXIT_IO) from None
    for key, row in result["metrics"].items():
        print(f"{key:24s} a={row['a']} b={row['b']} ratio={row['ratio']}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(args.level)
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(r.name for r in failed)}")
        return EXIT_SELFTEST
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evcoord", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic scenario")
    g.add_argument("--config", help="INI file with a [generator] section")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="coordinate charging with ADMM")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="INI file with an [admm] section")
    s.add_argument("--rho", type=float)
    s.add_argument("--kappa-rho", type=float)
    s.add_argument("--gap-tol", type=float)
    s.add_argument("--max-iter", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--certificate-period", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--decentralized", action="store_true",
                   help="also trace the grid cost of the EVs' best responses to the prices")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("baseline", help="simulate the ASAP+ rule")
    b.add_argument("--scenario", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_baseline)

    c = sub.add_parser("compare", help="side-by-side metrics of two runs")
    c.add_argument("--run", nargs=2, required=True, metavar=("A", "B"))
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    t = sub.add_parser("selftest", help="oracle and invariant checks")
    t.add_argument("--level", choices=("quick", "full"), default="quick")
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
