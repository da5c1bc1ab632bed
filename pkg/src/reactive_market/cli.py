"""Command-line entry point: ``reactive-market {validate,run,sweep,compare}``.

Exit codes: 0 success, 1 configuration or input error, 2 solver failure.
Every command writes under the output directory and finishes with a
``manifest.json`` listing each artifact with its SHA-256.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, validate_paths
from .network import FeederError
from .oracle import SolverFailure, solve_centralized
from .opf import assemble_qp
from .pac import PacConfig, solve_pac

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2
log = logging.getLogger("reactive_market")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, files, meta: dict) -> Path:
    entries = [{"path": str(Path(f).relative_to(out)), "sha256": _sha256(Path(f)),
                "bytes": Path(f).stat().st_size} for f in sorted(files)]
    doc = dict(meta, artifacts=entries)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    sc = cfg.scenario
    if args.seed is not None:
        cfg.seed = args.seed
        sc = replace(sc, seed=args.seed)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        sc = replace(sc, workers=args.workers)
    if args.out is not None:
        cfg.out = Path(args.out)
    if args.trace:
        sc = replace(sc, solver=replace(sc.solver, trace_dir=str(cfg.out / "traces")))
    cfg.scenario = sc
    return cfg


def _load(args) -> RunConfig:
    cfg = _apply_flags(load_config(args.config), args)
    problems = validate_paths(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def cmd_validate(cfg: RunConfig) -> tuple[int, list[str]]:
    from .scenarios import build_point

    if cfg.scenario.solver.method == "pac" and cfg.scenario.workers > 1:
        log.info("PAC with %d workers: atoms are solved in thread chunks", cfg.scenario.workers)
    net, dev, prof, avg = build_point(replace(cfg.scenario, days=max(cfg.scenario.days, 1)))
    lines = [f"feeder: {net.n_bus} buses, {net.n_line} lines, {len(net.capacitor_banks)} capacitor banks",
             f"devices: {len(dev.generators)} generators ({dev.nameplate_kw:.1f} kW), {len(dev.loads)} loads",
             f"profiles: {prof.days} day(s), average load {avg:.1f} kW"]
    return EXIT_OK, lines


def _meta(cfg: RunConfig, command: str) -> dict:
    from .scenarios import config_hash

    return {"command": command, "seed": cfg.seed, "config_hash": config_hash(cfg.scenario),
            "config": str(cfg.source.name) if cfg.source else None}


def cmd_run(cfg: RunConfig) -> list[Path]:
    from .market import settle, write_clearing_csv, write_dlmp_csv, write_settlement_csv
    from .scenarios import _plain, config_hash, run_point

    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    pt = run_point(cfg.scenario)
    files = [out / "clearing.csv", out / "dlmp.csv", out / "settlement.csv", out / "metrics.json"]
    write_clearing_csv(files[0], pt.results, pt.net)
    write_dlmp_csv(files[1], pt.dlmps, pt.net)
    write_settlement_csv(files[2], settle(pt.results, pt.dlmps, pt.devices, pt.net))
    doc = {"seed": cfg.seed, "config_hash": config_hash(cfg.scenario),
           "summary": pt.metrics, "daily": pt.daily}
    files[3].write_text(json.dumps(_clean(_plain(doc)), indent=1, sort_keys=True) + "\n")
    traces = sorted((out / "traces").glob("*.csv")) if (out / "traces").is_dir() else []
    write_manifest(out, files + traces, _meta(cfg, "run"))
    return files


def _clean(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_clean(x) for x in v]
    return v


def cmd_sweep(cfg: RunConfig, axis: str | None = None) -> list[Path]:
    from .scenarios import run_penetration_sweep, run_pf_sweep

    if cfg.seed is None:
        raise ConfigError("sweeps need a seed (config 'seed' or --seed)")
    axis = axis or cfg.sweep_axis
    run = run_pf_sweep if axis == "pf" else run_penetration_sweep
    rep = run(cfg.scenario, cfg.sweep_levels, workers=cfg.workers)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    files = [out / f"sweep_{axis}.csv", out / f"sweep_{axis}.json"]
    files[0].write_text(rep.to_csv())
    files[1].write_text(rep.to_json() + "\n")
    write_manifest(out, files, dict(_meta(cfg, "sweep"), axis=axis))
    return files


def compare_period(cfg: RunConfig, pac: PacConfig | None = None):
    """Solve one period with PAC and with the oracle; return a row of differences."""
    from .scenarios import build_point, period_inputs

    sc = cfg.scenario
    net, dev, prof, _ = build_point(replace(sc, days=max(sc.days, cfg.compare_day + 1)))
    inp = period_inputs(dev, prof, cfg.compare_day)[cfg.compare_slot]
    opts = replace(sc.solver.opf, zeta=sc.zeta)
    qp = assemble_qp(net, dev, inp, options=opts)
    ref = solve_centralized(qp, tol=sc.solver.oracle_tol)
    trace = None
    if sc.solver.trace_dir:
        Path(sc.solver.trace_dir).mkdir(parents=True, exist_ok=True)
        trace = Path(sc.solver.trace_dir) / "compare_trace.csv"
    sol = solve_pac(qp, pac or sc.solver.pac, trace_path=trace)
    rows = np.concatenate([qp.index.rows_of("pdef"), qp.index.rows_of("qdef")])
    scale = max(float(np.max(np.abs(ref.x))), 1.0)
    return {
        "periods": 1, "slot": cfg.compare_slot, "pac_iterations": sol.iterations,
        "pac_status": sol.status, "objective_pac": sol.objective, "objective_ref": ref.objective,
        "objective_rel_diff": abs(sol.objective - ref.objective) / max(abs(ref.objective), 1e-12),
        "max_primal_rel_diff": float(np.max(np.abs(sol.x - ref.x))) / scale,
        "max_dual_diff_pq": float(np.max(np.abs(sol.mu[rows] - ref.mu[rows]), initial=0.0)),
        "pac_eq_residual": qp.residuals(sol.x)["eq"],
        "pac_ineq_residual": qp.residuals(sol.x)["ineq"],
    }, trace


def cmd_compare(cfg: RunConfig) -> tuple[dict, list[Path]]:
    row, trace = compare_period(cfg)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    path = out / "compare.json"
    path.write_text(json.dumps(row, indent=1, sort_keys=True) + "\n")
    files = [path] + ([Path(trace)] if trace else [])
    write_manifest(out, files, _meta(cfg, "compare"))
    return row, files


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reactive-market",
                                description="Distribution-level reactive power market simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("validate", "check a config and its inputs"),
                           ("run", "clear every period of the configured days and settle"),
                           ("sweep", "run a penetration or PF sweep"),
                           ("compare", "PAC against the centralised solver on one period")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--out")
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--trace", action="store_true", help="write PAC iteration CSVs")
        if name == "sweep":
            s.add_argument("--axis", choices=("pf", "penetration"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        if args.command == "validate":
            code, lines = cmd_validate(cfg)
            print("\n".join(lines))
            print("config OK")
            return code
        if args.command == "run":
            files = cmd_run(cfg)
        elif args.command == "sweep":
            files = cmd_sweep(cfg, args.axis)
        else:
            row, files = cmd_compare(cfg)
            width = max(len(k) for k in row)
            for k, v in row.items():
                print(f"{k:<{width}}  {v:.3e}" if isinstance(v, float) else f"{k:<{width}}  {v}")
        for f in files:
            print(f"wrote {f}")
        return EXIT_OK
    except (ConfigError, FeederError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
