"""Command-line pipeline: gen-trace -> analyze -> plan -> remap -> simulate -> report.

Exit codes: 0 success, 2 infeasible plan or constraint violation, 1 I/O,
parse or usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import ABLATION_LEVELS, BACKENDS, ConfigError, PipelineConfig, fixture_path, load_config
from .planner import (InfeasiblePlanError, PlanError, PlannerInstance, PlanViolationError, check_plan,
                      load_plan, save_plan, solve)
from .remap import build_remap, load_remap, save_remap
from .simulator import ShortTraceError, emit_report, format_table, save_report, simulate_trace
from .stats import AccessProfiler, access_counts, hotness_order, load_stats, save_stats
from .trace import EmptyTraceError, TraceError, generate_trace, load_trace, save_trace

log = logging.getLogger("tiershard")

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 rather than argparse's 2 (reserved for infeasibility)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="pipeline config (JSON)")
    src.add_argument("--fixture", choices=["tiny", "powerlaw"], help="use a bundled fixture config")
    common.add_argument("--workdir", type=Path, help="directory for artifacts (default: config dir, or cwd)")
    common.add_argument("--seed", type=int, help="trace seed")
    common.add_argument("--backend", choices=BACKENDS)
    common.add_argument("--ablation", type=int, choices=ABLATION_LEVELS,
                        help="1: SSD only, 2: DRAM+SSD, 3: DRAM+TT+SSD")
    common.add_argument("--devices", type=int, metavar="M", help="number of devices")
    common.add_argument("--timing", action="store_true", help="print wall time to stderr")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="tiershard", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("gen-trace", parents=[common], help="generate the synthetic trace")
    sub.add_parser("analyze", parents=[common], help="trace -> per-table statistics")
    sub.add_parser("plan", parents=[common], help="statistics -> sharding plan")
    sub.add_parser("remap", parents=[common], help="plan + trace -> remap table")
    sub.add_parser("simulate", parents=[common], help="plan + remap + trace -> latency report")
    rep = sub.add_parser("report", parents=[common], help="compare latency reports")
    rep.add_argument("inputs", nargs="*", type=Path,
                     help="report JSON files (default: every sharding level present)")
    return p


def _config(args) -> PipelineConfig:
    if args.fixture:
        cfg = load_config(fixture_path(args.fixture), args.workdir or Path.cwd())
    elif args.config:
        cfg = load_config(args.config, args.workdir)
    else:
        raise ConfigError("either --config or --fixture is required")
    if args.seed is not None:
        cfg.trace = replace(cfg.trace, seed=args.seed)
    if args.backend:
        cfg.backend = args.backend
    if args.ablation:
        cfg.ablation = args.ablation
    if args.devices is not None:
        cfg.profile = replace(cfg.profile, n_devices=args.devices)
    return cfg


def cmd_gen_trace(cfg: PipelineConfig, args) -> int:
    out = cfg.path("trace")
    out.parent.mkdir(parents=True, exist_ok=True)
    trace = generate_trace(cfg.trace)
    save_trace(trace, out)
    print(f"trace: {len(trace.tables)} tables, {trace.n_samples} samples -> {out}")
    return EXIT_OK


def cmd_analyze(cfg: PipelineConfig, args) -> int:
    trace = load_trace(cfg.path("trace"))
    prof = AccessProfiler(cfg.tt_rank, cfg.tt_cores, cfg.max_step).fit(trace)
    stats = [prof.stats_[s.table_id] for s in trace.tables]
    out = cfg.path("stats")
    save_stats(out, trace.tables, stats,
               {"tt_rank": cfg.tt_rank, "tt_cores": cfg.tt_cores, "max_step": cfg.max_step})
    for st in stats:
        print(f"table {st.table_id}: step={st.step} avg_pf={st.avg_pf:.4g} "
              f"icdf(0.5)={st.icdf_at(0.5):.4g} tt_bytes={int(st.tt_cm[-1])}")
    print(f"stats -> {out}")
    return EXIT_OK


def _instance(cfg: PipelineConfig) -> PlannerInstance:
    specs, stats = load_stats(cfg.path("stats"))
    return PlannerInstance(cfg.level_profile(specs), specs, stats)


def _print_violations(violations) -> None:
    for v in violations:
        where = "".join([f" device {v.device}" if v.device is not None else "",
                         f" table {v.table}" if v.table is not None else ""])
        print(f"violation [{v.label}]{where}: {v.message} (slack {v.slack:g})", file=sys.stderr)


def cmd_plan(cfg: PipelineConfig, args) -> int:
    inst = _instance(cfg)
    plan = solve(inst, cfg.backend)
    viol = check_plan(inst, plan)
    if viol:
        _print_violations(viol)
        return EXIT_INFEASIBLE
    plan.meta["ablation"] = cfg.ablation
    out = cfg.path("plan")
    save_plan(plan, out)
    print(f"plan ({cfg.backend}, level {cfg.ablation}): EMB devices "
          f"{[m for m, v in enumerate(plan.d) if v]}, MLP devices {[m for m, v in enumerate(plan.d) if not v]}")
    for j, tp in enumerate(plan.tables):
        print(f"  table {tp.table_id} -> device {plan.device_of(j)}: "
              f"dram {tp.pct_dram:.2f} ({tp.rows_dram} rows), tt {tp.pct_tt:.2f} ({tp.rows_tt} rows, "
              f"{tp.tt_cap} B), ssd {tp.rows_ssd} rows")
    for m, v in enumerate(plan.d):
        if v:
            print(f"  device {m}: c_dram={plan.c_dram[m]:.6g} c_tt={plan.c_tt[m]:.6g} c_ssd={plan.c_ssd[m]:.6g}")
    print(f"  c_emb={plan.c_emb:.6g} c_mlp_bot={plan.c_mlp_bot:.6g} c_mlp_top={plan.c_mlp_top:.6g} "
          f"c_fnt={plan.c_fnt:.6g} C={plan.C:.6g}")
    print(f"plan -> {out}")
    return EXIT_OK


def cmd_remap(cfg: PipelineConfig, args) -> int:
    plan = load_plan(cfg.path("plan"))
    trace = load_trace(cfg.path("trace"))
    hot = {s.table_id: hotness_order(access_counts(trace, s.table_id)) for s in trace.tables}
    lens = {s.table_id: s.row_len for s in trace.tables}
    tables = build_remap(plan, hot, lens)
    for t, tp in zip(tables, plan.tables):
        if t.tier_counts() != (tp.rows_dram, tp.rows_tt, tp.rows_ssd):
            raise ValueError(f"table {t.table_id}: remap populations disagree with the plan")
    out = cfg.path("remap")
    save_remap(tables, out)
    print(f"remap: {len(tables)} tables -> {out}")
    return EXIT_OK


def cmd_simulate(cfg: PipelineConfig, args) -> int:
    plan = load_plan(cfg.path("plan"))
    if plan.meta.get("ablation", cfg.ablation) != cfg.ablation:
        raise ValueError(f"plan was built for level {plan.meta['ablation']}, not {cfg.ablation}")
    remap = load_remap(cfg.path("remap"))
    trace = load_trace(cfg.path("trace"))
    prof = cfg.level_profile(trace.tables)
    report = simulate_trace(plan, remap, trace, prof, cfg.transfer_ns)
    csv_path, json_path = cfg.report_paths()
    save_report(report, csv_path, json_path)
    s = report.summary()
    print(f"simulate (level {cfg.ablation}): {s['n_batches']} batches of {s['batch_size']}, "
          f"mean latency {s['mean_latency_ns']:.6g} ns, p99 {s['p99_latency_ns']:.6g} ns")
    print(f"IPS: {s['ips']:.6g}")
    print(f"report -> {csv_path}, {json_path}")
    return EXIT_OK


def cmd_report(cfg: PipelineConfig, args) -> int:
    if args.inputs:
        files, names = list(args.inputs), [p.stem for p in args.inputs]
    else:
        files, names = [], []
        for lvl in ABLATION_LEVELS:
            path = cfg.report_paths(lvl)[1]
            if path.exists():
                files.append(path)
                names.append(f"{lvl}-level")
        if not files:
            raise FileNotFoundError(f"no simulation reports found under {cfg.workdir}")
    rows = emit_report([json.loads(Path(f).read_text()) for f in files], names)
    base = cfg.path("comparison")
    base.with_name(base.name + ".json").write_text(json.dumps(rows, indent=1) + "\n")
    lines = ["config,mean_latency_ns,ips,speedup"]
    lines += [f"{r['config']},{r['mean_latency_ns']!r},{r['ips']!r},{r['speedup']!r}" for r in rows]
    base.with_name(base.name + ".csv").write_text("\n".join(lines) + "\n")
    print(format_table(rows))
    return EXIT_OK


COMMANDS = {
    "gen-trace": cmd_gen_trace,
    "analyze": cmd_analyze,
    "plan": cmd_plan,
    "remap": cmd_remap,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = _config(args)
        code = COMMANDS[args.command](cfg, args)
    except InfeasiblePlanError as e:
        print(f"infeasible [{e.binding}]: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except PlanViolationError as e:
        _print_violations(e.violations)
        return EXIT_INFEASIBLE
    except (OSError, ValueError, KeyError, PlanError, TraceError, EmptyTraceError,
            ShortTraceError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    if args.timing:
        print(f"{args.command}: {time.perf_counter() - t0:.3f} s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
