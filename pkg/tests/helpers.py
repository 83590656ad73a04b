"""Small in-memory pipeline used by several test modules."""
from __future__ import annotations

from tiershard.planner import PlannerInstance, solve
from tiershard.remap import build_remap
from tiershard.simulator import simulate_trace
from tiershard.stats import AccessProfiler


def run_pipeline(trace, profile, backend="heuristic", n_emb_devices=None, tt_rank=2, tt_cores=2,
                 max_step=100):
    prof = AccessProfiler(tt_rank, tt_cores, max_step).fit(trace)
    stats = [prof.stats_[s.table_id] for s in trace.tables]
    inst = PlannerInstance(profile, list(trace.tables), stats)
    plan = solve(inst, backend, n_emb_devices=n_emb_devices)
    remap = build_remap(plan, prof.hotness_, {s.table_id: s.row_len for s in trace.tables})
    return inst, plan, remap, simulate_trace(plan, remap, trace, profile)
