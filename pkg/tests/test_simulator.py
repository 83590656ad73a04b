import numpy as np
import pytest

from helpers import run_pipeline
from tiershard.planner import PlannerInstance, PlannerSolution, evaluate
from tiershard.remap import build_table_remap
from tiershard.simulator import ShortTraceError, emit_report, format_table, simulate_batch, simulate_trace
from tiershard.stats import HardwareProfile, TableStats
from tiershard.trace import AccessTrace, EmbTableSpec, SyntheticTraceConfig, generate_trace

SPEC = EmbTableSpec(0, 4, 4)


def _plan(grid=(2, 1), step=4):
    return PlannerSolution.skeleton((1, 0), [0], [grid], [step])


def _profile(**kw):
    base = dict(n_devices=2, t_dram=2, t_tt=10, t_ssd=50, t_mlp_top=0, t_mlp_bot=0,
                batch_size=1, mini_batch=1)
    base.update(kw)
    return HardwareProfile(**base)


def test_tier_example():
    trace = AccessTrace.from_samples([SPEC], [[[0, 1, 2, 3]]])
    remap = [build_table_remap(0, 4, np.arange(4), 2, 1)]
    r = simulate_batch(_plan(), remap, trace, _profile())
    assert r.tier_counts == [2, 1, 1]
    assert r.tier_busy_ns[0] == [4.0, 10.0, 50.0]
    assert r.device_ns == [50.0, 0.0]
    assert r.latency_ns == 50.0 and r.emb_ns == 50.0


def test_mlp_and_transfer_terms():
    trace = AccessTrace.from_samples([SPEC], [[[]], [[]]])
    remap = [build_table_remap(0, 4, np.arange(4), 2, 1)]
    prof = _profile(t_mlp_bot=6, t_mlp_top=3, batch_size=2, mini_batch=1)
    r = simulate_batch(_plan(), remap, trace, prof, transfer_ns=5)
    assert r.emb_ns == 0.0
    assert r.latency_ns == 6 * 2 + 3 * 2 + 5


def test_all_dram_matches_planner():
    trace = generate_trace(SyntheticTraceConfig([50, 30], n_samples=64, mean_pf=3, pf_mode="constant",
                                                dim=4, seed=2, hot_thr=[1.0, 1.0]))
    prof = _profile(n_devices=3, batch_size=16, mini_batch=4, t_mlp_bot=1, t_mlp_top=1)
    stats = [TableStats(s.table_id, 4, np.linspace(0, 1, 5), avg_pf=3.0, tt_cm=np.zeros(5)) for s in trace.tables]
    inst = PlannerInstance(prof, trace.tables, stats)
    plan = evaluate(inst, PlannerSolution.skeleton((1, 1, 0), [0, 1], [(4, 0), (4, 0)], [4, 4]))
    remap = [build_table_remap(s.table_id, s.row_len, np.arange(s.row_len), s.row_len, 0)
             for s in trace.tables]
    rep = simulate_trace(plan, remap, trace, prof)
    assert len(rep.batches) == 4
    for b in rep.batches:
        assert b.device_ns[:2] == [plan.c_dram[0], plan.c_dram[1]]
        assert b.latency_ns == pytest.approx(plan.C)


def test_short_trace_and_dropped_tail():
    trace = AccessTrace.from_samples([SPEC], [[[0]]] * 5)
    remap = [build_table_remap(0, 4, np.arange(4), 4, 0)]
    with pytest.raises(ShortTraceError):
        simulate_trace(_plan((4, 0)), remap, trace, _profile(batch_size=6))
    rep = simulate_trace(_plan((4, 0)), remap, trace, _profile(batch_size=2))
    assert len(rep.batches) == 2
    with pytest.raises(ShortTraceError):
        simulate_batch(_plan(), remap, trace.window(0, 0), _profile())


def test_missing_remap_or_plan_table():
    trace = AccessTrace.from_samples([SPEC], [[[0]]])
    with pytest.raises(KeyError):
        simulate_trace(_plan(), [], trace, _profile())


def test_work_conservation_and_determinism():
    cfg = SyntheticTraceConfig([200, 80, 500], n_samples=300, mean_pf=[2, 1, 4], dim=8, seed=7)
    trace = generate_trace(cfg)
    prof = HardwareProfile(n_devices=3, cap_dram=4000, cap_bram=2000, batch_size=32, mini_batch=4)
    _, plan, remap, rep = run_pipeline(trace, prof)
    n_full = (trace.n_samples // 32) * 32
    total = sum(int(trace.indptr[t][n_full]) for t in range(len(trace.tables)))
    assert sum(rep.summary()["tier_counts"]) == total
    for b in rep.batches:
        busy = np.array(b.tier_busy_ns)
        assert b.device_ns == busy.max(axis=1).tolist()
    again = simulate_trace(plan, remap, trace, prof)
    assert again.to_csv() == rep.to_csv() and again.summary() == rep.summary()


def test_emit_report():
    a = {"batch_size": 8, "mean_latency_ns": 100.0, "ips": 8e7}
    b = {"batch_size": 8, "mean_latency_ns": 50.0, "ips": 1.6e8}
    rows = emit_report([a, b], ["base", "fast"])
    assert [r["speedup"] for r in rows] == [1.0, 2.0]
    assert "fast" in format_table(rows)
    with pytest.raises(ValueError):
        emit_report([a, dict(b, batch_size=16)])
    with pytest.raises(ValueError):
        emit_report([])
