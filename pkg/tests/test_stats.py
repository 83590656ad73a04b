import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import tt_param_count
from tiershard.cores import CoreGeometry, estimate_mlp_latency, estimate_tt_latency
from tiershard.stats import (AccessProfiler, HardwareProfile, TableStats, calibrate_latencies, compute_cdf,
                             compute_pf, compute_tt_cm_curve, hotness_order, inverse_cdf, load_stats,
                             save_stats, stats_from_counts)
from tiershard.trace import AccessTrace, EmbTableSpec, EmptyTraceError, SyntheticTraceConfig, generate_trace
from tiershard.tt import TTShape


def test_icdf_hand_example():
    counts = [80, 10, 5, 5]
    st_ = stats_from_counts(counts)
    assert st_.step == 4
    assert st_.icdf.tolist() == [0.0, 0.25, 0.25, 0.25, 1.0]
    assert inverse_cdf(counts, 0.8) == 0.25
    assert inverse_cdf(counts, 1.0) == 1.0


def test_icdf_single_hot_row():
    counts = np.zeros(1000, dtype=int)
    counts[417] = 100
    st_ = stats_from_counts(counts)
    assert st_.step == 100
    assert st_.icdf[0] == 0.0
    assert np.allclose(st_.icdf[1:], 0.001)


@pytest.mark.parametrize("row_len", [10, 1000])
def test_icdf_uniform(row_len):
    st_ = stats_from_counts(np.full(row_len, 3))
    assert np.allclose(st_.icdf, np.linspace(0, 1, st_.step + 1))


def test_cold_table():
    st_ = stats_from_counts(np.zeros(5, dtype=int))
    assert st_.cold and not st_.icdf.any()


def test_icdf_at_interpolates():
    st_ = TableStats(0, 4, np.array([0, 0.25, 0.25, 0.25, 1.0]))
    assert st_.icdf_at(0.875) == pytest.approx(0.625)
    assert st_.icdf_at(0.5) == 0.25


def test_hotness_ties_by_index():
    assert hotness_order([1, 5, 5, 0, 1]).tolist() == [1, 2, 0, 4, 3]


def test_compute_pf_examples():
    spec = EmbTableSpec(0, 4, 8)
    assert compute_pf(AccessTrace.from_samples([spec], [[[0, 1]], [[3]]]), 0) == 1.5
    assert compute_pf(AccessTrace.from_samples([spec], [[[]], [[]]]), 0) == 0.0
    with pytest.raises(EmptyTraceError):
        compute_pf(AccessTrace.from_samples([spec], []), 0)


def test_compute_pf_target():
    tr = generate_trace(SyntheticTraceConfig([500], n_samples=10**4, mean_pf=8.34, seed=11))
    assert compute_pf(tr, 0) == pytest.approx(8.34, rel=0.05)


def test_tt_cm_cr_fixture():
    spec = EmbTableSpec(0, 4096, 64, 4)
    st_ = stats_from_counts(np.ones(4096, dtype=int))
    curve = compute_tt_cm_curve(spec, st_, rank=4, d=3)
    assert TTShape.for_table(4096, 64, 3, 4).core_shapes() == [(1, 16, 4, 4), (4, 16, 4, 4), (4, 16, 4, 1)]
    params = tt_param_count((16, 16, 16), (4, 4, 4), 4)
    assert params == 1536
    assert curve[-1] == 1536 * 4 == 6144
    assert 4096 * 64 / params == pytest.approx(170.67, abs=0.01)
    assert curve[0] == 0


def test_tt_cm_rank_one():
    spec = EmbTableSpec(0, 8, 4, 4)
    st_ = stats_from_counts(np.ones(8, dtype=int))
    curve = compute_tt_cm_curve(spec, st_, rank=1, d=2, col_factors=(4, 1))
    shape = TTShape.for_table(8, 4, 2, 1, (4, 1))
    assert curve[-1] == sum(i * j for i, j in zip(shape.row_factors, shape.col_factors)) * 4


def test_tt_cm_errors():
    spec = EmbTableSpec(0, 8, 6, 4)
    st_ = stats_from_counts(np.ones(8, dtype=int))
    with pytest.raises(ValueError):
        compute_tt_cm_curve(spec, st_, d=2, col_factors=(4, 2))
    with pytest.raises(ValueError):
        compute_tt_cm_curve(spec, st_, d=1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=100))
def test_icdf_inversion_property(counts):
    counts = np.array(counts)
    total = counts.sum()
    st_ = stats_from_counts(counts)
    if total == 0:
        assert st_.cold
        return
    assert st_.step == counts.size
    hot = np.sort(counts)[::-1]
    cum = np.concatenate([[0], np.cumsum(hot)])
    for i in range(st_.step + 1):
        k = int(round(st_.icdf[i] * counts.size))
        # covers >= i/step of accesses; one row fewer does not
        assert cum[k] * st_.step >= i * total
        if k > 0:
            assert cum[k - 1] * st_.step < i * total
    assert st_.icdf[-1] == pytest.approx(np.count_nonzero(counts) / counts.size)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3000), st.sampled_from([4, 16, 64]), st.integers(1, 8), st.integers(2, 4))
def test_tt_cm_monotone(row_len, dim, rank, d):
    spec = EmbTableSpec(0, row_len, dim)
    st_ = stats_from_counts(np.ones(row_len, dtype=int))
    curve = compute_tt_cm_curve(spec, st_, rank, d)
    assert curve[0] == 0 and np.all(np.diff(curve) >= 0)


def test_calibration():
    prof = HardwareProfile(mini_batch=8)
    shape = TTShape.for_table(4096, 64, 3, 4)
    geo = CoreGeometry()
    out = calibrate_latencies(prof, shape, [64, 64], [32, 32], geo)
    assert out.t_tt == estimate_tt_latency(shape, geo) * geo.clock_ns
    assert out.mini_batch == prof.mini_batch
    wide = calibrate_latencies(prof, shape, [128, 128], [32, 32], geo)
    assert wide.t_mlp_top == 4 * out.t_mlp_top
    assert out.t_mlp_bot == estimate_mlp_latency([32, 32], geo, 8) * geo.clock_ns


def test_profile_validation():
    with pytest.raises(ValueError):
        HardwareProfile(n_devices=1)
    with pytest.raises(ValueError):
        HardwareProfile(t_ssd=0)
    with pytest.raises(ValueError):
        HardwareProfile(batch_size=4, mini_batch=8)
    with pytest.raises(ValueError):
        HardwareProfile(cap_dram=-1)


def test_profiler_estimator_and_file(tmp_path):
    tr = generate_trace(SyntheticTraceConfig([30, 200], n_samples=400, seed=2))
    prof = AccessProfiler(tt_rank=2, tt_cores=2, max_step=20)
    assert prof.get_params() == {"tt_rank": 2, "tt_cores": 2, "max_step": 20}
    prof.fit(tr)
    assert set(prof.stats_) == {0, 1}
    assert prof.stats_[1].step == 20
    assert np.array_equal(prof.stats_[0].icdf, compute_cdf(tr, 0, 20).icdf)
    path = tmp_path / "stats.json"
    save_stats(path, tr.tables, [prof.stats_[0], prof.stats_[1]])
    specs, stats = load_stats(path)
    assert specs == tr.tables
    for a, b in zip(stats, (prof.stats_[0], prof.stats_[1])):
        assert a.to_dict() == b.to_dict()
