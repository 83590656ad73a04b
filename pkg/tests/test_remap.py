import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tiershard.planner import PlannerSolution
from tiershard.remap import (BRAM, DRAM, IDX_MASK, SSD, RemapTable, build_remap, build_table_remap,
                             decode_remap, encode_remap, load_remap, pack, save_remap, unpack)


def test_word_layout():
    assert int(pack(1, 5)) == 0x40000005
    assert int(pack(2, 7)) == 0x80000007
    assert tuple(int(v) for v in unpack(np.uint32(0x80000007))) == (2, 7)
    assert int(pack(0, IDX_MASK)) == 0x3FFFFFFF


def test_pack_rejects_out_of_range():
    with pytest.raises(ValueError):
        pack(3, 0)
    with pytest.raises(ValueError):
        pack(0, 1 << 30)


@given(st.integers(0, 2), st.integers(0, IDX_MASK))
def test_pack_unpack_roundtrip(dev, idx):
    w = pack(dev, idx)
    assert w.dtype == np.uint32
    assert tuple(int(v) for v in unpack(w)) == (dev, idx)
    assert int(w) == dev * 2**30 + idx


def test_split_example():
    t = build_table_remap(0, 4, np.arange(4), rows_dram=1, rows_tt=1)
    assert [t.resolve(r) for r in range(4)] == [(0, 0), (1, 0), (2, 0), (2, 1)]
    assert t.tier_counts() == (1, 1, 2)


def test_hotness_order_drives_placement():
    t = build_table_remap(3, 4, np.array([2, 0, 3, 1]), rows_dram=2, rows_tt=0)
    assert t.resolve(2) == (DRAM, 0) and t.resolve(0) == (DRAM, 1)
    assert t.resolve(3) == (SSD, 0) and t.resolve(1) == (SSD, 1)


def test_all_ssd_dense_ranks():
    t = build_table_remap(0, 6, np.array([5, 4, 3, 2, 1, 0]), 0, 0)
    assert [t.resolve(r) for r in range(6)] == [(SSD, 5 - r) for r in range(6)]


def test_resolve_bounds_and_bad_splits():
    t = build_table_remap(0, 4, np.arange(4), 1, 1)
    with pytest.raises(IndexError):
        t.resolve(4)
    with pytest.raises(IndexError):
        t.resolve(-1)
    with pytest.raises(ValueError):
        build_table_remap(0, 4, np.arange(4), 3, 2)
    with pytest.raises(ValueError):
        build_table_remap(0, 4, np.arange(3), 1, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200).flatmap(lambda n: st.tuples(
    st.just(n), st.permutations(list(range(n))), st.integers(0, n), st.integers(0, n))))
def test_per_tier_bijection(args):
    n, order, a, b = args
    rd = min(a, n)
    rt = min(b, n - rd)
    t = build_table_remap(0, n, np.array(order), rd, rt)
    dev, idx = unpack(t.entries)
    for tier, size in ((DRAM, rd), (BRAM, rt), (SSD, n - rd - rt)):
        assert sorted(idx[dev == tier].tolist()) == list(range(size))
    # hotter rows get lower tiers and, within a tier, lower local indices
    ranks = [(int(dev[r]), int(idx[r])) for r in order]
    assert ranks == sorted(ranks)


def test_build_remap_from_plan_and_roundtrip(tmp_path):
    plan = PlannerSolution.skeleton((1, 0), [0, 0], [(1, 1), (0, 2)], [4, 4])
    for tp, n in zip(plan.tables, (8, 4)):
        tp.rows_dram = n * tp.i_dram // 4
        tp.rows_tt = n * tp.i_tt // 4
        tp.rows_ssd = n - tp.rows_dram - tp.rows_tt
    tables = build_remap(plan, {0: np.arange(8)[::-1], 1: np.arange(4)}, {0: 8, 1: 4})
    assert [t.tier_counts() for t in tables] == [(2, 2, 4), (0, 2, 2)]
    data = encode_remap(tables)
    assert len(data) == 2 * 8 + 4 * 12
    assert decode_remap(data) == tables
    save_remap(tables, tmp_path / "r.bin")
    assert (tmp_path / "r.bin").read_bytes() == data
    assert load_remap(tmp_path / "r.bin") == tables
    with pytest.raises(ValueError):
        decode_remap(data[:-1])


def test_remap_equality():
    a = RemapTable(0, pack([0, 2], [0, 0]))
    assert a == RemapTable(0, pack([0, 2], [0, 0]))
    assert a != RemapTable(1, pack([0, 2], [0, 0]))
