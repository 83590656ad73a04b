"""Independent reference computations used only by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np

from tiershard.stats import HardwareProfile, compute_tt_cm_curve, stats_from_counts
from tiershard.trace import EmbTableSpec


# -- planner ---------------------------------------------------------------------------

def _table_options(spec, st, prof):
    """All grid choices of one table with their tier costs and byte usage (numpy columns)."""
    s = st.step
    hot = int(math.floor(spec.hot_thr * s + 1e-9))
    a = st.avg_pf * prof.batch_size
    rows = [int(round(v * spec.row_len)) for v in st.icdf]
    rb = spec.dim * spec.df
    out = []
    for i_d in range(hot + 1):
        for i_t in range(hot - i_d + 1):
            rd = rows[i_d]
            rt = rows[i_d + i_t] - rd
            rs = spec.row_len - rd - rt
            tt = 0 if rt == 0 else int(st.tt_cm[min(s, math.ceil(rt * s / spec.row_len))])
            out.append((a * ((i_d / s) * prof.t_dram), a * ((i_t / s) * prof.t_tt),
                        a * (((s - i_d - i_t) / s) * prof.t_ssd), rd * rb, tt, rs * rb))
    return np.array(out, dtype=np.float64)


def _device_min(opts, members, prof):
    """Min over every combination of the members' options of max tier time; inf if none fits."""
    if not members:
        return 0.0
    D = np.zeros(1)
    T = np.zeros(1)
    S = np.zeros(1)
    U = [np.zeros(1), np.zeros(1), np.zeros(1)]
    for j in members:
        o = opts[j]
        D = (D[:, None] + o[None, :, 0]).ravel()
        T = (T[:, None] + o[None, :, 1]).ravel()
        S = (S[:, None] + o[None, :, 2]).ravel()
        U = [(U[k][:, None] + o[None, :, 3 + k]).ravel() for k in range(3)]
    ok = (U[0] <= prof.cap_dram) & (U[1] <= prof.cap_bram) & (U[2] <= prof.cap_ssd)
    if not ok.any():
        return math.inf
    return float(np.maximum(np.maximum(D, T), S)[ok].min())


def brute_force_C(prof: HardwareProfile, specs, stats) -> float:
    """Minimal C over every core-type vector, every table->EMB-device map and every split."""
    M, J = prof.n_devices, len(specs)
    opts = [_table_options(sp, st, prof) for sp, st in zip(specs, stats)]
    cache = {}
    best = math.inf
    passes = prof.batch_size / prof.mini_batch
    for d in itertools.product((0, 1), repeat=M):
        k = sum(d)
        if not 1 <= k <= M - 1:
            continue
        emb_devs = [m for m in range(M) if d[m]]
        bot = prof.t_mlp_bot * passes / (M - k)
        top = prof.t_mlp_top * passes / (M - k)
        for assign in itertools.product(emb_devs, repeat=J):
            worst = 0.0
            for m in emb_devs:
                members = tuple(j for j in range(J) if assign[j] == m)
                if members not in cache:
                    cache[members] = _device_min(opts, members, prof)
                worst = max(worst, cache[members])
            if math.isinf(worst):
                continue
            best = min(best, max(bot, worst) + top)
    return best


def random_instance(rng: np.random.Generator, max_devices=3, max_tables=4, max_step=8):
    M = int(rng.integers(2, max_devices + 1))
    J = int(rng.integers(1, max_tables + 1))
    specs, stats = [], []
    for j in range(J):
        row_len = int(rng.integers(1, max_step + 1))
        dim = int(rng.choice([4, 8, 16]))
        hot = float(rng.choice([1.0, 1.0, 0.99, 0.75, 0.5]))
        spec = EmbTableSpec(j, row_len, dim, 4, hot)
        counts = rng.zipf(1.6, row_len).clip(max=50) * rng.integers(0, 2, row_len).clip(
            min=int(rng.random() < 0.8))
        st = stats_from_counts(counts, j, max_step)
        st.avg_pf = 0.0 if rng.random() < 0.1 else float(rng.uniform(0.2, 6.0))
        st.tt_cm = compute_tt_cm_curve(spec, st, rank=2, d=2)
        specs.append(spec)
        stats.append(st)
    total = sum(s.emb_bytes for s in specs)
    tt_total = sum(int(st.tt_cm[-1]) for st in stats)
    bs = int(rng.integers(1, 65))
    prof = HardwareProfile(
        n_devices=M,
        cap_dram=float(rng.uniform(0, 0.8) * total),
        cap_bram=float(rng.uniform(0, 0.8) * tt_total),
        cap_ssd=float(total * rng.choice([0.6, 1.0, 10.0])),
        t_dram=float(rng.uniform(1, 5)),
        t_tt=float(rng.uniform(2, 20)),
        t_ssd=float(rng.uniform(20, 200)),
        t_mlp_top=float(rng.uniform(0, 20)),
        t_mlp_bot=float(rng.uniform(0, 200)),
        batch_size=bs,
        mini_batch=int(rng.integers(1, bs + 1)),
    )
    return prof, specs, stats


# -- tensor train ------------------------------------------------------------------------

def tt_element(cores, i: int, j: int) -> float:
    """E(i, j) as a product of 2-D core slices, digit by digit (no unfolding or batching)."""
    shape = cores.shape
    idigits, jdigits = [], []
    for k in reversed(range(shape.d)):
        idigits.append(i % shape.row_factors[k])
        i //= shape.row_factors[k]
        jdigits.append(j % shape.col_factors[k])
        j //= shape.col_factors[k]
    idigits.reverse()
    jdigits.reverse()
    acc = np.eye(1)
    for k, g in enumerate(cores.cores):
        acc = acc @ g[:, idigits[k], jdigits[k], :].astype(np.float64)
    return float(acc[0, 0])


def tt_param_count(row_factors, col_factors, max_rank) -> int:
    """Parameter count by explicit core-shape enumeration."""
    modes = [a * b for a, b in zip(row_factors, col_factors)]
    d = len(modes)
    ranks = [1]
    for k in range(1, d):
        left = math.prod(modes[:k])
        right = math.prod(modes[k:])
        ranks.append(min(max_rank, left, right))
    ranks.append(1)
    total = 0
    for k in range(d):
        shape = (ranks[k], row_factors[k], col_factors[k], ranks[k + 1])
        total += len(list(itertools.product(*[range(n) for n in shape])))
    return total
