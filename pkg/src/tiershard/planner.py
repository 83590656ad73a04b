"""Sharding planner: core-type allocation, table placement and three-tier splits.

Every device hosts either an MLP core or an EMB core. Tables go to EMB
devices, and each table's rows are split, in hotness order, into a DRAM
region, a TT-compressed BRAM region and an SSD remainder. The split points
live on the table's ``step`` grid of access fractions. The plan minimizes

    C = max(c_mlp_bot, c_emb) + c_mlp_top,
    c_emb = max over EMB devices of max(c_dram_m, c_tt_m, c_ssd_m)

under per-device DRAM, BRAM and SSD capacities and per-table ``hot_thr``.
"""
from __future__ import annotations

import heapq
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .stats import HardwareProfile, TableStats
from .trace import EmbTableSpec

log = logging.getLogger(__name__)

# constraint labels reported by check_plan
DEVICE_ALLOC = "device_alloc"      # 1 <= #EMB devices <= M-1
TABLE_ASSIGN = "table_assign"      # every table on exactly one device
EMB_CORE_ONLY = "emb_core_only"    # tables only on EMB devices
HOT_THR = "hot_thr"                # pct_dram + pct_tt <= hot_thr
CAP_DRAM = "cap_dram"
CAP_BRAM = "cap_bram"
CAP_SSD = "cap_ssd"
GRID = "grid"                      # split indices on the step grid
COST = "cost"                      # recorded costs disagree with the plan

_EPS = 1e-9


class PlanError(ValueError):
    pass


class InfeasiblePlanError(PlanError):
    def __init__(self, message: str, binding: str = CAP_SSD):
        super().__init__(message)
        self.binding = binding


class PlanViolationError(PlanError):
    def __init__(self, violations: list["Violation"]):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = violations


@dataclass(frozen=True)
class Violation:
    label: str
    device: int | None = None
    table: int | None = None
    slack: float = 0.0
    message: str = ""

    def __str__(self):
        where = []
        if self.device is not None:
            where.append(f"device {self.device}")
        if self.table is not None:
            where.append(f"table {self.table}")
        loc = f" ({', '.join(where)})" if where else ""
        return f"[{self.label}]{loc} {self.message} slack={self.slack:g}"


@dataclass
class PlannerInstance:
    profile: HardwareProfile
    specs: list[EmbTableSpec]
    stats: list[TableStats]

    def __post_init__(self):
        if not self.specs:
            raise PlanError("planner needs at least one table")
        if len(self.specs) != len(self.stats):
            raise PlanError("specs and stats differ in length")
        for sp, st in zip(self.specs, self.stats):
            if sp.table_id != st.table_id:
                raise PlanError(f"specs/stats misaligned: {sp.table_id} vs {st.table_id}")
            if st.tt_cm is None or len(st.tt_cm) != st.step + 1:
                raise PlanError(f"table {sp.table_id}: missing TT size curve")
            if len(st.icdf) != st.step + 1:
                raise PlanError(f"table {sp.table_id}: icdf length does not match step")

    @property
    def n_tables(self) -> int:
        return len(self.specs)


class _Table:
    """Precomputed per-table quantities used by every solver."""

    def __init__(self, spec: EmbTableSpec, st: TableStats, prof: HardwareProfile):
        self.spec = spec
        self.step = st.step
        self.a = st.avg_pf * prof.batch_size
        self.hot = int(math.floor(spec.hot_thr * st.step + _EPS))
        self.rows = [st.rows_at(i, spec.row_len) for i in range(st.step + 1)]
        self.row_bytes = spec.dim * spec.df
        self.emb = spec.emb_bytes
        self.tt_cm = [int(v) for v in st.tt_cm]
        self.t = (prof.t_dram, prof.t_tt, prof.t_ssd)

    def split(self, i_d: int, i_t: int) -> tuple[int, int, int]:
        rd = self.rows[i_d]
        rt = self.rows[i_d + i_t] - rd
        return rd, rt, self.spec.row_len - rd - rt

    def tt_cap(self, i_d: int, i_t: int) -> int:
        n_tt = self.rows[i_d + i_t] - self.rows[i_d]
        if n_tt <= 0:
            return 0
        return self.tt_cm[min(self.step, -(-n_tt * self.step // self.spec.row_len))]

    def costs(self, i_d: int, i_t: int) -> tuple[float, float, float]:
        s = self.step
        td, tt, ts = self.t
        return (self.a * ((i_d / s) * td),
                self.a * ((i_t / s) * tt),
                self.a * (((s - i_d - i_t) / s) * ts))

    def usage(self, i_d: int, i_t: int) -> tuple[int, int, int]:
        """(DRAM bytes, compressed BRAM bytes, SSD bytes)."""
        rd, rt, rs = self.split(i_d, i_t)
        return rd * self.row_bytes, self.tt_cap(i_d, i_t), rs * self.row_bytes

    def options(self) -> Iterator[tuple[int, int]]:
        for i_d in range(self.hot + 1):
            for i_t in range(self.hot - i_d + 1):
                yield i_d, i_t


def _tables(instance: PlannerInstance) -> list[_Table]:
    return [_Table(sp, st, instance.profile) for sp, st in zip(instance.specs, instance.stats)]


def mlp_costs(profile: HardwareProfile, n_mlp: int) -> tuple[float, float]:
    """(c_mlp_bot, c_mlp_top) with the batch split across ``n_mlp`` MLP devices."""
    passes = profile.batch_size / profile.mini_batch
    return profile.t_mlp_bot * passes / n_mlp, profile.t_mlp_top * passes / n_mlp


@dataclass
class TablePlacement:
    table_id: int
    i_dram: int
    i_tt: int
    step: int
    pct_dram: float = 0.0
    pct_tt: float = 0.0
    rows_dram: int = 0
    rows_tt: int = 0
    rows_ssd: int = 0
    mem_dram: int = 0
    mem_tt: int = 0
    tt_cap: int = 0
    ssd_bytes: int = 0
    c_dram: float = 0.0
    c_tt: float = 0.0
    c_ssd: float = 0.0


@dataclass
class PlannerSolution:
    d: tuple[int, ...]
    p: tuple[tuple[int, ...], ...]
    tables: list[TablePlacement]
    c_dram: list[float] = field(default_factory=list)
    c_tt: list[float] = field(default_factory=list)
    c_ssd: list[float] = field(default_factory=list)
    c_emb: float = 0.0
    c_mlp_bot: float = 0.0
    c_mlp_top: float = 0.0
    c_fnt: float = 0.0
    C: float = 0.0
    meta: dict = field(default_factory=dict)

    @classmethod
    def skeleton(cls, d: Sequence[int], device_of: Sequence[int],
                 grid: Sequence[tuple[int, int]], steps: Sequence[int]) -> "PlannerSolution":
        """Candidate from core types, a device per table and (i_dram, i_tt) per table."""
        M = len(d)
        p = tuple(tuple(int(device_of[j] == m) for j in range(len(device_of))) for m in range(M))
        tables = [TablePlacement(j, g[0], g[1], s) for j, (g, s) in enumerate(zip(grid, steps))]
        return cls(tuple(int(v) for v in d), p, tables)

    @property
    def n_emb_devices(self) -> int:
        return sum(self.d)

    def device_of(self, j: int) -> int | None:
        devs = [m for m in range(len(self.d)) if self.p[m][j]]
        return devs[0] if len(devs) == 1 else None

    def emb_device_time(self, m: int) -> float:
        return max(self.c_dram[m], self.c_tt[m], self.c_ssd[m])

    def to_dict(self) -> dict:
        return {
            "d": list(self.d),
            "devices": [{"id": m, "core": "emb" if v else "mlp"} for m, v in enumerate(self.d)],
            "p": [list(r) for r in self.p],
            "tables": [asdict(t) for t in self.tables],
            "costs": {"c_dram": self.c_dram, "c_tt": self.c_tt, "c_ssd": self.c_ssd,
                      "c_emb": self.c_emb, "c_mlp_bot": self.c_mlp_bot,
                      "c_mlp_top": self.c_mlp_top, "c_fnt": self.c_fnt, "C": self.C},
            "solver": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PlannerSolution":
        c = doc["costs"]
        return cls(tuple(doc["d"]), tuple(tuple(r) for r in doc["p"]),
                   [TablePlacement(**t) for t in doc["tables"]],
                   list(c["c_dram"]), list(c["c_tt"]), list(c["c_ssd"]), c["c_emb"],
                   c["c_mlp_bot"], c["c_mlp_top"], c["c_fnt"], c["C"], dict(doc.get("solver", {})))


def save_plan(plan: PlannerSolution, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=1) + "\n")


def load_plan(path: str | Path) -> PlannerSolution:
    return PlannerSolution.from_dict(json.loads(Path(path).read_text()))


# -- evaluation and checking ---------------------------------------------------------

def _fill(instance: PlannerInstance, cand: PlannerSolution, tabs: list[_Table] | None = None) -> PlannerSolution:
    """Recompute every derived field of ``cand`` from its (d, p, grid) choice."""
    tabs = tabs or _tables(instance)
    M = instance.profile.n_devices
    placements = []
    for tp, tb in zip(cand.tables, tabs):
        i_d, i_t = tp.i_dram, tp.i_tt
        if not (0 <= i_d and 0 <= i_t and i_d + i_t <= tb.step):
            raise PlanViolationError([Violation(GRID, table=tb.spec.table_id, message=f"split ({i_d}, {i_t}) off the 0..{tb.step} grid")])
        rd, rt, rs = tb.split(i_d, i_t)
        cd, ct, cs = tb.costs(i_d, i_t)
        placements.append(TablePlacement(
            tb.spec.table_id, i_d, i_t, tb.step, i_d / tb.step, i_t / tb.step, rd, rt, rs,
            rd * tb.row_bytes, rt * tb.row_bytes, tb.tt_cap(i_d, i_t), rs * tb.row_bytes, cd, ct, cs))
    c_dram, c_tt, c_ssd = [0.0] * M, [0.0] * M, [0.0] * M
    for m in range(M):
        for j, tp in enumerate(placements):
            if cand.p[m][j]:
                c_dram[m] += tp.c_dram
                c_tt[m] += tp.c_tt
                c_ssd[m] += tp.c_ssd
    n_mlp = M - sum(cand.d)
    out = PlannerSolution(cand.d, cand.p, placements, c_dram, c_tt, c_ssd, meta=dict(cand.meta))
    out.c_emb = max([max(c_dram[m], c_tt[m], c_ssd[m]) for m in range(M) if cand.d[m]], default=0.0)
    if n_mlp > 0:
        out.c_mlp_bot, out.c_mlp_top = mlp_costs(instance.profile, n_mlp)
    else:
        out.c_mlp_bot = out.c_mlp_top = math.inf
    out.c_fnt = max(out.c_mlp_bot, out.c_emb)
    out.C = out.c_fnt + out.c_mlp_top
    return out


def _constraint_violations(instance: PlannerInstance, sol: PlannerSolution,
                           tabs: list[_Table]) -> list[Violation]:
    prof = instance.profile
    M, J = prof.n_devices, instance.n_tables
    out: list[Violation] = []
    if len(sol.d) != M or len(sol.p) != M or any(len(r) != J for r in sol.p):
        return [Violation(DEVICE_ALLOC, message=f"plan shape does not match {M} devices x {J} tables")]
    n_emb = sum(sol.d)
    if not 1 <= n_emb <= M - 1:
        out.append(Violation(DEVICE_ALLOC, slack=float(min(n_emb - 1, M - 1 - n_emb)),
                             message=f"{n_emb} EMB devices, need 1..{M - 1}"))
    for j, tb in enumerate(tabs):
        tid = tb.spec.table_id
        n_on = sum(sol.p[m][j] for m in range(M))
        if n_on != 1:
            out.append(Violation(TABLE_ASSIGN, table=tid, slack=float(1 - n_on),
                                 message=f"assigned to {n_on} devices"))
        for m in range(M):
            if sol.p[m][j] and not sol.d[m]:
                out.append(Violation(EMB_CORE_ONLY, device=m, table=tid, slack=-1.0,
                                     message="table placed on an MLP device"))
        tp = sol.tables[j]
        if tp.i_dram + tp.i_tt > tb.hot:
            out.append(Violation(HOT_THR, table=tid, slack=(tb.hot - tp.i_dram - tp.i_tt) / tb.step,
                                 message=f"pct_dram + pct_tt = {(tp.i_dram + tp.i_tt) / tb.step:g} "
                                         f"> hot_thr {tb.spec.hot_thr:g}"))
    for m in range(M):
        used = [0, 0, 0]
        for j, tb in enumerate(tabs):
            if sol.p[m][j]:
                u = tb.usage(sol.tables[j].i_dram, sol.tables[j].i_tt)
                for k in range(3):
                    used[k] += u[k]
        for k, (label, cap) in enumerate(((CAP_DRAM, prof.cap_dram), (CAP_BRAM, prof.cap_bram),
                                          (CAP_SSD, prof.cap_ssd))):
            if used[k] > cap:
                out.append(Violation(label, device=m, slack=cap - used[k],
                                     message=f"{used[k]} bytes exceed capacity {cap:g}"))
    return out


def evaluate(instance: PlannerInstance, candidate: PlannerSolution) -> PlannerSolution:
    """Fill bytes, row splits and every cost term; raise on any violated constraint."""
    tabs = _tables(instance)
    viol = _constraint_violations(instance, candidate, tabs)
    if viol:
        raise PlanViolationError(viol)
    return _fill(instance, candidate, tabs)


def check_plan(instance: PlannerInstance, solution: PlannerSolution) -> list[Violation]:
    """Replay every constraint and the cost definition; empty list iff the plan holds."""
    tabs = _tables(instance)
    out = []
    for tp, tb in zip(solution.tables, tabs):
        if not (0 <= tp.i_dram and 0 <= tp.i_tt and tp.i_dram + tp.i_tt <= tb.step) or tp.step != tb.step:
            out.append(Violation(GRID, table=tb.spec.table_id, message="split off the step grid"))
    if len(solution.tables) != len(tabs):
        out.append(Violation(TABLE_ASSIGN, message="placement count does not match tables"))
    if out:
        return out
    out = _constraint_violations(instance, solution, tabs)
    if out:
        return out
    ref = _fill(instance, solution, tabs)
    pairs = [("C", solution.C, ref.C), ("c_emb", solution.c_emb, ref.c_emb),
             ("c_fnt", solution.c_fnt, ref.c_fnt), ("c_mlp_top", solution.c_mlp_top, ref.c_mlp_top),
             ("c_mlp_bot", solution.c_mlp_bot, ref.c_mlp_bot)]
    for name, got, want in pairs:
        if not math.isclose(got, want, rel_tol=1e-9, abs_tol=1e-9):
            out.append(Violation(COST, slack=want - got, message=f"{name}={got:g}, recomputed {want:g}"))
    for j, (tp, rp) in enumerate(zip(solution.tables, ref.tables)):
        if (tp.rows_dram, tp.rows_tt, tp.rows_ssd, tp.mem_dram, tp.mem_tt, tp.tt_cap) != \
                (rp.rows_dram, rp.rows_tt, rp.rows_ssd, rp.mem_dram, rp.mem_tt, rp.tt_cap):
            out.append(Violation(COST, table=tp.table_id, message="recorded row split or bytes disagree"))
    return out


# -- exact solver -------------------------------------------------------------------

def _restricted_growth(n: int, k: int) -> Iterator[tuple[int, ...]]:
    """Set partitions of n items into at most k blocks, in lexicographic order."""
    a = [0] * n

    def rec(j: int, used: int):
        if j == n:
            yield tuple(a)
            return
        for b in range(min(used + 1, k)):
            a[j] = b
            yield from rec(j + 1, max(used, b + 1))

    if n == 0:
        yield ()
    else:
        yield from rec(0, 0)


def _bound_weights(t: tuple[float, float, float]) -> list[tuple[float, float, float]]:
    inv = [1.0 / v for v in t]
    s = sum(inv)
    ws = [tuple(v / s for v in inv)]
    n = 4
    for x in range(n + 1):
        for y in range(n + 1 - x):
            ws.append((x / n, y / n, (n - x - y) / n))
    return ws


class _DeviceSearch:
    """Branch and bound for one device's tables: minimize max tier time under capacities.

    Options are explored in lexicographic (i_dram, i_tt) order and a node is
    cut when a lower bound reaches the incumbent, so among equal-cost optima
    the lexicographically first one is kept. Lower bounds come from weighted
    sums of the tier times: for simplex weights w, max(D, T, S) >= w . (D, T, S).
    """

    def __init__(self, tabs: list[_Table], prof: HardwareProfile):
        self.tabs = tabs
        self.prof = prof
        self.caps = (prof.cap_dram, prof.cap_bram, prof.cap_ssd)
        self.weights = _bound_weights((prof.t_dram, prof.t_tt, prof.t_ssd))
        self.opts = []
        for tb in tabs:
            rows = []
            for i_d, i_t in tb.options():
                u = tb.usage(i_d, i_t)
                if all(u[k] <= self.caps[k] for k in range(3)):
                    rows.append(((i_d, i_t), tb.costs(i_d, i_t), u))
            self.opts.append(rows)
        self.nodes = 0

    def solve(self, members: Sequence[int], upper: float = math.inf):
        """Return (cost, {table position: (i_d, i_t)}) or None if infeasible."""
        opts = [self.opts[j] for j in members]
        if any(not o for o in opts):
            return None
        n = len(members)
        W = self.weights
        # suffix sums of per-table minima for each weight vector and resource
        wmin = [[0.0] * (n + 1) for _ in W]
        umin = [[0] * (n + 1) for _ in range(3)]
        for pos in reversed(range(n)):
            for w_i, w in enumerate(W):
                wmin[w_i][pos] = wmin[w_i][pos + 1] + min(
                    w[0] * c[0] + w[1] * c[1] + w[2] * c[2] for _, c, _ in opts[pos])
            for k in range(3):
                umin[k][pos] = umin[k][pos + 1] + min(u[k] for _, _, u in opts[pos])
        caps = self.caps
        best = [upper * (1 + 1e-12) if upper < math.inf else math.inf, None]
        chosen: list = [None] * n

        def dfs(pos, D, T, S, ud, ub, us):
            self.nodes += 1
            if pos == n:
                cost = max(D, T, S)
                if cost < best[0]:
                    best[0] = cost
                    best[1] = tuple(chosen)
                return
            for key, c, u in opts[pos]:
                nd, nb, ns = ud + u[0], ub + u[1], us + u[2]
                if (nd + umin[0][pos + 1] > caps[0] or nb + umin[1][pos + 1] > caps[1]
                        or ns + umin[2][pos + 1] > caps[2]):
                    continue
                nD, nT, nS = D + c[0], T + c[1], S + c[2]
                lb = max(nD, nT, nS)
                if lb >= best[0]:
                    continue
                for w_i, w in enumerate(W):
                    v = (w[0] * nD + w[1] * nT + w[2] * nS + wmin[w_i][pos + 1]) * (1 - 1e-12)
                    if v > lb:
                        lb = v
                if lb >= best[0]:
                    continue
                chosen[pos] = key
                dfs(pos + 1, nD, nT, nS, nd, nb, ns)

        dfs(0, 0.0, 0.0, 0.0, 0, 0, 0)
        if best[1] is None:
            return None
        return best[0], dict(zip(members, best[1]))


DEFAULT_CAPS = {"max_devices": 4, "max_tables": 6, "max_step": 10}


def _infeasible(instance: PlannerInstance) -> InfeasiblePlanError:
    prof = instance.profile
    return InfeasiblePlanError(
        f"no placement fits: SSD capacity {prof.cap_ssd:g} B per device cannot hold the cold "
        f"remainder even with DRAM {prof.cap_dram:g} B and BRAM {prof.cap_bram:g} B filled",
        binding=CAP_SSD)


def solve_exact(instance: PlannerInstance, max_devices: int = 4, max_tables: int = 6,
                max_step: int = 10, n_emb_devices: int | None = None) -> PlannerSolution:
    """Globally optimal plan by enumeration of table partitions and per-device B&B.

    Devices are interchangeable, so tables are enumerated as set partitions
    and EMB cores take the lowest device ids. Ties on (C, c_emb) keep the
    smallest EMB device count, then the first partition and grid choice in
    lexicographic order.
    """
    prof = instance.profile
    M, J = prof.n_devices, instance.n_tables
    steps = [st.step for st in instance.stats]
    if M > max_devices or J > max_tables or max(steps) > max_step:
        raise PlanError(f"instance (M={M}, J={J}, step={max(steps)}) exceeds exact-solver caps "
                        f"(M<={max_devices}, J<={max_tables}, step<={max_step})")
    t0 = time.perf_counter()
    tabs = _tables(instance)
    search = _DeviceSearch(tabs, prof)
    memo: dict[tuple[int, ...], tuple | None] = {}

    def device(members: tuple[int, ...]):
        if members not in memo:
            memo[members] = search.solve(members) if members else (0.0, {})
        return memo[members]

    best_key, best = None, None
    ks = range(1, M) if n_emb_devices is None else [n_emb_devices]
    for k in ks:
        bot, top = mlp_costs(prof, M - k)
        if best_key is not None and max(bot, 0.0) + top > best_key[0]:
            continue
        for blocks in _restricted_growth(J, k):
            groups = [tuple(j for j in range(J) if blocks[j] == b) for b in range(max(blocks) + 1)]
            res = [device(g) for g in groups]
            if any(r is None for r in res):
                continue
            emb = max(r[0] for r in res)
            C = max(bot, emb) + top
            key = (C, emb)
            if best_key is None or key < best_key:
                grid = [None] * J
                for r in res:
                    for j, g in r[1].items():
                        grid[j] = g
                best_key, best = key, (k, blocks, grid)
    if best is None:
        raise _infeasible(instance)
    k, blocks, grid = best
    d = [1] * k + [0] * (M - k)
    cand = PlannerSolution.skeleton(d, list(blocks), grid, steps)
    sol = evaluate(instance, cand)
    sol.meta = {"backend": "exact", "nodes": search.nodes, "partitions_cached": len(memo)}
    log.debug("exact solve: C=%g in %.3fs", sol.C, time.perf_counter() - t0)
    return sol


# -- heuristic solver ---------------------------------------------------------------

class _Flat:
    """Per-table arrays packed end to end so moves of many tables evaluate in one pass."""

    def __init__(self, tabs: list[_Table], prof: HardwareProfile):
        self.step = np.array([tb.step for tb in tabs], dtype=np.int64)
        self.hot = np.array([tb.hot for tb in tabs], dtype=np.int64)
        self.a = np.array([tb.a for tb in tabs], dtype=np.float64)
        self.row_len = np.array([tb.spec.row_len for tb in tabs], dtype=np.int64)
        self.rb = np.array([tb.row_bytes for tb in tabs], dtype=np.int64)
        self.off = np.concatenate([[0], np.cumsum(self.step + 1)[:-1]]).astype(np.int64)
        self.rows = np.concatenate([np.asarray(tb.rows, dtype=np.int64) for tb in tabs])
        self.tt = np.concatenate([np.asarray(tb.tt_cm, dtype=np.int64) for tb in tabs])
        self.t = (prof.t_dram, prof.t_tt, prof.t_ssd)

    def eval(self, j: np.ndarray, i_d: np.ndarray, i_t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Tier costs and (DRAM, BRAM, SSD) bytes, shape (n, 3) each."""
        s, a, n, off = self.step[j], self.a[j], self.row_len[j], self.off[j]
        rd = self.rows[off + i_d]
        end = self.rows[off + i_d + i_t]
        rt = end - rd
        k = np.minimum(s, (rt * s + n - 1) // n)
        tt = np.where(rt > 0, self.tt[off + k], 0)
        td, tb, ts = self.t
        cost = np.stack([a * ((i_d / s) * td), a * ((i_t / s) * tb), a * (((s - i_d - i_t) / s) * ts)], axis=1)
        use = np.stack([rd * self.rb[j], tt, (n - end) * self.rb[j]], axis=1).astype(np.float64)
        return cost, use


class _DeviceGreedy:
    """Split search for the tables of one device.

    Starting from all-SSD: repair SSD overflow, fill the two fast tiers by
    best latency gain per byte (jumps of any length along a tier axis), then
    descend over single-table re-splits in a window and, for small groups,
    joint re-splits of table pairs.
    """

    PAIR_LIMIT = 12

    def __init__(self, flat: _Flat, prof: HardwareProfile, members: Sequence[int]):
        self.flat = flat
        self.members = np.asarray(members, dtype=np.int64)
        self.caps = np.array([prof.cap_dram, prof.cap_bram, prof.cap_ssd])
        n = len(self.members)
        self.sd = np.zeros(n, dtype=np.int64)
        self.st = np.zeros(n, dtype=np.int64)
        self.cost_t, self.use_t = flat.eval(self.members, self.sd, self.st)
        self._sync()

    def _sync(self):
        self.tier = self.cost_t.sum(axis=0)
        self.used = self.use_t.sum(axis=0)

    @property
    def state(self) -> dict[int, tuple[int, int]]:
        return {int(j): (int(d), int(t)) for j, d, t in zip(self.members, self.sd, self.st)}

    @property
    def feasible(self) -> bool:
        return bool(np.all(self.used <= self.caps))

    @property
    def cost(self) -> float:
        return float(self.tier.max()) if self.feasible else math.inf

    def _key(self):
        return float(self.tier.max()), float(self.tier.sum())

    def _moves(self, pos, i_d, i_t):
        """Evaluate moving member ``pos[i]`` to ``(i_d[i], i_t[i])`` with everything else fixed."""
        j = self.members[pos]
        c, u = self.flat.eval(j, i_d, i_t)
        tier = self.tier + c - self.cost_t[pos]
        used = self.used + u - self.use_t[pos]
        ok = np.all((used <= self.caps) | (u <= self.use_t[pos]), axis=1)
        return c, u, tier, used, ok

    def _improves(self, tier, ok):
        mx0, sm0 = self._key()
        tol = _EPS * max(1.0, mx0)
        mx, sm = tier.max(axis=1), tier.sum(axis=1)
        better = ok & ((mx < mx0 - tol) | ((mx <= mx0 + tol) & (sm < sm0 - tol)))
        return better, mx, sm

    def _apply(self, pos, i_d, i_t, c, u):
        self.sd[pos], self.st[pos] = i_d, i_t
        self.cost_t[pos], self.use_t[pos] = c, u
        self._sync()

    # candidate generators: (member position, new i_d, new i_t)
    def _axis(self, axis: int):
        room = self.flat.hot[self.members] - self.sd - self.st
        pos = np.repeat(np.arange(len(self.members)), np.maximum(room, 0))
        if pos.size == 0:
            return pos, pos, pos
        starts = np.concatenate([[0], np.cumsum(np.maximum(room, 0))[:-1]])
        x = np.arange(pos.size) - np.repeat(starts, np.maximum(room, 0)) + 1
        if axis == 0:
            return pos, self.sd[pos] + x, self.st[pos]
        return pos, self.sd[pos], self.st[pos] + x

    def _window(self, r: int, subset=None):
        pos = np.arange(len(self.members)) if subset is None else np.asarray(subset, dtype=np.int64)
        off = np.arange(-r, r + 1)
        od, ot = (v.ravel() for v in np.meshgrid(off, off, indexing="ij"))
        nz = (od != 0) | (ot != 0)
        od, ot = od[nz], ot[nz]
        D = self.sd[pos][:, None] + od[None, :]
        T = self.st[pos][:, None] + ot[None, :]
        hot = self.flat.hot[self.members[pos]][:, None]
        keep = (D >= 0) & (T >= 0) & (D + T <= hot)
        P = np.broadcast_to(pos[:, None], D.shape)
        return P[keep], D[keep], T[keep]

    def _radius(self, large: int) -> int:
        """Whole grid for coarse tables, else a window of ``large`` steps."""
        steps = self.flat.step[self.members]
        return int(steps.max()) if steps.size and steps.max() <= 10 else large

    # phases
    def _repair_ssd(self):
        while self.used[2] > self.caps[2]:
            cands = [self._axis(0), self._axis(1), self._window(self._radius(2))]
            pos, i_d, i_t = (np.concatenate(v) for v in zip(*cands))
            if pos.size == 0:
                return
            c, u, tier, used, _ = self._moves(pos, i_d, i_t)
            freed = self.use_t[pos, 2] - u[:, 2]
            ok = (used[:, 0] <= self.caps[0]) & (used[:, 1] <= self.caps[1]) & (freed > 0)
            if not ok.any():
                return
            idx = np.flatnonzero(ok)
            pick = idx[np.lexsort((tier[idx].max(axis=1), -freed[idx]))[0]]
            self._apply(pos[pick], i_d[pick], i_t[pick], c[pick], u[pick])

    def _fill(self, axis: int):
        """Greedy filling of one fast tier by latency gain per byte.

        Every table keeps its jumps along the axis sorted by gain per byte (a
        jump's gain and bytes depend only on its own table) and offers the
        next untried one to a global heap; a jump is taken when it fits and
        improves the device key.
        """
        n = len(self.members)
        caps = self.caps.tolist()
        tier, used = self.tier.tolist(), self.used.tolist()
        fixed = self.st if axis == 0 else self.sd
        span = self.flat.hot[self.members] - fixed
        # full axis per member: position y means (y, fixed) or (fixed, y)
        pos = np.repeat(np.arange(n), span + 1)
        start = np.concatenate([[0], np.cumsum(span + 1)[:-1]])
        y = np.arange(pos.size) - start[pos]
        other = fixed[pos]
        c, u = self.flat.eval(self.members[pos], *((y, other) if axis == 0 else (other, y)))
        csum = c.sum(axis=1)
        ax_u = u[:, axis]
        cl, ul = c.tolist(), u.tolist()
        cur = (self.sd if axis == 0 else self.st).copy()
        queue: list = [None] * n

        def push_next(p: int):
            q = queue[p]
            if q is not None and q[4] < q[0].size:
                k = q[4]
                q[4] += 1
                heapq.heappush(heap, (-q[1][k], -q[2][k], p, q[3] + 1 + int(q[0][k])))

        def offer(p: int):
            lo, hi = start[p] + cur[p], start[p] + span[p]
            if hi <= lo:
                queue[p] = None
                return
            gain = csum[lo] - csum[lo + 1:hi + 1]
            ratio = gain / np.maximum(ax_u[lo + 1:hi + 1] - ax_u[lo], 1.0)
            order = np.lexsort((-gain, -ratio))
            order = order[gain[order] > 0]
            queue[p] = [order, ratio[order].tolist(), gain[order].tolist(), int(lo), 0]
            push_next(p)

        heap: list = []
        for p in range(n):
            offer(p)
        while heap:
            _, _, p, flat_i = heapq.heappop(heap)
            cc, cu = cl[start[p] + cur[p]], ul[start[p] + cur[p]]
            c_new, u_new = cl[flat_i], ul[flat_i]
            nt = [tier[k] + c_new[k] - cc[k] for k in range(3)]
            nu = [used[k] + u_new[k] - cu[k] for k in range(3)]
            ok = all(nu[k] <= caps[k] or u_new[k] <= cu[k] for k in range(3))
            if ok:
                mx0, sm0 = max(tier), sum(tier)
                tol = _EPS * max(1.0, mx0)
                mx, sm = max(nt), sum(nt)
                ok = mx < mx0 - tol or (mx <= mx0 + tol and sm < sm0 - tol)
            if ok:
                tier, used = nt, nu
                cur[p] = flat_i - start[p]
                offer(p)
            else:
                push_next(p)
        for p in range(n):
            if axis == 0:
                self.sd[p] = cur[p]
            else:
                self.st[p] = cur[p]
            self.cost_t[p] = c[start[p] + cur[p]]
            self.use_t[p] = u[start[p] + cur[p]]
        self._sync()

    def _best_pair(self, r: int):
        n = len(self.members)
        best = None
        for p in range(n):
            for q in range(p + 1, n):
                P = self._window(r, [p])
                Q = self._window(r, [q])
                # include "stay" for each side so pairs generalize single moves
                pd, pt = np.append(P[1], self.sd[p]), np.append(P[2], self.st[p])
                qd, qt = np.append(Q[1], self.sd[q]), np.append(Q[2], self.st[q])
                cp, up = self.flat.eval(np.full(pd.size, self.members[p]), pd, pt)
                cq, uq = self.flat.eval(np.full(qd.size, self.members[q]), qd, qt)
                base_t = self.tier - self.cost_t[p] - self.cost_t[q]
                base_u = self.used - self.use_t[p] - self.use_t[q]
                tier = (base_t + cp[:, None, :] + cq[None, :, :]).reshape(-1, 3)
                U = up[:, None, :] + uq[None, :, :]
                used = (base_u + U).reshape(-1, 3)
                old_u = self.use_t[p] + self.use_t[q]
                ok = np.all((used <= self.caps) | (U.reshape(-1, 3) <= old_u), axis=1)
                better, mx, sm = self._improves(tier, ok)
                if not better.any():
                    continue
                idx = np.flatnonzero(better)
                k = idx[np.lexsort((sm[idx], mx[idx]))[0]]
                key = (mx[k], sm[k])
                if best is None or key < best[0]:
                    a, b = divmod(int(k), qd.size)
                    best = (key, p, q, (pd[a], pt[a], cp[a], up[a]), (qd[b], qt[b], cq[b], uq[b]))
        return best

    def _sweep(self, r: int, max_sweeps: int = 200):
        """Evaluate every member's window at once, then apply each member's best
        move in order of quality, rechecking it against the updated device."""
        for _ in range(max_sweeps):
            pos, i_d, i_t = self._window(r)
            if pos.size == 0:
                return
            c, u, tier, used, ok = self._moves(pos, i_d, i_t)
            better, mx, sm = self._improves(tier, ok)
            idx = np.flatnonzero(better)
            if idx.size == 0:
                return
            idx = idx[np.lexsort((sm[idx], mx[idx]))]
            _, first = np.unique(pos[idx], return_index=True)
            changed = False
            caps = self.caps.tolist()
            tier, used = self.tier.tolist(), self.used.tolist()
            cur_c, cur_u = self.cost_t.tolist(), self.use_t.tolist()
            for n in idx[np.sort(first)].tolist():
                p = int(pos[n])
                cn, un = c[n].tolist(), u[n].tolist()
                nt = [tier[k] + cn[k] - cur_c[p][k] for k in range(3)]
                nu = [used[k] + un[k] - cur_u[p][k] for k in range(3)]
                if not all(nu[k] <= caps[k] or un[k] <= cur_u[p][k] for k in range(3)):
                    continue
                mx0, sm0 = max(tier), sum(tier)
                tol = _EPS * max(1.0, mx0)
                if max(nt) < mx0 - tol or (max(nt) <= mx0 + tol and sum(nt) < sm0 - tol):
                    tier, used = nt, nu
                    cur_c[p], cur_u[p] = cn, un
                    self.sd[p], self.st[p] = i_d[n], i_t[n]
                    changed = True
            if not changed:
                return
            self.cost_t = np.array(cur_c, dtype=np.float64)
            self.use_t = np.array(cur_u, dtype=np.float64)
            self._sync()

    def _polish(self, max_iter: int = 10_000):
        r1 = self._radius(3)
        r2 = self._radius(1)
        if len(self.members) > self.PAIR_LIMIT:
            self._sweep(r1)
            return
        for _ in range(max_iter):
            pos, i_d, i_t = self._window(r1)
            if pos.size:
                c, u, tier, used, ok = self._moves(pos, i_d, i_t)
                better, mx, sm = self._improves(tier, ok)
                if better.any():
                    idx = np.flatnonzero(better)
                    k = idx[np.lexsort((sm[idx], mx[idx]))[0]]
                    self._apply(pos[k], i_d[k], i_t[k], c[k], u[k])
                    continue
            if len(self.members) < 2 or len(self.members) > self.PAIR_LIMIT:
                return
            best = self._best_pair(r2)
            if best is None:
                return
            _, p, q, mp, mq = best
            self._apply(p, *mp)
            self._apply(q, *mq)

    def run(self) -> "_DeviceGreedy":
        if len(self.members) == 0:
            return self
        if not self.feasible:
            self._repair_ssd()
        start = (self.sd.copy(), self.st.copy(), self.cost_t.copy(), self.use_t.copy())
        results = []
        for order in ((0, 1), (1, 0)):
            self.sd, self.st, self.cost_t, self.use_t = (v.copy() for v in start)
            self._sync()
            for axis in order:
                self._fill(axis)
            self._polish()
            results.append(((self.cost, float(self.tier.sum())), self.sd.copy(), self.st.copy(),
                            self.cost_t.copy(), self.use_t.copy()))
        _, self.sd, self.st, self.cost_t, self.use_t = min(results, key=lambda r: r[0])
        self._sync()
        return self


def _lpt(tabs: list[_Table], k: int, prof: HardwareProfile) -> list[int]:
    order = sorted(range(len(tabs)), key=lambda j: (-tabs[j].a * prof.t_ssd, j))
    load = [0.0] * k
    ssd = [0] * k
    dev = [0] * len(tabs)
    for j in order:
        fits = [m for m in range(k) if ssd[m] + tabs[j].emb <= prof.cap_ssd]
        pool = fits or list(range(k))
        m = min(pool, key=lambda m: (load[m], m))
        dev[j] = m
        load[m] += tabs[j].a * prof.t_ssd
        ssd[m] += tabs[j].emb
    return dev


def _neighbours(dev: list[int], greedy: list[_DeviceGreedy], k: int, full: bool):
    """Assignments one relocation or one swap away.

    Small instances try every move; large ones only move the eight busiest
    tables of the critical device onto the two least loaded devices.
    """
    J = len(dev)
    if full:
        for j in range(J):
            for m in range(k):
                if m != dev[j]:
                    trial = dev.copy()
                    trial[j] = m
                    yield trial
        for j in range(J):
            for i in range(j + 1, J):
                if dev[i] != dev[j]:
                    trial = dev.copy()
                    trial[i], trial[j] = dev[j], dev[i]
                    yield trial
        return
    costs = [g.cost for g in greedy]
    crit = max(range(k), key=lambda m: (costs[m], -m))
    light = sorted((m for m in range(k) if m != crit), key=lambda m: (costs[m], m))[:2]
    on_crit = [j for j in range(J) if dev[j] == crit]
    on_crit.sort(key=lambda j: -greedy[crit].flat.a[j])
    for j in on_crit[:8]:
        for m in light:
            trial = dev.copy()
            trial[j] = m
            yield trial


class _KSearch:
    """Table-to-device search for a fixed number ``k`` of EMB devices."""

    def __init__(self, flat: _Flat, tabs: list[_Table], prof: HardwareProfile, k: int):
        self.flat, self.prof, self.k, self.J = flat, prof, k, len(tabs)
        self.bot, self.top = mlp_costs(prof, prof.n_devices - k)
        self.memo: dict[tuple[int, ...], _DeviceGreedy] = {}
        self.dev = _lpt(tabs, k, prof)
        self.key, self.greedy = self._assess(self.dev)

    def _device(self, members: tuple[int, ...]) -> _DeviceGreedy:
        if members not in self.memo:
            self.memo[members] = _DeviceGreedy(self.flat, self.prof, members).run()
        return self.memo[members]

    def _assess(self, dev: list[int]):
        groups = [tuple(j for j in range(self.J) if dev[j] == m) for m in range(self.k)]
        greedy = [self._device(g) for g in groups]
        emb = max(g.cost for g in greedy)
        return (max(self.bot, emb) + self.top, emb), greedy

    def improve(self, max_rounds: int, full: bool):
        for _ in range(max_rounds):
            for trial in _neighbours(self.dev, self.greedy, self.k, full):
                tk, tg = self._assess(trial)
                if tk < self.key:
                    self.dev, self.key, self.greedy = trial, tk, tg
                    break
            else:
                return

    def grid(self) -> list[tuple[int, int]]:
        grid = [None] * self.J
        for g in self.greedy:
            for j, s in g.state.items():
                grid[j] = s
        return grid


def solve_heuristic(instance: PlannerInstance, n_emb_devices: int | None = None,
                    local_search: bool = True, max_rounds: int = 20) -> PlannerSolution:
    """Feasible plan for large instances: k-sweep, LPT placement, greedy splits, relocations.

    Small instances get the full relocation and swap neighbourhood for every
    EMB device count; large ones screen every count on the LPT start and
    refine only the two best.
    """
    prof = instance.profile
    M, J = prof.n_devices, instance.n_tables
    tabs = _tables(instance)
    flat = _Flat(tabs, prof)
    steps = [st.step for st in instance.stats]
    t0 = time.perf_counter()
    ks = range(1, M) if n_emb_devices is None else [n_emb_devices]
    full = J * M <= 64
    searches = [_KSearch(flat, tabs, prof, k) for k in ks]
    if local_search:
        chosen = searches if full else sorted(searches, key=lambda s: s.key)[:2]
        for s in chosen:
            s.improve(max_rounds, full)
    best = min(searches, key=lambda s: (s.key, s.k))
    if math.isinf(best.key[0]):
        raise _infeasible(instance)
    d = [1] * best.k + [0] * (M - best.k)
    sol = evaluate(instance, PlannerSolution.skeleton(d, best.dev, best.grid(), steps))
    sol.meta = {"backend": "heuristic"}
    log.debug("heuristic solve: C=%g in %.3fs", sol.C, time.perf_counter() - t0)
    return sol


def solve(instance: PlannerInstance, backend: str = "heuristic", **kw) -> PlannerSolution:
    if backend == "exact":
        return solve_exact(instance, **kw)
    if backend == "heuristic":
        return solve_heuristic(instance, **kw)
    raise ValueError(f"unknown backend {backend!r}")


class ShardPlanner(BaseEstimator):
    """Estimator wrapper: ``fit(instance)`` solves and stores ``plan_``."""

    def __init__(self, backend: str = "heuristic", n_emb_devices: int | None = None):
        self.backend = backend
        self.n_emb_devices = n_emb_devices

    def fit(self, instance: PlannerInstance, y=None):
        if self.backend not in ("exact", "heuristic"):
            raise ValueError(f"unknown backend {self.backend!r}")
        self.plan_ = solve(instance, self.backend, n_emb_devices=self.n_emb_devices)
        self.violations_ = check_plan(instance, self.plan_)
        return self

    def predict(self, table_ids: Sequence[int]) -> list[int]:
        """Device id hosting each table."""
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "plan_")
        pos = {tp.table_id: j for j, tp in enumerate(self.plan_.tables)}
        return [self.plan_.device_of(pos[t]) for t in table_ids]


# -- LP export ----------------------------------------------------------------------

def export_lp(instance: PlannerInstance) -> str:
    """CPLEX-LP text of the full MIP, products with binaries linearized by big-M.

    ``x_dram``/``x_ptr``/``x_rtt`` pick the DRAM end, TT end and TT-size grid
    points; ``z*`` are per-device copies of table quantities gated by ``p``.
    """
    prof = instance.profile
    tabs = _tables(instance)
    M, J = prof.n_devices, len(tabs)
    obj = ["\\ objective: C = max(c_mlp_bot, c_emb) + c_mlp_top", "Minimize", " obj: C", "Subject To"]
    cons: list[str] = []
    bins: list[str] = []
    bounds: list[str] = []

    def add(label: str, expr: str):
        cons.append(f" {label}: {expr}")

    def terms(pairs) -> str:
        parts = []
        for coef, var in pairs:
            if coef == 0:
                continue
            sign = "-" if coef < 0 else "+"
            parts.append(f"{sign} {abs(coef):.12g} {var}")
        s = " ".join(parts) or "0 C"
        return s[2:] if s.startswith("+ ") else s

    cons.append("\\ " + DEVICE_ALLOC)
    add("dev_lo", terms((1, f"d_{m}") for m in range(M)) + " >= 1")
    add("dev_hi", terms((1, f"d_{m}") for m in range(M)) + f" <= {M - 1}")
    bins += [f"d_{m}" for m in range(M)]
    cons.append("\\ " + TABLE_ASSIGN + " / " + EMB_CORE_ONLY)
    for j in range(J):
        add(f"assign_{j}", terms((1, f"p_{m}_{j}") for m in range(M)) + " = 1")
        for m in range(M):
            add(f"emb_only_{m}_{j}", f"p_{m}_{j} - d_{m} <= 0")
            bins.append(f"p_{m}_{j}")
    passes = prof.batch_size / prof.mini_batch
    cons.append("\\ MLP cost: c * (#MLP devices) = t * BS/BS_mini, via one-hot count u_n")
    add("mlp_count", terms([(n, f"u_{n}") for n in range(1, M)] + [(1, f"d_{m}") for m in range(M)]) + f" = {M}")
    add("mlp_onehot", terms((1, f"u_{n}") for n in range(1, M)) + " = 1")
    big_mlp = max(prof.t_mlp_top, prof.t_mlp_bot) * passes + 1
    for n in range(1, M):
        bins.append(f"u_{n}")
        add(f"mlp_top_{n}", f"c_top + {big_mlp:.12g} u_{n} >= {prof.t_mlp_top * passes / n + big_mlp:.12g}")
        add(f"mlp_bot_{n}", f"c_bot + {big_mlp:.12g} u_{n} >= {prof.t_mlp_bot * passes / n + big_mlp:.12g}")
    add("obj_def", "C - c_fnt - c_top >= 0")
    add("fnt_bot", "c_fnt - c_bot >= 0")
    add("fnt_emb", "c_fnt - c_emb >= 0")
    for j, tb in enumerate(tabs):
        s = tb.step
        grid = range(s + 1)
        cons.append(f"\\ table {tb.spec.table_id}: three-tier split on a {s}-step grid")
        for name in ("x_dram", "x_tt", "x_ptr", "x_rtt"):
            add(f"{name}_one_{j}", terms((1, f"{name}_{j}_{i}") for i in grid) + " = 1")
            bins += [f"{name}_{j}_{i}" for i in grid]
        add(f"ptr_{j}", terms([(i, f"x_dram_{j}_{i}") for i in grid] + [(i, f"x_tt_{j}_{i}") for i in grid]
                              + [(-i, f"x_ptr_{j}_{i}") for i in grid]) + " = 0")
        add(f"hot_thr_{j}", terms([(i, f"x_dram_{j}_{i}") for i in grid] + [(i, f"x_tt_{j}_{i}") for i in grid])
            + f" <= {tb.hot}")
        # TT size index covers the TT row fraction (rounded up to the grid)
        add(f"rtt_{j}", terms([(i * tb.spec.row_len, f"x_rtt_{j}_{i}") for i in grid]
                              + [(-s * tb.rows[i], f"x_ptr_{j}_{i}") for i in grid]
                              + [(s * tb.rows[i], f"x_dram_{j}_{i}") for i in grid]) + " >= 0")
        rb = tb.row_bytes
        mem = {
            "md": [(tb.rows[i] * rb, f"x_dram_{j}_{i}") for i in grid],
            "ms": [(-tb.rows[i] * rb, f"x_ptr_{j}_{i}") for i in grid],
            "mb": [(tb.tt_cm[i], f"x_rtt_{j}_{i}") for i in grid],
        }
        lat = {
            "cd": [(tb.a * (i / s) * prof.t_dram, f"x_dram_{j}_{i}") for i in grid],
            "ct": [(tb.a * (i / s) * prof.t_tt, f"x_tt_{j}_{i}") for i in grid],
            "cs": [(-tb.a * (i / s) * prof.t_ssd, f"x_ptr_{j}_{i}") for i in grid],
        }
        const = {"md": 0, "ms": tb.emb, "mb": 0, "cd": 0, "ct": 0, "cs": tb.a * prof.t_ssd}
        upper = {"md": tb.emb, "ms": tb.emb, "mb": max(tb.tt_cm), "cd": tb.a * prof.t_dram,
                 "ct": tb.a * prof.t_tt, "cs": tb.a * prof.t_ssd}
        for q, pairs in {**mem, **lat}.items():
            add(f"{q}_{j}", terms(pairs + [(-1, f"{q}_{j}")]) + f" = {-const[q]:.12g}")
            for m in range(M):
                z, u = f"z{q}_{m}_{j}", upper[q]
                add(f"{z}_a", f"{z} - {u:.12g} p_{m}_{j} <= 0")
                add(f"{z}_b", f"{z} - {q}_{j} <= 0")
                add(f"{z}_c", f"{z} - {q}_{j} - {u:.12g} p_{m}_{j} >= {-u:.12g}")
    cap_of = {"md": (CAP_DRAM, prof.cap_dram), "mb": (CAP_BRAM, prof.cap_bram), "ms": (CAP_SSD, prof.cap_ssd)}
    for m in range(M):
        for q, (label, cap) in cap_of.items():
            cons.append(f"\\ {label}")
            add(f"{label}_{m}", terms((1, f"z{q}_{m}_{j}") for j in range(J)) + f" <= {cap:.12g}")
        for q in ("cd", "ct", "cs"):
            add(f"emb_{q}_{m}", terms([(1, f"z{q}_{m}_{j}") for j in range(J)] + [(-1, "c_emb")]) + " <= 0")
    out = obj + cons + ["Bounds"] + bounds + [" C >= 0"] + ["Binaries"] + [" " + " ".join(bins)] + ["End"]
    return "\n".join(out) + "\n"
