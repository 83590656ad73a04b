"""Access statistics that parameterize the sharding cost model.

Per table: the inverse CDF of accesses over rows in hotness order sampled on
a ``step``-point grid, the average pooling factor, and the TT-core byte size
of a compressed region as a function of its row fraction.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .cores import CoreGeometry, estimate_mlp_latency, estimate_tt_latency
from .trace import AccessTrace, EmbTableSpec, EmptyTraceError
from .tt import TTShape

MAX_STEP = 100


@dataclass
class TableStats:
    table_id: int
    step: int
    icdf: np.ndarray
    avg_pf: float = 0.0
    tt_cm: np.ndarray | None = None
    total_accesses: int = 0
    cold: bool = False

    def rows_at(self, i: int, row_len: int) -> int:
        """Rows needed to cover access fraction ``i/step``."""
        return int(round(float(self.icdf[i]) * row_len))

    def icdf_at(self, f: float) -> float:
        """Piecewise-linear interpolation of the sampled inverse CDF."""
        grid = np.linspace(0.0, 1.0, self.step + 1)
        return float(np.interp(f, grid, self.icdf))

    def to_dict(self) -> dict:
        return {
            "table_id": self.table_id,
            "step": self.step,
            "icdf": [float(v) for v in self.icdf],
            "avg_pf": float(self.avg_pf),
            "tt_cm": None if self.tt_cm is None else [int(v) for v in self.tt_cm],
            "total_accesses": int(self.total_accesses),
            "cold": self.cold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TableStats":
        tt = d.get("tt_cm")
        return cls(int(d["table_id"]), int(d["step"]), np.asarray(d["icdf"], dtype=np.float64),
                   float(d["avg_pf"]), None if tt is None else np.asarray(tt, dtype=np.int64),
                   int(d["total_accesses"]), bool(d.get("cold", False)))


@dataclass
class HardwareProfile:
    """Per-device capacities (bytes) and per-lookup / per-mini-batch latencies (ns)."""

    n_devices: int = 2
    cap_bram: float = 4.325e6
    cap_dram: float = 4e9
    cap_ssd: float = 4e12
    t_dram: float = 50.0
    t_ssd: float = 45_000.0
    t_tt: float = 40.0
    t_mlp_top: float = 0.0
    t_mlp_bot: float = 0.0
    batch_size: int = 1024
    mini_batch: int = 8

    def __post_init__(self):
        if self.n_devices < 2:
            raise ValueError("at least two devices are required (one EMB, one MLP)")
        if min(self.cap_bram, self.cap_dram, self.cap_ssd) < 0:
            raise ValueError("capacities must be >= 0")
        if min(self.t_dram, self.t_ssd, self.t_tt) <= 0:
            raise ValueError("tier latencies must be > 0")
        if min(self.t_mlp_top, self.t_mlp_bot) < 0:
            raise ValueError("MLP latencies must be >= 0")
        if not 1 <= self.mini_batch <= self.batch_size:
            raise ValueError("need 1 <= mini_batch <= batch_size")

    @classmethod
    def from_dict(cls, d: dict) -> "HardwareProfile":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def hotness_order(counts: np.ndarray) -> np.ndarray:
    """Rows by descending access count, ties by ascending row index."""
    return np.argsort(-np.asarray(counts, dtype=np.int64), kind="stable")


def access_counts(trace: AccessTrace, table_id: int) -> np.ndarray:
    spec = trace.spec(table_id)
    return np.bincount(trace.lookups(table_id), minlength=spec.row_len)


def stats_from_counts(counts, table_id: int = 0, max_step: int = MAX_STEP) -> TableStats:
    """Sampled inverse CDF from per-row access counts.

    ``icdf[i]`` is the smallest fraction of hottest rows whose accesses reach
    ``i/step`` of the total; evaluated in integer arithmetic so grid points
    are exact row counts.
    """
    counts = np.asarray(counts, dtype=np.int64)
    row_len = counts.size
    step = min(row_len, max_step)
    total = int(counts.sum())
    if total == 0:
        return TableStats(table_id, step, np.zeros(step + 1), total_accesses=0, cold=True)
    cum = np.cumsum(counts[hotness_order(counts)]) * step
    targets = np.arange(1, step + 1, dtype=np.int64) * total
    k = np.searchsorted(cum, targets, side="left") + 1
    icdf = np.concatenate([[0.0], k / row_len])
    return TableStats(table_id, step, icdf, total_accesses=total)


def inverse_cdf(counts, f: float) -> float:
    """Exact (ungridded) smallest hottest-row fraction covering access fraction ``f``."""
    counts = np.asarray(counts, dtype=np.int64)
    total = counts.sum()
    if f <= 0 or total == 0:
        return 0.0
    cum = np.cumsum(counts[hotness_order(counts)])
    k = int(np.searchsorted(cum, f * total - 1e-9 * total, side="left")) + 1
    return min(k, counts.size) / counts.size


def compute_cdf(trace: AccessTrace, table_id: int, max_step: int = MAX_STEP) -> TableStats:
    return stats_from_counts(access_counts(trace, table_id), table_id, max_step)


def compute_pf(trace: AccessTrace, table_id: int) -> float:
    if trace.n_samples == 0:
        raise EmptyTraceError("pooling factor of an empty trace is undefined")
    return trace.lookups(table_id).size / trace.n_samples


def tt_region_rows(i: int, step: int, row_len: int) -> int:
    return math.ceil(i * row_len / step)


def compute_tt_cm_curve(spec: EmbTableSpec, stats: TableStats, rank: int = 4, d: int = 3,
                        col_factors: Sequence[int] | None = None) -> np.ndarray:
    """TT-core bytes for a region spanning ``i/step`` of the table's rows.

    The curve is made non-decreasing with a running maximum: a smaller region
    always fits the factorization chosen for a larger one.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if d < 2:
        raise ValueError("TT compression needs at least two cores")
    if col_factors is not None and (len(col_factors) != d or math.prod(col_factors) != spec.dim):
        raise ValueError(f"dim {spec.dim} is not factored by {tuple(col_factors)} into {d} factors")
    curve = np.zeros(stats.step + 1, dtype=np.int64)
    for i in range(1, stats.step + 1):
        n = tt_region_rows(i, stats.step, spec.row_len)
        curve[i] = TTShape.for_table(n, spec.dim, d, rank, col_factors).n_params * spec.df
    return np.maximum.accumulate(curve)


def analyze_table(trace: AccessTrace, table_id: int, rank: int = 4, d: int = 3,
                  max_step: int = MAX_STEP) -> TableStats:
    st = compute_cdf(trace, table_id, max_step)
    st.avg_pf = compute_pf(trace, table_id)
    st.tt_cm = compute_tt_cm_curve(trace.spec(table_id), st, rank, d)
    return st


def calibrate_latencies(profile: HardwareProfile, tt_shape: TTShape,
                        top_layers: Sequence[int] | None = None,
                        bottom_layers: Sequence[int] | None = None,
                        geometry: CoreGeometry = CoreGeometry()) -> HardwareProfile:
    """Replace TT and MLP latencies with the analytic core estimates."""
    clk = geometry.clock_ns
    upd = {"t_tt": estimate_tt_latency(tt_shape, geometry) * clk}
    if top_layers:
        upd["t_mlp_top"] = estimate_mlp_latency(top_layers, geometry, profile.mini_batch) * clk
    if bottom_layers:
        upd["t_mlp_bot"] = estimate_mlp_latency(bottom_layers, geometry, profile.mini_batch) * clk
    return replace(profile, **upd)


class AccessProfiler(BaseEstimator):
    """Fit per-table statistics from an access trace.

    After ``fit``: ``stats_`` maps table_id to :class:`TableStats`,
    ``hotness_`` maps table_id to the row order, ``tables_`` holds the specs.
    """

    def __init__(self, tt_rank: int = 4, tt_cores: int = 3, max_step: int = MAX_STEP):
        self.tt_rank = tt_rank
        self.tt_cores = tt_cores
        self.max_step = max_step

    def fit(self, trace: AccessTrace, y=None):
        if not isinstance(trace, AccessTrace):
            raise TypeError("AccessProfiler.fit expects an AccessTrace")
        if trace.n_samples == 0:
            raise EmptyTraceError("cannot profile an empty trace")
        self.tables_ = list(trace.tables)
        self.stats_ = {}
        self.hotness_ = {}
        for spec in trace.tables:
            self.stats_[spec.table_id] = analyze_table(trace, spec.table_id, self.tt_rank,
                                                       self.tt_cores, self.max_step)
            self.hotness_[spec.table_id] = hotness_order(access_counts(trace, spec.table_id))
        return self


# -- stats file ----------------------------------------------------------------

def save_stats(path: str | Path, specs: Sequence[EmbTableSpec], stats: Sequence[TableStats],
               meta: dict | None = None) -> None:
    doc = {"tables": [asdict(s) for s in specs], "stats": [s.to_dict() for s in stats],
           "meta": meta or {}}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_stats(path: str | Path) -> tuple[list[EmbTableSpec], list[TableStats]]:
    doc = json.loads(Path(path).read_text())
    specs = [EmbTableSpec(**t) for t in doc["tables"]]
    stats = [TableStats.from_dict(s) for s in doc["stats"]]
    return specs, stats
