"""Trace-driven latency simulation of a sharded multi-device plan.

Per batch, each lookup is routed through the remap table to its tier; a
device's three tiers serve in parallel and EMB devices run in parallel, so

    embedding time = max over EMB devices of max(n_dram*t_dram, n_tt*t_tt, n_ssd*t_ssd)
    batch latency  = max(bottom MLP, embedding) + top MLP + transfer
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cores import CoreGeometry, estimate_mlp_latency, estimate_tt_latency
from .planner import PlannerSolution
from .remap import RemapTable
from .stats import HardwareProfile
from .trace import AccessTrace


__all__ = ["CoreGeometry", "SimReport", "TraceReport", "ShortTraceError", "simulate_batch",
           "simulate_trace", "estimate_tt_latency", "estimate_mlp_latency", "emit_report"]


class ShortTraceError(ValueError):
    pass


@dataclass
class SimReport:
    batch_size: int
    latency_ns: float
    emb_ns: float
    mlp_bot_ns: float
    mlp_top_ns: float
    device_ns: list[float]
    tier_busy_ns: list[list[float]]
    tier_counts: list[int]

    @property
    def ips(self) -> float:
        return self.batch_size / self.latency_ns * 1e9 if self.latency_ns > 0 else float("inf")


@dataclass
class TraceReport:
    batches: list[SimReport] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.batches[0].batch_size

    def _lat(self) -> np.ndarray:
        return np.array([b.latency_ns for b in self.batches])

    @property
    def mean_latency_ns(self) -> float:
        return float(self._lat().mean())

    @property
    def mean_emb_ns(self) -> float:
        return float(np.mean([b.emb_ns for b in self.batches]))

    @property
    def ips(self) -> float:
        return self.batch_size / self.mean_latency_ns * 1e9

    def summary(self) -> dict:
        lat = self._lat()
        counts = np.sum([b.tier_counts for b in self.batches], axis=0)
        return {
            "batch_size": self.batch_size,
            "n_batches": len(self.batches),
            "mean_latency_ns": float(lat.mean()),
            "p50_latency_ns": float(np.percentile(lat, 50)),
            "p99_latency_ns": float(np.percentile(lat, 99)),
            "mean_emb_ns": self.mean_emb_ns,
            "ips": self.ips,
            "tier_counts": [int(c) for c in counts],
        }

    def to_csv(self) -> str:
        n_dev = len(self.batches[0].device_ns)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["batch_id", "latency_ns", "emb_ns", "n_dram", "n_tt", "n_ssd"]
                   + [f"dev{m}_ns" for m in range(n_dev)])
        for i, b in enumerate(self.batches):
            w.writerow([i, repr(b.latency_ns), repr(b.emb_ns), *b.tier_counts]
                       + [repr(v) for v in b.device_ns])
        return buf.getvalue()


class _Router:
    """Per-table tier of every raw row plus the owning device."""

    def __init__(self, plan: PlannerSolution, remap: Sequence[RemapTable] | dict[int, RemapTable],
                 trace: AccessTrace):
        by_id = remap if isinstance(remap, dict) else {r.table_id: r for r in remap}
        self.n_dev = len(plan.d)
        self.emb_devices = [m for m, v in enumerate(plan.d) if v]
        self.n_mlp = self.n_dev - len(self.emb_devices)
        self.routes = []
        for j, tp in enumerate(plan.tables):
            if tp.table_id not in by_id:
                raise KeyError(f"no remap for table {tp.table_id}")
            dev = plan.device_of(j)
            if dev is None:
                raise ValueError(f"table {tp.table_id} is not placed on exactly one device")
            self.routes.append((trace.position(tp.table_id), dev, by_id[tp.table_id].devices()))
        known = {tp.table_id for tp in plan.tables}
        unknown = [s.table_id for s in trace.tables if s.table_id not in known]
        if unknown:
            raise KeyError(f"trace references tables missing from the plan: {unknown}")


def _simulate_range(router: _Router, trace: AccessTrace, start: int, stop: int,
                    profile: HardwareProfile, transfer_ns: float) -> SimReport:
    counts = np.zeros((router.n_dev, 3), dtype=np.int64)
    for pos, dev, tiers in router.routes:
        p = trace.indptr[pos]
        idx = trace.indices[pos][p[start]:p[stop]]
        if idx.size:
            counts[dev] += np.bincount(tiers[idx], minlength=3)
    lat = np.array([profile.t_dram, profile.t_tt, profile.t_ssd])
    busy = counts * lat
    dev_ns = busy.max(axis=1)
    emb = float(max((dev_ns[m] for m in router.emb_devices), default=0.0))
    bs = stop - start
    passes = bs / profile.mini_batch
    bot = profile.t_mlp_bot * passes / router.n_mlp if router.n_mlp else 0.0
    top = profile.t_mlp_top * passes / router.n_mlp if router.n_mlp else 0.0
    latency = max(bot, emb) + top + transfer_ns
    return SimReport(bs, latency, emb, bot, top, [float(v) for v in dev_ns],
                     busy.tolist(), [int(v) for v in counts.sum(axis=0)])


def simulate_batch(plan: PlannerSolution, remap, window: AccessTrace, profile: HardwareProfile,
                   transfer_ns: float = 0.0) -> SimReport:
    if window.n_samples == 0:
        raise ShortTraceError("empty batch window")
    return _simulate_range(_Router(plan, remap, window), window, 0, window.n_samples, profile, transfer_ns)


def simulate_trace(plan: PlannerSolution, remap, trace: AccessTrace, profile: HardwareProfile,
                   transfer_ns: float = 0.0, batch_size: int | None = None) -> TraceReport:
    """Simulate consecutive full batches; a trailing partial batch is dropped."""
    bs = batch_size or profile.batch_size
    n = trace.n_samples // bs
    if n == 0:
        raise ShortTraceError(f"trace has {trace.n_samples} samples, fewer than one batch of {bs}")
    router = _Router(plan, remap, trace)
    return TraceReport([_simulate_range(router, trace, b * bs, (b + 1) * bs, profile, transfer_ns)
                        for b in range(n)])


def save_report(report: TraceReport, csv_path: str | Path, json_path: str | Path) -> None:
    Path(csv_path).write_text(report.to_csv())
    Path(json_path).write_text(json.dumps(report.summary(), indent=1) + "\n")


def emit_report(summaries: Sequence[dict], names: Sequence[str] | None = None) -> list[dict]:
    """Comparison rows {config, mean latency, IPS, speedup vs the first row}."""
    if not summaries:
        raise ValueError("need at least one report")
    sizes = {s["batch_size"] for s in summaries}
    if len(sizes) > 1:
        raise ValueError(f"reports use different batch sizes {sorted(sizes)}; not comparable")
    names = list(names) if names else [f"run{i}" for i in range(len(summaries))]
    base = summaries[0]["mean_latency_ns"]
    return [{"config": n, "mean_latency_ns": s["mean_latency_ns"], "ips": s["ips"],
             "speedup": base / s["mean_latency_ns"]} for n, s in zip(names, summaries)]


def format_table(rows: Sequence[dict]) -> str:
    head = f"{'config':<16}{'mean_latency_ns':>18}{'ips':>16}{'speedup':>10}"
    lines = [head]
    for r in rows:
        lines.append(f"{r['config']:<16}{r['mean_latency_ns']:>18.1f}{r['ips']:>16.1f}{r['speedup']:>10.2f}")
    return "\n".join(lines)
