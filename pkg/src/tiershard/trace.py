"""Embedding access traces: data model, file formats and synthetic generation.

A trace holds, for every table, the multi-hot row lookups of each sample in
CSR form (``indptr`` / ``indices``), which keeps 10^5-sample traces cheap to
replay while preserving sample order exactly.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"SCTR"
VERSION = 1


class TraceError(ValueError):
    """Malformed trace input. ``record`` is the 0-based record number."""

    def __init__(self, message: str, record: int | None = None):
        super().__init__(message)
        self.record = record


class TraceBoundsError(TraceError):
    pass


class EmptyTraceError(ValueError):
    pass


@dataclass(frozen=True)
class EmbTableSpec:
    table_id: int
    row_len: int
    dim: int
    df: int = 4
    hot_thr: float = 1.0

    def __post_init__(self):
        if self.row_len < 1 or self.dim < 1 or self.df < 1:
            raise ValueError(f"table {self.table_id}: row_len, dim and df must be >= 1")
        if not 0.0 < self.hot_thr <= 1.0:
            raise ValueError(f"table {self.table_id}: hot_thr must lie in (0, 1], got {self.hot_thr}")

    @property
    def emb_bytes(self) -> int:
        return self.row_len * self.dim * self.df


def hot_threshold_policy(row_lens: Sequence[int], small_frac: float = 1e-4,
                         small_thr: float = 1.0, large_thr: float = 0.99) -> list[float]:
    """Per-table hot_thr: tables smaller than ``small_frac`` of the largest get 1.0."""
    biggest = max(row_lens)
    return [small_thr if r < small_frac * biggest else large_thr for r in row_lens]


class AccessTrace:
    """Per-table row lookups for an ordered list of samples.

    ``indptr[t]`` has ``n_samples + 1`` offsets into ``indices[t]``, both
    int64 arrays aligned with ``tables[t]``.
    """

    def __init__(self, tables: Sequence[EmbTableSpec], indptr: Sequence[np.ndarray],
                 indices: Sequence[np.ndarray], validate: bool = True):
        self.tables = list(tables)
        self.indptr = [np.asarray(p, dtype=np.int64) for p in indptr]
        self.indices = [np.asarray(x, dtype=np.int64) for x in indices]
        if not (len(self.tables) == len(self.indptr) == len(self.indices)):
            raise TraceError("tables, indptr and indices must have equal length")
        ns = {len(p) - 1 for p in self.indptr}
        if len(ns) > 1:
            raise TraceError("all tables must cover the same number of samples")
        self._n = ns.pop() if ns else 0
        self._pos = {spec.table_id: t for t, spec in enumerate(self.tables)}
        if len(self._pos) != len(self.tables):
            raise TraceError("duplicate table_id in trace")
        if validate:
            self._check_bounds()

    @classmethod
    def from_samples(cls, tables: Sequence[EmbTableSpec],
                     samples: Sequence[Sequence[Sequence[int]]]) -> "AccessTrace":
        """Build from ``samples[s][t]`` = list of row indices of table ``t``."""
        indptr, indices = [], []
        for t in range(len(tables)):
            lens = [len(s[t]) for s in samples]
            indptr.append(np.concatenate([[0], np.cumsum(lens, dtype=np.int64)]))
            flat = [i for s in samples for i in s[t]]
            indices.append(np.asarray(flat, dtype=np.int64))
        return cls(tables, indptr, indices)

    def _check_bounds(self):
        for t, spec in enumerate(self.tables):
            idx = self.indices[t]
            if idx.size == 0:
                continue
            bad = np.flatnonzero((idx < 0) | (idx >= spec.row_len))
            if bad.size:
                sample = int(np.searchsorted(self.indptr[t], bad[0], side="right") - 1)
                raise TraceBoundsError(
                    f"sample {sample}: table {spec.table_id} index {int(idx[bad[0]])} "
                    f"out of range [0, {spec.row_len})", record=sample)

    @property
    def n_samples(self) -> int:
        return self._n

    def __len__(self) -> int:
        return self._n

    def position(self, table_id: int) -> int:
        try:
            return self._pos[table_id]
        except KeyError:
            raise KeyError(f"unknown table_id {table_id}") from None

    def spec(self, table_id: int) -> EmbTableSpec:
        return self.tables[self.position(table_id)]

    def lookups(self, table_id: int) -> np.ndarray:
        return self.indices[self.position(table_id)]

    def pooling_factors(self, table_id: int) -> np.ndarray:
        return np.diff(self.indptr[self.position(table_id)])

    def sample(self, s: int) -> list[list[int]]:
        return [self.indices[t][self.indptr[t][s]:self.indptr[t][s + 1]].tolist()
                for t in range(len(self.tables))]

    def take(self, rows: np.ndarray) -> "AccessTrace":
        """Trace restricted to the given sample positions, in the given order."""
        rows = np.asarray(rows, dtype=np.int64)
        indptr, indices = [], []
        for p, x in zip(self.indptr, self.indices):
            starts, stops = p[rows], p[rows + 1]
            lens = stops - starts
            indptr.append(np.concatenate([[0], np.cumsum(lens)]).astype(np.int64))
            if lens.sum():
                sel = np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)])
                indices.append(x[sel])
            else:
                indices.append(np.zeros(0, dtype=np.int64))
        return AccessTrace(self.tables, indptr, indices, validate=False)

    def window(self, start: int, stop: int) -> "AccessTrace":
        return self.take(np.arange(start, stop))

    def __eq__(self, other) -> bool:
        if not isinstance(other, AccessTrace):
            return NotImplemented
        return (self.tables == other.tables
                and all(np.array_equal(a, b) for a, b in zip(self.indptr, other.indptr))
                and all(np.array_equal(a, b) for a, b in zip(self.indices, other.indices)))


# -- synthetic generation ----------------------------------------------------

@dataclass
class SyntheticTraceConfig:
    row_lens: list[int]
    n_samples: int = 10_000
    alpha: float = 1.05
    mean_pf: float | list[float] = 1.0
    dim: int = 64
    df: int = 4
    seed: int = 0
    pf_mode: str = "poisson"
    hot_thr: list[float] | None = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.n_samples < 0:
            raise ValueError("n_samples must be >= 0")
        if self.pf_mode not in ("poisson", "constant"):
            raise ValueError(f"unknown pf_mode {self.pf_mode!r}")
        if any(p < 0 for p in self.mean_pfs):
            raise ValueError("mean PF must be >= 0")
        if not self.row_lens:
            raise ValueError("at least one table is required")

    @property
    def mean_pfs(self) -> list[float]:
        if isinstance(self.mean_pf, (int, float)):
            return [float(self.mean_pf)] * len(self.row_lens)
        if len(self.mean_pf) != len(self.row_lens):
            raise ValueError("mean_pf list must match row_lens")
        return [float(p) for p in self.mean_pf]

    def table_specs(self) -> list[EmbTableSpec]:
        thr = self.hot_thr or hot_threshold_policy(self.row_lens)
        return [EmbTableSpec(t, int(r), self.dim, self.df, float(h))
                for t, (r, h) in enumerate(zip(self.row_lens, thr))]

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTraceConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def zipf_probabilities(n: int, alpha: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -alpha
    return w / w.sum()


def _table_rng(seed: int, table_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, table_id]))


def _generate_table(spec: EmbTableSpec, n_samples: int, alpha: float, mean_pf: float,
                    pf_mode: str, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = _table_rng(seed, spec.table_id)
    perm = rng.permutation(spec.row_len)
    if pf_mode == "constant":
        pf = np.full(n_samples, int(round(mean_pf)), dtype=np.int64)
    else:
        hi = int(math.floor(4 * mean_pf))
        pf = np.clip(rng.poisson(mean_pf, n_samples), 0, hi).astype(np.int64)
    total = int(pf.sum())
    cdf = np.cumsum(zipf_probabilities(spec.row_len, alpha))
    cdf[-1] = 1.0
    ranks = np.searchsorted(cdf, rng.random(total), side="right")
    np.minimum(ranks, spec.row_len - 1, out=ranks)
    indptr = np.concatenate([[0], np.cumsum(pf)]).astype(np.int64)
    return indptr, perm[ranks].astype(np.int64)


def generate_trace(cfg: SyntheticTraceConfig) -> AccessTrace:
    """Zipf(alpha) popularity over a seeded row permutation, per table.

    Each table draws from its own stream seeded by ``(seed, table_id)``, so
    the result does not depend on generation order.
    """
    specs = cfg.table_specs()
    indptr, indices = [], []
    for spec, pf in zip(specs, cfg.mean_pfs):
        p, x = _generate_table(spec, cfg.n_samples, cfg.alpha, pf, cfg.pf_mode, cfg.seed)
        indptr.append(p)
        indices.append(x)
    return AccessTrace(specs, indptr, indices, validate=False)


def subsample(trace: AccessTrace, rate: float, seed: int = 0) -> AccessTrace:
    """Uniform sample of ``round(rate * N)`` samples without replacement, order kept."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"rate must lie in (0, 1], got {rate}")
    n = trace.n_samples
    k = int(math.floor(rate * n + 0.5))
    if k == 0:
        raise EmptyTraceError(f"subsampling {n} samples at rate {rate} leaves none")
    if k == n:
        return trace
    rng = np.random.default_rng(seed)
    rows = np.sort(rng.choice(n, size=k, replace=False))
    return trace.take(rows)


# -- file formats --------------------------------------------------------------

def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".tables.json")


def save_table_specs(specs: Sequence[EmbTableSpec], path: str | Path) -> None:
    Path(path).write_text(json.dumps([asdict(s) for s in specs], indent=1) + "\n")


def load_table_specs(path: str | Path) -> list[EmbTableSpec]:
    try:
        raw = json.loads(Path(path).read_text())
        return [EmbTableSpec(int(r["table_id"]), int(r["row_len"]), int(r["dim"]),
                             int(r["df"]), float(r["hot_thr"])) for r in raw]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise TraceError(f"{path}: bad table-spec file ({exc})") from exc


def save_trace(trace: AccessTrace, path: str | Path, fmt: str = "binary") -> None:
    path = Path(path)
    if fmt == "text":
        save_table_specs(trace.tables, sidecar_path(path))
        with path.open("w") as fh:
            for s in range(trace.n_samples):
                for t, spec in enumerate(trace.tables):
                    row = trace.indices[t][trace.indptr[t][s]:trace.indptr[t][s + 1]]
                    fh.write(f"{s},{spec.table_id},{';'.join(map(str, row.tolist()))}\n")
    elif fmt == "binary":
        path.write_bytes(_encode_binary(trace))
    else:
        raise ValueError(f"unknown trace format {fmt!r}")


def _encode_binary(trace: AccessTrace) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(trace.tables))]
    for s in trace.tables:
        out.append(struct.pack("<IQIId", s.table_id, s.row_len, s.dim, s.df, s.hot_thr))
    out.append(struct.pack("<I", trace.n_samples))
    lens = np.stack([np.diff(p) for p in trace.indptr], axis=1) if trace.tables else None
    for s in range(trace.n_samples):
        for t in range(len(trace.tables)):
            a, b = trace.indptr[t][s], trace.indptr[t][s + 1]
            out.append(struct.pack("<I", int(lens[s, t])))
            out.append(trace.indices[t][a:b].astype("<u4").tobytes())
    return b"".join(out)


def load_trace(path: str | Path, fmt: str = "auto",
               specs: Sequence[EmbTableSpec] | None = None) -> AccessTrace:
    """Read a text or binary trace; indices are validated against the table specs.

    Text traces take their table specs from ``specs`` or the JSON sidecar
    ``<path>.tables.json``.
    """
    path = Path(path)
    data = path.read_bytes()
    if fmt == "auto":
        fmt = "binary" if data[:4] == MAGIC else "text"
    if fmt == "binary":
        return _decode_binary(data)
    if fmt != "text":
        raise ValueError(f"unknown trace format {fmt!r}")
    if specs is None:
        specs = load_table_specs(sidecar_path(path))
    return _parse_text(data.decode(), specs)


def _parse_text(text: str, specs: Sequence[EmbTableSpec]) -> AccessTrace:
    pos = {s.table_id: t for t, s in enumerate(specs)}
    per_sample: dict[int, list[list[int]]] = {}
    last = -1
    for rec, line in enumerate(l for l in text.splitlines() if l.strip() and not l.startswith("#")):
        parts = line.split(",")
        if len(parts) != 3:
            raise TraceError(f"record {rec}: expected 'sample_id,table_id,idx;...'", record=rec)
        try:
            sid, tid = int(parts[0]), int(parts[1])
            idx = [int(v) for v in parts[2].split(";") if v.strip()]
        except ValueError as exc:
            raise TraceError(f"record {rec}: {exc}", record=rec) from None
        if sid < last:
            raise TraceError(f"record {rec}: sample ids must be non-decreasing", record=rec)
        last = sid
        if tid not in pos:
            raise TraceError(f"record {rec}: unknown table_id {tid}", record=rec)
        row_len = specs[pos[tid]].row_len
        for i in idx:
            if not 0 <= i < row_len:
                raise TraceBoundsError(
                    f"record {rec} (sample {sid}): table {tid} index {i} out of range [0, {row_len})",
                    record=rec)
        per_sample.setdefault(sid, [[] for _ in specs])[pos[tid]].extend(idx)
    n = last + 1
    empty = [[] for _ in specs]
    samples = [per_sample.get(s, empty) for s in range(n)]
    return AccessTrace.from_samples(specs, samples)


def _decode_binary(data: bytes) -> AccessTrace:
    if data[:4] != MAGIC:
        raise TraceError("bad magic; not a binary trace", record=0)
    try:
        version, n_tables = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise TraceError(f"unsupported trace version {version}", record=0)
        off = 12
        specs = []
        spec_fmt = struct.Struct("<IQIId")
        for _ in range(n_tables):
            tid, row_len, dim, df, thr = spec_fmt.unpack_from(data, off)
            specs.append(EmbTableSpec(tid, row_len, dim, df, thr))
            off += spec_fmt.size
        (n_samples,) = struct.unpack_from("<I", data, off)
        off += 4
        lens = np.zeros((n_samples, n_tables), dtype=np.int64)
        chunks: list[list[np.ndarray]] = [[] for _ in range(n_tables)]
        for s in range(n_samples):
            for t in range(n_tables):
                (k,) = struct.unpack_from("<I", data, off)
                off += 4
                if off + 4 * k > len(data):
                    raise TraceError(f"sample {s}: truncated index list", record=s)
                arr = np.frombuffer(data, dtype="<u4", count=k, offset=off)
                off += 4 * k
                lens[s, t] = k
                chunks[t].append(arr)
    except struct.error as exc:
        raise TraceError(f"truncated binary trace ({exc})") from None
    indptr = [np.concatenate([[0], np.cumsum(lens[:, t])]) for t in range(n_tables)]
    indices = [np.concatenate(c).astype(np.int64) if c else np.zeros(0, dtype=np.int64)
               for c in chunks]
    return AccessTrace(specs, indptr, indices)
