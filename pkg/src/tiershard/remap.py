"""Row-index remapping into packed tier-local addresses.

Each entry is a 32-bit word ``device_id << 30 | emb_idx`` where device 0 is
DRAM, 1 the TT-compressed BRAM region and 2 the SSD.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .planner import PlannerSolution

DRAM, BRAM, SSD = 0, 1, 2
IDX_BITS = 30
IDX_MASK = (1 << IDX_BITS) - 1


def pack(device, emb_idx):
    device = np.asarray(device, dtype=np.uint32)
    emb_idx = np.asarray(emb_idx, dtype=np.uint32)
    if np.any(device > SSD):
        raise ValueError("device_id must be 0, 1 or 2")
    if np.any(emb_idx > IDX_MASK):
        raise ValueError("emb_idx does not fit in 30 bits")
    return (device << np.uint32(IDX_BITS)) | emb_idx


def unpack(word):
    word = np.asarray(word, dtype=np.uint32)
    return word >> np.uint32(IDX_BITS), word & np.uint32(IDX_MASK)


@dataclass
class RemapTable:
    table_id: int
    entries: np.ndarray  # uint32, one per raw row

    @property
    def row_len(self) -> int:
        return int(self.entries.size)

    def resolve(self, raw_index: int) -> tuple[int, int]:
        if not 0 <= raw_index < self.row_len:
            raise IndexError(f"table {self.table_id}: row {raw_index} out of range [0, {self.row_len})")
        dev, idx = unpack(self.entries[raw_index])
        return int(dev), int(idx)

    def devices(self) -> np.ndarray:
        return unpack(self.entries)[0].astype(np.int64)

    def tier_counts(self) -> tuple[int, int, int]:
        c = np.bincount(self.devices(), minlength=3)
        return int(c[0]), int(c[1]), int(c[2])

    def __eq__(self, other) -> bool:
        return (isinstance(other, RemapTable) and self.table_id == other.table_id
                and np.array_equal(self.entries, other.entries))


def build_table_remap(table_id: int, row_len: int, hotness: np.ndarray,
                      rows_dram: int, rows_tt: int) -> RemapTable:
    """Hottest ``rows_dram`` rows to DRAM, the next ``rows_tt`` to BRAM, the rest to SSD."""
    hotness = np.asarray(hotness, dtype=np.int64)
    if hotness.size != row_len:
        raise ValueError(f"table {table_id}: hotness order has {hotness.size} rows, expected {row_len}")
    if rows_dram < 0 or rows_tt < 0 or rows_dram + rows_tt > row_len:
        raise ValueError(f"table {table_id}: row split ({rows_dram}, {rows_tt}) exceeds {row_len} rows")
    rows_ssd = row_len - rows_dram - rows_tt
    if max(rows_dram, rows_tt, rows_ssd) > IDX_MASK + 1:
        raise ValueError(f"table {table_id}: a tier holds more than 2^30 rows")
    rank = np.arange(row_len, dtype=np.int64)
    dev = np.full(row_len, SSD, dtype=np.int64)
    dev[:rows_dram] = DRAM
    dev[rows_dram:rows_dram + rows_tt] = BRAM
    local = rank.copy()
    local[rows_dram:rows_dram + rows_tt] -= rows_dram
    local[rows_dram + rows_tt:] -= rows_dram + rows_tt
    entries = np.empty(row_len, dtype=np.uint32)
    entries[hotness] = pack(dev, local)
    return RemapTable(table_id, entries)


def build_remap(plan: PlannerSolution, hotness: dict[int, np.ndarray],
                row_lens: dict[int, int]) -> list[RemapTable]:
    return [build_table_remap(tp.table_id, row_lens[tp.table_id], hotness[tp.table_id],
                              tp.rows_dram, tp.rows_tt)
            for tp in plan.tables]


def encode_remap(tables: Sequence[RemapTable]) -> bytes:
    out = []
    for t in tables:
        out.append(struct.pack("<II", t.table_id, t.row_len))
        out.append(t.entries.astype("<u4").tobytes())
    return b"".join(out)


def decode_remap(data: bytes) -> list[RemapTable]:
    out, off = [], 0
    while off < len(data):
        if off + 8 > len(data):
            raise ValueError("truncated remap header")
        tid, n = struct.unpack_from("<II", data, off)
        off += 8
        if off + 4 * n > len(data):
            raise ValueError(f"table {tid}: truncated remap entries")
        out.append(RemapTable(tid, np.frombuffer(data, dtype="<u4", count=n, offset=off).astype(np.uint32)))
        off += 4 * n
    return out


def save_remap(tables: Sequence[RemapTable], path: str | Path) -> None:
    Path(path).write_bytes(encode_remap(tables))


def load_remap(path: str | Path) -> list[RemapTable]:
    return decode_remap(Path(path).read_bytes())
