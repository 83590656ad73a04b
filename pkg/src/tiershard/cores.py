"""Analytic cycle models for the EMB (TT) core and the MLP core."""
from __future__ import annotations

from dataclasses import dataclass
from math import ceil
from typing import Sequence

from .tt import TTShape


@dataclass(frozen=True)
class CoreGeometry:
    emb_tile: tuple[int, int] = (16, 32)
    mlp_pe: tuple[int, int] = (8, 16)
    n_cu: int = 4
    clock_ns: float = 5.0
    mlp_mode: str = "latency"

    def __post_init__(self):
        if min(self.emb_tile + self.mlp_pe) < 1 or self.n_cu < 1:
            raise ValueError("core extents must be >= 1")
        if self.clock_ns <= 0:
            raise ValueError("clock period must be > 0")
        if self.mlp_mode not in ("latency", "throughput"):
            raise ValueError(f"unknown MLP mode {self.mlp_mode!r}")


def tt_stage_shapes(shape: TTShape) -> list[tuple[int, int, int]]:
    """(rows, inner, cols) of each matmul in the row-reconstruction chain."""
    stages = []
    rows = shape.col_factors[0] * shape.ranks[0]
    for k in range(1, shape.d):
        inner = shape.ranks[k]
        cols = shape.col_factors[k] * shape.ranks[k + 1]
        stages.append((rows, inner, cols))
        rows *= shape.col_factors[k]
    return stages


def estimate_tt_latency(shape: TTShape, geometry: CoreGeometry = CoreGeometry()) -> int:
    """Cycles to rebuild one row on the output-stationary tile array.

    Each stage costs ``ceil(rows/tr) * ceil(cols/tc) * inner``; reshapes are
    free (hidden behind the dual-channel input reads). A single-core shape
    still costs one fetch cycle.
    """
    tr, tc = geometry.emb_tile
    cycles = sum(ceil(r / tr) * ceil(c / tc) * inner for r, inner, c in tt_stage_shapes(shape))
    return max(1, cycles)


def mlp_macs(layer_dims: Sequence[int], batch: int) -> int:
    return sum(batch * a * b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


def estimate_mlp_latency(layer_dims: Sequence[int], geometry: CoreGeometry = CoreGeometry(),
                         batch: int = 8, mode: str | None = None, n_cu: int | None = None) -> int:
    """Cycles for ``batch`` inputs through layers ``dims[0] -> dims[1] -> ...``.

    A CU tile covers ``pe_rows`` inputs by ``pe_cols`` outputs and streams the
    input width. ``throughput`` mode splits the batch across CUs, ``latency``
    mode splits each layer's outputs.
    """
    if len(layer_dims) < 2:
        raise ValueError("need at least one layer (two dims)")
    mode = mode or geometry.mlp_mode
    cu = geometry.n_cu if n_cu is None else n_cu
    pr, pc = geometry.mlp_pe
    total = 0
    for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
        if mode == "throughput":
            total += ceil(ceil(batch / cu) / pr) * ceil(d_out / pc) * d_in
        elif mode == "latency":
            total += ceil(batch / pr) * ceil(ceil(d_out / cu) / pc) * d_in
        else:
            raise ValueError(f"unknown MLP mode {mode!r}")
    return total
