"""Tensor-train compression of embedding-table regions.

A table region of ``rows x dim`` is viewed as a d-way tensor whose k-th mode
has size ``I_k * J_k`` (row factor times column factor), decomposed by
TT-SVD, and rows are rebuilt by a chain of small matrix products.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted


def balanced_row_factors(n_rows: int, d: int) -> tuple[int, ...]:
    """``d`` near-equal factors whose product is the smallest such cover of ``n_rows``.

    Starts from ``ceil(n_rows ** (1/d))`` everywhere, then shrinks factors
    from the last one while the product still covers ``n_rows``.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if n_rows <= 1:
        return (1,) * d
    f = max(1, int(round(n_rows ** (1.0 / d))))
    while f ** d < n_rows:
        f += 1
    while f > 1 and (f - 1) ** d >= n_rows:
        f -= 1
    factors = [f] * d
    for k in reversed(range(d)):
        while factors[k] > 1:
            trial = math.prod(factors) // factors[k] * (factors[k] - 1)
            if trial < n_rows:
                break
            factors[k] -= 1
    return tuple(factors)


def balanced_dim_factors(dim: int, d: int) -> tuple[int, ...]:
    """Exact factorization of ``dim`` into ``d`` factors, as even as divisors allow."""
    if d < 1 or dim < 1:
        raise ValueError("dim and d must be >= 1")
    out = []
    rest = dim
    for left in range(d, 0, -1):
        if left == 1:
            out.append(rest)
            break
        target = rest ** (1.0 / left)
        divs = [q for q in range(1, rest + 1) if rest % q == 0]
        q = min(divs, key=lambda v: (abs(v - target), v))
        out.append(q)
        rest //= q
    return tuple(sorted(out))


def tt_ranks(row_factors: Sequence[int], col_factors: Sequence[int], max_rank: int) -> tuple[int, ...]:
    """Ranks reached by sequential truncated SVD, capped at ``max_rank``."""
    modes = [i * j for i, j in zip(row_factors, col_factors)]
    d = len(modes)
    ranks = [1]
    for k in range(1, d):
        right = math.prod(modes[k:])
        ranks.append(min(max_rank, ranks[-1] * modes[k - 1], right))
    ranks.append(1)
    return tuple(ranks)


@dataclass(frozen=True)
class TTShape:
    row_factors: tuple[int, ...]
    col_factors: tuple[int, ...]
    ranks: tuple[int, ...]

    def __post_init__(self):
        d = len(self.row_factors)
        if d < 1 or len(self.col_factors) != d or len(self.ranks) != d + 1:
            raise ValueError("TTShape needs d row factors, d column factors and d+1 ranks")
        if self.ranks[0] != 1 or self.ranks[-1] != 1:
            raise ValueError("boundary ranks must be 1")
        if min(self.row_factors + self.col_factors + self.ranks) < 1:
            raise ValueError("all factors and ranks must be >= 1")

    @classmethod
    def build(cls, row_factors: Sequence[int], col_factors: Sequence[int], max_rank: int) -> "TTShape":
        if max_rank < 1:
            raise ValueError("max_rank must be >= 1")
        return cls(tuple(row_factors), tuple(col_factors), tt_ranks(row_factors, col_factors, max_rank))

    @classmethod
    def for_table(cls, n_rows: int, dim: int, d: int = 3, max_rank: int = 4,
                  col_factors: Sequence[int] | None = None) -> "TTShape":
        if col_factors is None:
            col_factors = balanced_dim_factors(dim, d)
        elif len(col_factors) != d or math.prod(col_factors) != dim:
            raise ValueError(f"column factors {tuple(col_factors)} do not factor dim={dim} into {d}")
        return cls.build(balanced_row_factors(n_rows, d), col_factors, max_rank)

    @property
    def d(self) -> int:
        return len(self.row_factors)

    @property
    def n_rows(self) -> int:
        return math.prod(self.row_factors)

    @property
    def dim(self) -> int:
        return math.prod(self.col_factors)

    def core_shapes(self) -> list[tuple[int, int, int, int]]:
        r = self.ranks
        return [(r[k], self.row_factors[k], self.col_factors[k], r[k + 1]) for k in range(self.d)]

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for s in self.core_shapes())

    def row_digits(self, index) -> np.ndarray:
        """Mixed-radix digits of row indices, most significant factor first."""
        idx = np.asarray(index, dtype=np.int64)
        digits = np.empty(idx.shape + (self.d,), dtype=np.int64)
        rest = idx.copy()
        for k in reversed(range(self.d)):
            digits[..., k] = rest % self.row_factors[k]
            rest //= self.row_factors[k]
        return digits

    def row_index(self, digits) -> np.ndarray:
        digits = np.asarray(digits, dtype=np.int64)
        out = np.zeros(digits.shape[:-1], dtype=np.int64)
        for k in range(self.d):
            out = out * self.row_factors[k] + digits[..., k]
        return out


@dataclass
class TTCores:
    shape: TTShape
    cores: list[np.ndarray]

    def __post_init__(self):
        if len(self.cores) != self.shape.d:
            raise ValueError("core count does not match shape")
        for k, (g, s) in enumerate(zip(self.cores, self.shape.core_shapes())):
            if g.shape != s:
                raise ValueError(f"core {k} has extents {g.shape}, expected {s}")
            if not np.all(np.isfinite(g)):
                raise ValueError(f"core {k} contains non-finite values")

    @property
    def n_params(self) -> int:
        return self.shape.n_params


def decompose(region, shape: TTShape, max_rank: int | None = None) -> TTCores:
    """TT-SVD of a ``rows x dim`` region; rows are zero-padded up to ``prod(I_k)``.

    Ranks follow ``shape.ranks`` unless ``max_rank`` is given, in which case
    they are recomputed from the factors. SVD runs in float64; cores are
    stored as float32.
    """
    region = np.asarray(region, dtype=np.float64)
    if region.ndim != 2:
        raise ValueError("region must be a 2-D matrix")
    if max_rank is not None:
        shape = TTShape.build(shape.row_factors, shape.col_factors, max_rank)
    rows, dim = region.shape
    if rows > shape.n_rows:
        raise ValueError(f"{rows} rows exceed the {shape.n_rows} rows the row factors cover")
    if dim != shape.dim:
        raise ValueError(f"dim {dim} does not equal the column factor product {shape.dim}")
    d = shape.d
    padded = np.zeros((shape.n_rows, dim))
    padded[:rows] = region
    # [i_1..i_d, j_1..j_d] -> [i_1, j_1, ..., i_d, j_d]
    t = padded.reshape(shape.row_factors + shape.col_factors)
    t = t.transpose([a for k in range(d) for a in (k, d + k)])
    modes = [i * j for i, j in zip(shape.row_factors, shape.col_factors)]
    cores = []
    c = t.reshape(-1)
    for k in range(d - 1):
        r_in, r_out = shape.ranks[k], shape.ranks[k + 1]
        c = c.reshape(r_in * modes[k], -1)
        u, s, vt = np.linalg.svd(c, full_matrices=False)
        u, s, vt = u[:, :r_out], s[:r_out], vt[:r_out]
        u = u * (s > 0)  # directions with zero energy carry nothing; keep them zero
        cores.append(u.reshape(r_in, shape.row_factors[k], shape.col_factors[k], r_out))
        c = s[:, None] * vt
    cores.append(c.reshape(shape.ranks[d - 1], shape.row_factors[-1], shape.col_factors[-1], 1))
    return TTCores(shape, [g.astype(np.float32) for g in cores])


def _check_rows(cores: TTCores, indices: np.ndarray):
    if indices.size and (indices.min() < 0 or indices.max() >= cores.shape.n_rows):
        bad = indices[(indices < 0) | (indices >= cores.shape.n_rows)][0]
        raise IndexError(f"row {int(bad)} out of range [0, {cores.shape.n_rows})")


def reconstruct_row(cores: TTCores, i: int) -> np.ndarray:
    """One row via the unfold/multiply/reshape chain of the EMB core."""
    _check_rows(cores, np.asarray([i]))
    shape = cores.shape
    digits = shape.row_digits(i)
    g = cores.cores
    acc = g[0][:, digits[0], :, :].astype(np.float64).reshape(-1, shape.ranks[1])
    for k in range(1, shape.d):
        u = g[k][:, digits[k], :, :].astype(np.float64).reshape(shape.ranks[k], -1)
        acc = (acc @ u).reshape(-1, shape.ranks[k + 1])
    return acc.reshape(shape.dim)


def reconstruct_batch(cores: TTCores, indices) -> np.ndarray:
    """Rows for many indices at once; fails before computing anything on a bad index."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    _check_rows(cores, idx)
    shape = cores.shape
    if idx.size == 0:
        return np.zeros((0, shape.dim))
    digits = shape.row_digits(idx)
    g = cores.cores
    b = idx.size
    # acc: (B, prefix_cols, R_k)
    acc = g[0][0, digits[:, 0], :, :].astype(np.float64)
    for k in range(1, shape.d):
        u = g[k][:, digits[:, k], :, :].astype(np.float64)  # (R_{k-1}, B, J_k, R_k)
        u = u.transpose(1, 0, 2, 3).reshape(b, shape.ranks[k], -1)
        acc = np.matmul(acc, u).reshape(b, -1, shape.ranks[k + 1])
    return acc.reshape(b, shape.dim)


def full_reconstruction(cores: TTCores, rows: int | None = None) -> np.ndarray:
    n = cores.shape.n_rows if rows is None else rows
    return reconstruct_batch(cores, np.arange(n))


def reconstruction_error(region, cores: TTCores) -> float:
    """Relative Frobenius error over the real rows; absolute norm for an all-zero region."""
    region = np.asarray(region, dtype=np.float64)
    approx = full_reconstruction(cores, region.shape[0])
    err = np.linalg.norm(region - approx)
    ref = np.linalg.norm(region)
    return float(err / ref) if ref > 0 else float(err)


# -- core file -----------------------------------------------------------------

def save_cores(cores: TTCores, path: str | Path) -> None:
    s = cores.shape
    head = struct.pack(f"<I{s.d}I{s.d}I{s.d + 1}I", s.d, *s.row_factors, *s.col_factors, *s.ranks)
    body = b"".join(np.ascontiguousarray(g, dtype="<f4").tobytes() for g in cores.cores)
    Path(path).write_bytes(head + body)


def load_cores(path: str | Path) -> TTCores:
    data = Path(path).read_bytes()
    (d,) = struct.unpack_from("<I", data, 0)
    vals = struct.unpack_from(f"<{3 * d + 1}I", data, 4)
    shape = TTShape(tuple(vals[:d]), tuple(vals[d:2 * d]), tuple(vals[2 * d:]))
    off = 4 + 4 * (3 * d + 1)
    cores = []
    for cs in shape.core_shapes():
        n = math.prod(cs)
        cores.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(cs).astype(np.float32))
        off += 4 * n
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes after cores")
    return TTCores(shape, cores)


class TTEmbeddingCompressor(TransformerMixin, BaseEstimator):
    """Fit TT cores to an embedding table; ``transform`` maps row indices to rows.

    Parameters
    ----------
    max_rank : int
        Cap on every internal TT rank.
    n_cores : int
        Number of TT cores ``d``.
    col_factors : tuple of int, optional
        Factorization of the embedding dimension; balanced by default.
    """

    def __init__(self, max_rank: int = 4, n_cores: int = 3, col_factors=None):
        self.max_rank = max_rank
        self.n_cores = n_cores
        self.col_factors = col_factors

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        shape = TTShape.for_table(X.shape[0], X.shape[1], self.n_cores, self.max_rank,
                                  self.col_factors)
        self.cores_ = decompose(X, shape)
        self.n_rows_ = X.shape[0]
        self.compression_ratio_ = X.size / self.cores_.n_params
        return self

    def transform(self, X):
        check_is_fitted(self, "cores_")
        idx = np.asarray(X, dtype=np.int64).reshape(-1)
        if idx.size and idx.max() >= self.n_rows_:
            raise IndexError(f"row {int(idx.max())} out of range [0, {self.n_rows_})")
        return reconstruct_batch(self.cores_, idx)

    def score(self, X, y=None):
        check_is_fitted(self, "cores_")
        return -reconstruction_error(check_array(X, dtype=np.float64), self.cores_)
