import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import tt_element, tt_param_count
from tiershard.stats import compute_tt_cm_curve, stats_from_counts
from tiershard.trace import EmbTableSpec
from tiershard.tt import (TTCores, TTEmbeddingCompressor, TTShape, balanced_row_factors, decompose,
                          full_reconstruction, load_cores, reconstruct_batch, reconstruct_row,
                          reconstruction_error, save_cores)


def _full_rank(rows, dim, d=3):
    base = TTShape.for_table(rows, dim, d, 1)
    return TTShape.build(base.row_factors, base.col_factors, 10**6)


def test_batch_matches_naive_elementwise():
    rng = np.random.default_rng(0)
    for _ in range(5):
        rows, dim = int(rng.integers(2, 65)), int(rng.choice([4, 8, 16]))
        region = rng.standard_normal((rows, dim))
        cores = decompose(region, TTShape.for_table(rows, dim, 3, 3))
        got = full_reconstruction(cores, rows)
        want = np.array([[tt_element(cores, i, j) for j in range(dim)] for i in range(rows)])
        assert np.allclose(got, want, atol=1e-5, rtol=1e-5)


def test_full_rank_exact():
    region = np.random.default_rng(1).standard_normal((8, 4))
    cores = decompose(region, _full_rank(8, 4))
    assert reconstruction_error(region, cores) <= 1e-5
    for i in range(8):
        assert np.allclose(reconstruct_row(cores, i), region[i], atol=1e-5)


def test_rank_one_exact():
    rng = np.random.default_rng(2)
    # TT rank 1 under the (i_k, j_k) mode map needs Kronecker-factored u and v
    shape = TTShape.build((3, 3, 3), (2, 2, 2), 1)
    u = np.kron(np.kron(rng.standard_normal(3), rng.standard_normal(3)), rng.standard_normal(3))
    v = np.kron(np.kron(rng.standard_normal(2), rng.standard_normal(2)), rng.standard_normal(2))
    region = np.outer(u, v)
    assert reconstruction_error(region, decompose(region, shape)) <= 1e-5
    # with a single core any rank-1 matrix is representable
    region = np.outer(rng.standard_normal(27), rng.standard_normal(8))
    assert reconstruction_error(region, decompose(region, TTShape.build((27,), (8,), 1))) <= 1e-5


def test_zero_matrix():
    cores = decompose(np.zeros((9, 4)), TTShape.for_table(9, 4, 2, 2))
    assert all(not g.any() for g in cores.cores)
    assert reconstruction_error(np.zeros((9, 4)), cores) == 0.0


def test_single_core_identity():
    region = np.arange(12, dtype=float).reshape(3, 4)
    cores = decompose(region, TTShape.build((3,), (4,), 1))
    for i in range(3):
        assert np.array_equal(reconstruct_row(cores, i), region[i])


def test_max_index_and_bounds():
    region = np.random.default_rng(3).standard_normal((64, 8))
    cores = decompose(region, _full_rank(64, 8))
    last = cores.shape.n_rows - 1
    assert np.allclose(reconstruct_row(cores, last), region[last], atol=1e-4)
    with pytest.raises(IndexError):
        reconstruct_row(cores, last + 1)
    with pytest.raises(IndexError):
        reconstruct_batch(cores, [0, 1, last + 1])


def test_batch_cases():
    region = np.random.default_rng(4).standard_normal((16, 4))
    cores = decompose(region, TTShape.for_table(16, 4, 2, 2))
    two = reconstruct_batch(cores, [5, 5])
    assert np.array_equal(two[0], two[1])
    assert np.allclose(reconstruct_batch(cores, np.arange(16)), full_reconstruction(cores))
    assert reconstruct_batch(cores, []).shape == (0, 4)
    assert np.allclose(reconstruct_batch(cores, [7])[0], reconstruct_row(cores, 7))


def test_rank_sweep_monotone():
    region = np.random.default_rng(5).standard_normal((64, 16))
    base = TTShape.for_table(64, 16, 3, 1)
    errs = [reconstruction_error(region, decompose(region, base, max_rank=r)) for r in range(1, 33)]
    assert all(b <= a + 1e-6 for a, b in zip(errs, errs[1:]))
    assert errs[-1] <= 1e-5
    assert errs[31] <= errs[3]


def test_shape_errors():
    with pytest.raises(ValueError):
        decompose(np.zeros((10, 4)), TTShape.for_table(8, 4, 2, 2))
    with pytest.raises(ValueError):
        decompose(np.zeros((8, 6)), TTShape.for_table(8, 4, 2, 2))
    with pytest.raises(ValueError):
        TTShape((2, 2), (2, 2), (2, 2, 1))
    shape = TTShape.for_table(8, 4, 2, 2)
    bad = [np.zeros(s, dtype=np.float32) for s in shape.core_shapes()]
    bad[0][0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        TTCores(shape, bad)
    with pytest.raises(ValueError):
        TTCores(shape, bad[:1])


def test_param_count_matches_curve():
    for rows, dim, rank, d in [(4096, 64, 4, 3), (1000, 16, 2, 2), (77, 8, 8, 3)]:
        shape = TTShape.for_table(rows, dim, d, rank)
        assert shape.n_params == tt_param_count(shape.row_factors, shape.col_factors, rank)
        st_ = stats_from_counts(np.ones(rows, dtype=int))
        curve = compute_tt_cm_curve(EmbTableSpec(0, rows, dim, 4), st_, rank, d)
        assert curve[-1] == shape.n_params * 4


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5000), st.integers(1, 4))
def test_mixed_radix_bijection(n_rows, d):
    shape = TTShape.build(balanced_row_factors(n_rows, d), (1,) * d, 2)
    assert shape.n_rows >= n_rows
    idx = np.arange(shape.n_rows)
    digits = shape.row_digits(idx)
    assert np.array_equal(shape.row_index(digits), idx)
    assert all((digits[:, k] < f).all() for k, f in enumerate(shape.row_factors))


def test_core_file_round_trip(tmp_path):
    region = np.random.default_rng(6).standard_normal((20, 8))
    cores = decompose(region, TTShape.for_table(20, 8, 3, 3))
    path = tmp_path / "c.tt"
    save_cores(cores, path)
    back = load_cores(path)
    assert back.shape == cores.shape
    assert all(np.array_equal(a, b) for a, b in zip(back.cores, cores.cores))
    path.write_bytes(path.read_bytes() + b"\0\0\0\0")
    with pytest.raises(ValueError):
        load_cores(path)


def test_compressor_estimator():
    X = np.random.default_rng(7).standard_normal((30, 8))
    est = TTEmbeddingCompressor(max_rank=64, n_cores=2)
    assert est.get_params()["max_rank"] == 64
    est.fit(X)
    assert np.allclose(est.transform([0, 29]), X[[0, 29]], atol=1e-4)
    assert est.score(X) > -1e-5
    with pytest.raises(IndexError):
        est.transform([30])
