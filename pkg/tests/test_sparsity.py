import collections
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import best_mask_errors
from saten.errors import DataError, ParameterError, ShapeError
from saten.sparsity import (
    CoordinateResidual,
    RowListResidual,
    TokenFrequencyTable,
    count_token_frequencies,
    empty_residual,
    mask_rows,
    mask_two_four,
    mask_unstructured,
    read_token_stream,
    sparse_matvec_t,
    sparse_param_count,
)
from saten.tensor_core import MulCounter


def kept_set(e):
    rows, cols = e.positions()
    return set(zip(rows.tolist(), cols.tolist()))


# --- unstructured -------------------------------------------------------------

def test_unstructured_boundaries():
    r = np.random.default_rng(0).standard_normal((5, 6))
    assert mask_unstructured(r, 0.0).nnz == 0
    full = mask_unstructured(r, 1.0)
    assert full.nnz == 30
    np.testing.assert_array_equal(full.to_dense(), r)


def test_unstructured_two_of_four():
    e = mask_unstructured(np.array([[3.0, -1.0], [0.5, -2.0]]), 0.5)
    assert kept_set(e) == {(0, 0), (1, 1)}
    np.testing.assert_array_equal(e.values, [3.0, -2.0])


def test_unstructured_full_sort_oracle():
    r = np.random.default_rng(1).standard_normal((20, 20))
    e = mask_unstructured(r, 0.1)
    assert e.nnz == 40
    support = e.support()
    assert np.abs(r[support]).min() >= np.abs(r[~support]).max()


def test_unstructured_floor_rounding():
    r = np.random.default_rng(2).standard_normal((7, 3))
    assert mask_unstructured(r, 0.1).nnz == 2   # floor(2.1)
    assert mask_unstructured(r, 3 / 21).nnz == 3   # not lost to roundoff


def test_unstructured_ties_prefer_smaller_index():
    e = mask_unstructured(np.ones((3, 3)), 4 / 9)
    assert kept_set(e) == {(0, 0), (0, 1), (0, 2), (1, 0)}


def test_unstructured_stores_no_zeros():
    r = np.zeros((4, 4))
    r[1, 2] = 5.0
    e = mask_unstructured(r, 0.5)
    assert e.nnz == 1 and kept_set(e) == {(1, 2)}


def test_unstructured_density_range():
    with pytest.raises(ParameterError):
        mask_unstructured(np.ones((2, 2)), 1.5)
    with pytest.raises(ShapeError):
        mask_unstructured(np.ones(4), 0.5)


def test_coordinate_rejects_unsorted():
    with pytest.raises(ShapeError):
        CoordinateResidual(2, 2, np.array([1, 0]), np.array([0, 0]), np.array([1.0, 2.0]))


def test_unstructured_error_monotone_in_density():
    r = np.random.default_rng(3).standard_normal((12, 10))
    errs = [np.linalg.norm(r - mask_unstructured(r, rho).to_dense())
            for rho in np.linspace(0, 1, 41)]
    assert all(a >= b for a, b in itertools.pairwise(errs))


def test_unstructured_optimal_small():
    rng = np.random.default_rng(4)
    for _ in range(5):
        r = rng.standard_normal((4, 4))
        best = best_mask_errors(r)
        for count in range(17):
            e = mask_unstructured(r, count / 16)
            assert e.nnz == count
            err = np.linalg.norm(r - e.to_dense())
            assert err == pytest.approx(best[count], abs=1e-12)


# --- 2:4 -----------------------------------------------------------------------

def test_two_four_single_column():
    e = mask_two_four(np.array([[1.0], [-5.0], [2.0], [0.1]]))
    assert kept_set(e) == {(1, 0), (2, 0)}
    np.testing.assert_array_equal(e.to_dense().ravel(), [0, -5, 2, 0])


def test_two_four_ties():
    e = mask_two_four(np.full((4, 1), 0.7))
    assert kept_set(e) == {(0, 0), (1, 0)}


def test_two_four_per_group_oracle():
    r = np.random.default_rng(5).standard_normal((16, 8))
    e = mask_two_four(r)
    support = e.support()
    assert e.density() == 0.5
    for g in range(4):
        for c in range(8):
            block = r[4 * g:4 * g + 4, c]
            keep = support[4 * g:4 * g + 4, c]
            assert keep.sum() == 2
            assert np.abs(block[keep]).min() >= np.abs(block[~keep]).max()


def test_two_four_indices_distinct_and_in_range():
    e = mask_two_four(np.random.default_rng(6).standard_normal((12, 5)))
    idx = e.group_index
    assert idx.dtype == np.uint8 and idx.max() <= 3
    assert np.all(idx[:, 0, :] < idx[:, 1, :])


@pytest.mark.parametrize("rows,kept_tail", [(5, 1), (6, 1), (7, 2), (3, 2), (2, 1)])
def test_two_four_remainder(rows, kept_tail):
    r = np.random.default_rng(rows).standard_normal((rows, 3))
    e = mask_two_four(r)
    support = e.support()
    tail = rows % 4
    assert np.all(support[rows - tail:].sum(axis=0) == kept_tail)
    assert e.nnz == 3 * (2 * (rows // 4) + kept_tail)
    for c in range(3):
        block, keep = r[rows - tail:, c], support[rows - tail:, c]
        if (~keep).any():
            assert np.abs(block[keep]).min() >= np.abs(block[~keep]).max()


# --- rows ----------------------------------------------------------------------

def test_rows_bert_vocab_density():
    vocab = 30522
    counts = np.random.default_rng(7).integers(0, 1000, size=vocab)
    r = np.zeros((vocab, 4))
    e = mask_rows(r, TokenFrequencyTable(counts), 50)
    assert e.nnz == 200
    assert float(f"{e.density():.4g}") == pytest.approx(0.001638)
    assert round(e.density(), 4) == 0.0016


def test_rows_all_rows_is_full_residual():
    r = np.random.default_rng(8).standard_normal((6, 3))
    e = mask_rows(r, TokenFrequencyTable(np.arange(6)), 6)
    np.testing.assert_array_equal(e.to_dense(), r)


def test_rows_zipf_matches_histogram():
    rng = np.random.default_rng(9)
    vocab = 500
    stream = np.minimum(rng.zipf(1.3, size=50_000) - 1, vocab - 1)
    freq = count_token_frequencies(stream, vocab)
    hist = collections.Counter(stream.tolist())
    expected = sorted(sorted(range(vocab), key=lambda t: (-hist.get(t, 0), t))[:20])
    r = rng.standard_normal((vocab, 7))
    e = mask_rows(r, freq, 20)
    np.testing.assert_array_equal(e.rows, expected)
    np.testing.assert_array_equal(e.to_dense()[expected], r[expected])


def test_rows_frequency_ties():
    freq = TokenFrequencyTable(np.array([3, 5, 5, 1, 5]))
    np.testing.assert_array_equal(freq.most_frequent(2), [1, 2])


def test_rows_vocab_mismatch():
    with pytest.raises(ParameterError, match="rows"):
        mask_rows(np.zeros((4, 2)), TokenFrequencyTable(np.ones(5)), 1)
    with pytest.raises(ParameterError):
        mask_rows(np.zeros((4, 2)), TokenFrequencyTable(np.ones(4)), 5)


def test_row_list_validation():
    with pytest.raises(ShapeError):
        RowListResidual(4, 2, np.array([2, 1]), np.zeros((2, 2)))


# --- token counts --------------------------------------------------------------

def test_count_small_stream():
    freq = count_token_frequencies([1, 1, 2], 4)
    np.testing.assert_array_equal(freq.counts, [0, 2, 1, 0])


def test_count_empty_stream():
    freq = count_token_frequencies([], 5)
    assert freq.vocab_size == 5 and not freq.counts.any()


def test_count_million_ids():
    stream = np.random.default_rng(10).integers(0, 1000, size=10**6)
    freq = count_token_frequencies(stream, 1000)
    reference = [0] * 1000
    for t in stream.tolist():
        reference[t] += 1
    assert freq.counts.tolist() == reference


def test_count_out_of_range_names_position():
    with pytest.raises(DataError, match="position 3"):
        count_token_frequencies([0, 1, 2, 9, 1], 5)
    with pytest.raises(DataError, match="position 0"):
        count_token_frequencies([-1], 5)


def test_read_token_stream(tmp_path):
    text = tmp_path / "ids.txt"
    text.write_text("3\n1\n\n4\n")
    np.testing.assert_array_equal(read_token_stream(text), [3, 1, 4])
    raw = tmp_path / "ids.bin"
    raw.write_bytes(np.array([7, 0, 65536], dtype="<u4").tobytes())
    np.testing.assert_array_equal(read_token_stream(raw, binary=True), [7, 0, 65536])
    bad = tmp_path / "bad.txt"
    bad.write_text("1\nx\n")
    with pytest.raises(DataError, match=":2:"):
        read_token_stream(bad)
    (tmp_path / "odd.bin").write_bytes(b"\0" * 5)
    with pytest.raises(DataError):
        read_token_stream(tmp_path / "odd.bin", binary=True)


# --- products and counts -------------------------------------------------------

def all_formats(r, rng):
    freq = TokenFrequencyTable(rng.integers(0, 50, size=r.shape[0]))
    return [
        mask_unstructured(r, 0.3),
        mask_two_four(r),
        mask_rows(r, freq, max(1, r.shape[0] // 3)),
    ]


def test_empty_matvec():
    assert not sparse_matvec_t(empty_residual(3, 4), np.ones(3)).any()


def test_single_row_matvec():
    v = np.array([1.0, -2.0, 0.5])
    e = RowListResidual(4, 3, np.array([2]), v[None, :])
    x = np.array([9.0, 9.0, 1.5, 9.0])
    np.testing.assert_array_equal(sparse_matvec_t(e, x), 1.5 * v)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 20), m=st.integers(1, 12), seed=st.integers(0, 2**16))
def test_matvec_matches_dense(n, m, seed):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal((n, m))
    x = rng.standard_normal(n)
    g = rng.standard_normal(m)
    for e in all_formats(r, rng):
        counter = MulCounter()
        y = sparse_matvec_t(e, x, counter)
        dense = e.to_dense()
        ref = dense.T @ x
        assert np.linalg.norm(y - ref) <= 1e-12 * max(1.0, np.linalg.norm(ref))
        assert counter.count == e.nnz
        np.testing.assert_allclose(e.matvec(g), dense @ g, atol=1e-12)


def test_matvec_length_error():
    e = mask_unstructured(np.ones((3, 2)), 0.5)
    with pytest.raises(ShapeError):
        sparse_matvec_t(e, np.ones(4))


def test_param_counts():
    rng = np.random.default_rng(11)
    assert sparse_param_count(mask_unstructured(rng.standard_normal((8, 8)), 0.5)) == 32
    assert sparse_param_count(mask_two_four(rng.standard_normal((8, 8)))) == 32
    r = rng.standard_normal((10, 6))
    e = mask_rows(r, TokenFrequencyTable(np.arange(10)), 4)
    assert sparse_param_count(e) == 24
    for e in all_formats(rng.standard_normal((9, 7)), rng):
        assert sparse_param_count(e) == np.count_nonzero(e.to_dense())
        assert e.density() == sparse_param_count(e) / 63


def test_remask_round_trip():
    rng = np.random.default_rng(12)
    r = rng.standard_normal((10, 8))
    for e in all_formats(r, rng):
        again = e.remask(e.to_dense())
        assert type(again) is type(e)
        np.testing.assert_array_equal(again.values, e.values)
        assert kept_set(again) == kept_set(e)
        moved = e.remask(r + 1.0)
        np.testing.assert_array_equal(moved.support(), e.support())


def test_storage_bytes():
    r = np.random.default_rng(13).standard_normal((8, 4))
    u = mask_unstructured(r, 0.25)
    assert u.storage_bytes() == 8 * 4 + 2 * 4 * 8
    tf = mask_two_four(r)
    assert tf.storage_bytes() == 16 * 4 + 4
