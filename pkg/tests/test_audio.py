"""Residual quantization against per-vector enumeration, codebook
fitting behavior, and the level-by-level prediction loss and decoder."""

import numpy as np
import pytest

from unimoe.autodiff import Tensor
from unimoe.audio import (Codebooks, additive_embed, fit_codebooks,
                          ncp_generate, ncp_teacher_forced_loss, rvq_decode,
                          rvq_encode)
from unimoe.errors import CodeOutOfRange, DimMismatch, ModeMissingGroundTruth
from unimoe.kernel import cross_entropy


def rvq_oracle(vec, tables):
    """One vector at a time, explicit distance loop."""
    residual = vec.astype(float).copy()
    codes = []
    for table in tables:
        best, best_d = 0, None
        for idx, entry in enumerate(table):
            d = float(((residual - entry) ** 2).sum())
            if best_d is None or d < best_d - 1e-12:
                best, best_d = idx, d
        codes.append(best)
        residual = residual - table[best]
    return codes, residual


def random_books(seed, levels=3, codes=5, dim=4):
    rng = np.random.default_rng(seed)
    return Codebooks(rng.standard_normal((levels, codes, dim)))


@pytest.mark.parametrize("seed", range(10))
def test_rvq_encode_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    books = random_books(100 + seed)
    vecs = rng.standard_normal((7, books.dim))
    got = rvq_encode(vecs, books)
    for i in range(7):
        want, _ = rvq_oracle(vecs[i], books.tables)
        assert got[i].tolist() == want


def test_rvq_encode_leading_axes():
    books = random_books(1)
    rng = np.random.default_rng(2)
    vecs = rng.standard_normal((2, 3, books.dim))
    got = rvq_encode(vecs, books)
    assert got.shape == (2, 3, books.levels)
    flat = rvq_encode(vecs.reshape(-1, books.dim), books)
    assert np.array_equal(got.reshape(-1, books.levels), flat)


def test_rvq_ties_choose_lower_index():
    # Two identical entries: index 0 must win.
    tables = np.zeros((1, 3, 2))
    tables[0, 0] = [1.0, 0.0]
    tables[0, 1] = [1.0, 0.0]
    tables[0, 2] = [5.0, 5.0]
    books = Codebooks(tables)
    assert rvq_encode(np.array([[1.0, 0.0]]), books)[0, 0] == 0


def test_rvq_decode_inverts_sum():
    books = random_books(3)
    rng = np.random.default_rng(4)
    vecs = rng.standard_normal((6, books.dim))
    codes = rvq_encode(vecs, books)
    decoded = rvq_decode(codes, books)
    manual = sum(books.tables[lv][codes[:, lv]] for lv in range(books.levels))
    assert np.allclose(decoded, manual, atol=1e-15)


def test_rvq_residual_error_non_increasing_in_levels():
    rng = np.random.default_rng(5)
    data = rng.standard_normal((300, 6))
    vecs = rng.standard_normal((40, 6))
    prev = None
    for levels in (1, 2, 3, 4):
        books = fit_codebooks(data, levels=levels, codes_per_level=8, seed=0)
        err = np.mean((rvq_decode(rvq_encode(vecs, books), books) - vecs) ** 2)
        if prev is not None:
            assert err <= prev + 1e-9
        prev = err


def test_rvq_decode_rejects_bad_codes():
    books = random_books(6)
    with pytest.raises(CodeOutOfRange):
        rvq_decode(np.array([[0, 1, 9]]), books)
    with pytest.raises(DimMismatch):
        rvq_decode(np.array([[0, 1]]), books)


def test_fit_codebooks_is_deterministic_and_reduces_error():
    rng = np.random.default_rng(7)
    # Clustered data so k-means has something to find.
    centers = rng.standard_normal((4, 5)) * 3
    data = np.concatenate([c + 0.1 * rng.standard_normal((50, 5)) for c in centers])
    a = fit_codebooks(data, levels=2, codes_per_level=4, seed=9)
    b = fit_codebooks(data, levels=2, codes_per_level=4, seed=9)
    assert np.array_equal(a.tables, b.tables)
    recon = rvq_decode(rvq_encode(data, a), a)
    base = np.mean(data**2)
    assert np.mean((recon - data) ** 2) < 0.1 * base


def test_fit_codebooks_needs_enough_rows():
    with pytest.raises(ValueError):
        fit_codebooks(np.zeros((3, 2)), levels=1, codes_per_level=4)


def test_additive_embed_sums_rows():
    rng = np.random.default_rng(8)
    tables = [Tensor(rng.standard_normal((5, 3))) for _ in range(2)]
    codes = np.array([[0, 4], [2, 2]])
    got = additive_embed(codes, tables).data
    want = tables[0].data[[0, 2]] + tables[1].data[[4, 2]]
    assert np.allclose(got, want, atol=1e-15)
    with pytest.raises(DimMismatch):
        additive_embed(np.zeros((2, 3), dtype=int), tables)


def ncp_loss_oracle(hs, heads, tables, targets, weights):
    """Recompute the loss from the written rule, using cross_entropy only."""
    L = len(heads)
    total = 0.0
    for level in range(L):
        h = hs[level].copy()
        for j in range(level):
            h = h + tables[j][targets[:, j]]
        total += cross_entropy(Tensor(h @ heads[level]),
                               targets[:, level], weights).item()
    return total / L


@pytest.mark.parametrize("seed", range(5))
def test_ncp_loss_matches_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    m, d, C, L = 6, 4, 5, 3
    hs = [rng.standard_normal((m, d)) for _ in range(L)]
    heads = [rng.standard_normal((d, C)) for _ in range(L)]
    tables = [rng.standard_normal((C, d)) for _ in range(L)]
    targets = rng.integers(C, size=(m, L))
    weights = rng.random(m) if seed % 2 else None
    got = ncp_teacher_forced_loss([Tensor(h) for h in hs],
                                  [Tensor(w) for w in heads],
                                  [Tensor(t) for t in tables],
                                  targets, weights).item()
    assert got == pytest.approx(ncp_loss_oracle(hs, heads, tables, targets, weights),
                                rel=1e-12)


def test_ncp_loss_shape_checks():
    t = Tensor(np.zeros((2, 3)))
    head = Tensor(np.zeros((3, 4)))
    with pytest.raises(DimMismatch):
        ncp_teacher_forced_loss([t], [head, head], [t], np.zeros((2, 1), dtype=int))
    with pytest.raises(DimMismatch):
        ncp_teacher_forced_loss([t], [head], [t], np.zeros((2, 2), dtype=int))


def test_ncp_generate_greedy_matches_manual():
    rng = np.random.default_rng(9)
    m, d, C, L = 4, 3, 6, 2
    hs = [rng.standard_normal((m, d)) for _ in range(L)]
    heads = [rng.standard_normal((d, C)) for _ in range(L)]
    tables = [rng.standard_normal((C, d)) for _ in range(L)]
    got = ncp_generate(hs, heads, tables, mode="greedy")
    lvl0 = np.argmax(hs[0] @ heads[0], axis=1)
    lvl1 = np.argmax((hs[1] + tables[0][lvl0]) @ heads[1], axis=1)
    assert np.array_equal(got, np.stack([lvl0, lvl1], axis=1))


def test_ncp_generate_teacher_feeds_ground_truth():
    rng = np.random.default_rng(10)
    m, d, C, L = 3, 3, 4, 2
    hs = [rng.standard_normal((m, d)) for _ in range(L)]
    heads = [rng.standard_normal((d, C)) for _ in range(L)]
    tables = [rng.standard_normal((C, d)) * 5 for _ in range(L)]
    truth = rng.integers(C, size=(m, L))
    got = ncp_generate(hs, heads, tables, mode="teacher", ground_truth=truth)
    lvl1 = np.argmax((hs[1] + tables[0][truth[:, 0]]) @ heads[1], axis=1)
    assert np.array_equal(got[:, 1], lvl1)
    with pytest.raises(ModeMissingGroundTruth):
        ncp_generate(hs, heads, tables, mode="teacher")


def test_ncp_generate_sample_is_seeded_and_in_range():
    rng = np.random.default_rng(11)
    m, d, C, L = 5, 3, 4, 2
    hs = [rng.standard_normal((m, d)) for _ in range(L)]
    heads = [rng.standard_normal((d, C)) for _ in range(L)]
    tables = [rng.standard_normal((C, d)) for _ in range(L)]
    a = ncp_generate(hs, heads, tables, mode="sample",
                     rng=np.random.default_rng(42))
    b = ncp_generate(hs, heads, tables, mode="sample",
                     rng=np.random.default_rng(42))
    assert np.array_equal(a, b)
    assert ((a >= 0) & (a < C)).all()
    with pytest.raises(ValueError):
        ncp_generate(hs, heads, tables, mode="beam")
