"""Pyramid quantization against an exact-fraction pooling oracle, the
hand-enumerated next-scale fixture, the patch merger contract, and the
text serialization round trips."""

from fractions import Fraction

import numpy as np
import pytest

from unimoe.errors import (DimMismatch, EmptyPyramid, GridMismatch,
                           PyramidMismatch)
from unimoe.masks import build_windowed_temporal, densify
from unimoe.sequence import VISION
from unimoe.vision import (BitCodeMap, PatchMergerParams, ScalePyramid,
                           bit_cross_entropy, bit_quantize, bits_to_hex,
                           build_nfsp_sequence, build_pyramid_codes,
                           code_map_from_text, code_map_to_text, corrupt_bits,
                           hex_to_bits, patch_merge, scale_loss_weights)


def pool_oracle(latent, grid):
    """Exact area average over rational cell boundaries, no shared code.

    Returns a [h, w, B] nested list of Fractions.
    """
    H, W, B = latent.shape
    h, w = grid
    out = [[[Fraction(0)] * B for _ in range(w)] for _ in range(h)]
    for i in range(h):
        for j in range(w):
            lo_r, hi_r = Fraction(i * H, h), Fraction((i + 1) * H, h)
            lo_c, hi_c = Fraction(j * W, w), Fraction((j + 1) * W, w)
            acc = [Fraction(0)] * B
            for r in range(H):
                dr = min(hi_r, Fraction(r + 1)) - max(lo_r, Fraction(r))
                if dr <= 0:
                    continue
                for c in range(W):
                    dc = min(hi_c, Fraction(c + 1)) - max(lo_c, Fraction(c))
                    if dc <= 0:
                        continue
                    for b in range(B):
                        acc[b] += dr * dc * Fraction(latent[r, c, b])
            area = (hi_r - lo_r) * (hi_c - lo_c)
            out[i][j] = [a / area for a in acc]
    return out


@pytest.mark.parametrize("seed,finest,grid", [
    (0, (4, 4), (2, 2)),
    (1, (4, 4), (1, 1)),
    (2, (3, 3), (2, 2)),   # fractional overlap
    (3, (5, 3), (2, 2)),
    (6, (6, 4), (4, 3)),
])
def test_pooling_matches_fraction_oracle(seed, finest, grid):
    rng = np.random.default_rng(seed)
    # Rational-friendly values so the oracle is exact.
    latent = rng.integers(-8, 9, size=finest + (3,)).astype(np.float64) / 4.0
    pyramid = ScalePyramid((grid, finest))
    codes = build_pyramid_codes(latent, pyramid)
    exact = pool_oracle(latent, grid)
    for i in range(grid[0]):
        for j in range(grid[1]):
            for b in range(3):
                # Fixture precondition: off the 0 quantization knife edge,
                # where float roundoff could legitimately flip the bit.
                assert exact[i][j][b] != 0
                assert codes.codes[0][i, j, b] == (1 if exact[i][j][b] > 0 else 0)
    assert np.array_equal(codes.codes[1], bit_quantize(latent))


def test_bit_quantize_threshold():
    assert np.array_equal(bit_quantize(np.array([-0.1, 0.0, 0.1])), [0, 1, 1])
    assert bit_quantize(np.zeros((2, 2))).dtype == np.int8


def test_pyramid_validation():
    with pytest.raises(EmptyPyramid):
        ScalePyramid(())
    with pytest.raises(ValueError):
        ScalePyramid(((2, 2), (1, 4)))  # rows shrink
    p = ScalePyramid(((1, 1), (2, 2), (4, 4)))
    assert p.finest == (4, 4)
    assert p.token_counts == (1, 4, 16)
    assert p.total_tokens == 21


def test_code_map_validation():
    pyr = ScalePyramid(((1, 1), (2, 2)))
    good = (np.zeros((1, 1, 4), dtype=np.int8), np.zeros((2, 2, 4), dtype=np.int8))
    with pytest.raises(PyramidMismatch):
        BitCodeMap(pyr, good[:1])
    with pytest.raises(GridMismatch):
        BitCodeMap(pyr, (np.zeros((1, 2, 4), dtype=np.int8), good[1]))
    with pytest.raises(DimMismatch):
        BitCodeMap(pyr, (np.zeros((1, 1, 3), dtype=np.int8), good[1]))


def test_corrupt_bits_flip_rate_and_determinism():
    pyr = ScalePyramid(((8, 8),))
    codes = BitCodeMap(pyr, (np.zeros((8, 8, 16), dtype=np.int8),))
    a = corrupt_bits(codes, 0.25, seed=5)
    b = corrupt_bits(codes, 0.25, seed=5)
    assert np.array_equal(a.codes[0], b.codes[0])
    rate = a.codes[0].mean()
    assert 0.18 < rate < 0.32
    untouched = corrupt_bits(codes, 0.0, seed=5)
    assert np.array_equal(untouched.codes[0], codes.codes[0])


def test_scale_loss_weights_fixture():
    w = scale_loss_weights(ScalePyramid(((1, 1), (2, 2))))
    assert np.allclose(w, [0.8, 0.2], atol=1e-15)
    w3 = scale_loss_weights(ScalePyramid(((1, 1), (2, 2), (4, 4))))
    assert w3.sum() == pytest.approx(1.0, abs=1e-15)
    # Equal total contribution: weight * token_count constant.
    contrib = w3 * np.array([1, 4, 16])
    assert np.allclose(contrib, contrib[0], atol=1e-15)


def bit_ce_oracle(logits, targets, weights):
    n, B = logits.shape
    per_token = np.zeros(n)
    for i in range(n):
        for b in range(B):
            z, y = logits[i, b], targets[i, b]
            per_token[i] += np.log1p(np.exp(-abs(z))) + max(z, 0.0) - y * z
    per_token /= B
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    return float((per_token * w).sum() / w.sum())


@pytest.mark.parametrize("seed", range(4))
def test_bit_cross_entropy_matches_oracle(seed):
    rng = np.random.default_rng(400 + seed)
    logits = rng.standard_normal((6, 5)) * 2
    targets = (rng.random((6, 5)) < 0.5).astype(np.int8)
    weights = rng.random(6) if seed % 2 else None
    got = bit_cross_entropy(logits, targets, weights).item()
    assert got == pytest.approx(bit_ce_oracle(logits, targets, weights), rel=1e-12)


def test_bit_cross_entropy_zero_weights():
    out = bit_cross_entropy(np.ones((2, 3)), np.ones((2, 3), dtype=np.int8),
                            np.zeros(2))
    assert out.item() == 0.0


def test_bit_cross_entropy_shape_check():
    with pytest.raises(DimMismatch):
        bit_cross_entropy(np.ones((2, 3)), np.ones((2, 4)))


def test_patch_merge_shape_and_permutation_invariance():
    rng = np.random.default_rng(17)
    params = PatchMergerParams.init(d_cnn=5, d_vit=8, d_out=3, n_heads=2, seed=1)
    fc = rng.standard_normal((4, 6, 5))
    fv = rng.standard_normal((4, 6, 8))
    out = patch_merge(fc, fv, params).data
    assert out.shape == (4, 3)
    perm = rng.permutation(6)
    again = patch_merge(fc[:, perm], fv[:, perm], params).data
    assert np.allclose(again, out, atol=1e-12)


def test_patch_merge_dim_checks():
    params = PatchMergerParams.init(d_cnn=5, d_vit=8, d_out=3, n_heads=2)
    with pytest.raises(DimMismatch):
        patch_merge(np.zeros((2, 4, 6)), np.zeros((2, 4, 8)), params)
    with pytest.raises(DimMismatch):
        patch_merge(np.zeros((2, 4, 5)), np.zeros((2, 3, 8)), params)
    with pytest.raises(DimMismatch):
        PatchMergerParams.init(d_cnn=5, d_vit=7, d_out=3, n_heads=2)


def two_scale_frame():
    """1 coarse bit-cell plus a 2x2 fine grid, 2 bits per cell."""
    pyr = ScalePyramid(((1, 1), (2, 2)))
    coarse = np.array([[[1, 0]]], dtype=np.int8)
    fine = np.array([[[1, 1], [0, 1]],
                     [[0, 0], [1, 0]]], dtype=np.int8)
    return BitCodeMap(pyr, (coarse, fine))


def test_nfsp_hand_fixture():
    frame = two_scale_frame()
    seq = build_nfsp_sequence([frame])
    assert seq.n == 5
    assert seq.mask.pair_count() == 21
    dense = densify(seq.mask)
    # Coarse token sees only itself; fine tokens see everything.
    assert np.array_equal(dense[0], [True, False, False, False, False])
    assert dense[1:].all()
    assert np.allclose(seq.weights, [0.8, 0.2, 0.2, 0.2, 0.2], atol=1e-15)
    block = seq.blocks[VISION]
    # Targets: own clean bits in raster order.
    want_targets = np.array([[1, 0], [1, 1], [0, 1], [0, 0], [1, 0]], dtype=np.int8)
    assert np.array_equal(block.targets, want_targets)
    # Inputs: zeros for the coarsest, then the coarse bits (+-1) for all fine.
    assert np.array_equal(block.inputs[0], [0.0, 0.0])
    assert np.array_equal(block.inputs[1:], np.tile([1.0, -1.0], (4, 1)))
    # Positions: shared t, centered coarse cell, integer fine lattice.
    want_pos = np.array([
        [0.0, 0.5, 0.5],
        [0.0, 0.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0],
        [0.0, 1.0, 1.0],
    ])
    assert np.allclose(seq.positions, want_pos, atol=1e-15)


def test_nfsp_corruption_touches_inputs_only():
    frame = two_scale_frame()
    clean = build_nfsp_sequence([frame])
    noisy = build_nfsp_sequence([frame], flip_prob=0.5, seed=3)
    assert np.array_equal(noisy.blocks[VISION].targets, clean.blocks[VISION].targets)
    assert set(np.unique(noisy.blocks[VISION].inputs[1:])) <= {-1.0, 1.0}
    # With p=0.5 over several seeds some input must differ from clean.
    diffs = [not np.array_equal(build_nfsp_sequence([frame], 0.5, s).blocks[VISION].inputs,
                                clean.blocks[VISION].inputs) for s in range(8)]
    assert any(diffs)


def test_nfsp_multi_frame_layout_and_window():
    frame = two_scale_frame()
    seq = build_nfsp_sequence([frame, frame, frame], window=2)
    assert seq.n == 15
    counts = [1, 4] * 3
    assert seq.mask == build_windowed_temporal([[1, 4]] * 3, 2)
    # Frame t advances by one per frame.
    assert np.array_equal(seq.positions[:, 0],
                          np.repeat([0.0, 1.0, 2.0], 5))
    del counts


def test_nfsp_input_is_previous_scale_covering_cell():
    pyr = ScalePyramid(((1, 1), (2, 2), (4, 4)))
    rng = np.random.default_rng(21)
    latent = rng.standard_normal((4, 4, 3))
    codes = build_pyramid_codes(latent, pyr)
    seq = build_nfsp_sequence([codes])
    block = seq.blocks[VISION]
    # Scale 2 token at fine cell (r, c) reads scale-1 cell (r//2, c//2).
    fine_inputs = block.inputs[5:].reshape(4, 4, 3)
    mid = codes.codes[1] * 2.0 - 1.0
    for r in range(4):
        for c in range(4):
            assert np.array_equal(fine_inputs[r, c], mid[r // 2, c // 2])


def test_nfsp_rejects_mismatched_frames():
    a = two_scale_frame()
    b = BitCodeMap(ScalePyramid(((1, 1),)), (np.zeros((1, 1, 2), dtype=np.int8),))
    with pytest.raises(PyramidMismatch):
        build_nfsp_sequence([a, b])
    with pytest.raises(EmptyPyramid):
        build_nfsp_sequence([])


def test_hex_round_trip():
    rng = np.random.default_rng(6)
    for cols, bits in [(1, 2), (3, 5), (4, 8), (7, 3)]:
        row = (rng.random((cols, bits)) < 0.5).astype(np.int8)
        assert np.array_equal(hex_to_bits(bits_to_hex(row), cols, bits), row)


def test_code_map_text_round_trip():
    rng = np.random.default_rng(8)
    pyr = ScalePyramid(((1, 1), (2, 3), (4, 6)))
    codes = build_pyramid_codes(rng.standard_normal((4, 6, 5)), pyr)
    again = code_map_from_text(code_map_to_text(codes))
    assert again.pyramid == codes.pyramid
    for a, b in zip(again.codes, codes.codes):
        assert np.array_equal(a, b)


def test_code_map_from_text_rejects_garbage():
    with pytest.raises(ValueError):
        code_map_from_text("not a header\n00\n")
