"""Binary-latent image pyramids and next-scale sequence assembly.

A frame is encoded as a pyramid of bit maps: the finest continuous latent
is area-averaged down to each coarser grid and every value is quantized
to one bit (non-negative means 1). Training sequences predict each
scale's bits from coarser scales and earlier frames, so the per-token
inputs are the previous scale's bits upsampled one step (optionally
corrupted), targets are the token's own clean bits, and per-scale loss
weights even out the token-count imbalance between scales.

The patch merger fuses two K-patch feature streams (a convolutional one
and a ViT-style one) into one vector per unit via projection, one
self-attention block over the 2K patches, mean pooling, and a final
projection. Image-style configs pair K=4 patches per unit; video-style
configs use K=16.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimMismatch, EmptyPyramid, GridMismatch, PyramidMismatch
from .kernel import register_grad_case
from .masks import build_scale_causal, build_windowed_temporal
from .rope import FrameSpan, assign_positions
from .sequence import VISION, ModalityBlock, TokenSequence


@dataclass(frozen=True)
class ScalePyramid:
    """Grid sizes per scale, coarsest to finest, resolution non-decreasing."""

    grids: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.grids:
            raise EmptyPyramid("a pyramid needs at least one scale")
        prev = (0, 0)
        for h, w in self.grids:
            if h < 1 or w < 1:
                raise ValueError(f"grid sizes must be positive, got {(h, w)}")
            if h < prev[0] or w < prev[1]:
                raise ValueError("pyramid resolution must be non-decreasing")
            prev = (h, w)

    @property
    def finest(self) -> tuple[int, int]:
        return self.grids[-1]

    @property
    def token_counts(self) -> tuple[int, ...]:
        return tuple(h * w for h, w in self.grids)

    @property
    def total_tokens(self) -> int:
        return sum(self.token_counts)


@dataclass(frozen=True)
class BitCodeMap:
    """One frame's bit codes: per scale an [h, w, B] array of 0/1 bytes."""

    pyramid: ScalePyramid
    codes: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.codes) != len(self.pyramid.grids):
            raise PyramidMismatch(
                f"{len(self.codes)} code maps for {len(self.pyramid.grids)} scales")
        bit_widths = set()
        for grid, arr in zip(self.pyramid.grids, self.codes):
            if arr.ndim != 3 or arr.shape[:2] != grid:
                raise GridMismatch(f"codes {arr.shape} do not sit on grid {grid}")
            bit_widths.add(arr.shape[2])
        if len(bit_widths) != 1:
            raise DimMismatch(f"scales disagree on bit width: {sorted(bit_widths)}")

    @property
    def bits(self) -> int:
        return self.codes[0].shape[2]


def bit_quantize(latent: np.ndarray) -> np.ndarray:
    """One bit per value: 1 where the latent is non-negative."""
    return (np.asarray(latent) >= 0.0).astype(np.int8)


def _pool_matrix(target: int, source: int) -> np.ndarray:
    """[target, source] exact area-average weights for 1-D pooling."""
    weights = np.zeros((target, source))
    span = source / target
    for i in range(target):
        lo, hi = i * span, (i + 1) * span
        for r in range(int(math.floor(lo)), int(math.ceil(hi))):
            overlap = min(hi, r + 1) - max(lo, r)
            if overlap > 0:
                weights[i, r] = overlap / span
    return weights


def build_pyramid_codes(finest_latent: np.ndarray, pyramid: ScalePyramid) -> BitCodeMap:
    """Average-pool the finest latent onto every scale, then quantize each.

    ``finest_latent`` is [H, W, B] and must sit on the pyramid's finest
    grid. Pooling is exact area averaging, so non-divisible grid ratios
    are handled by fractional cell overlap.
    """
    latent = np.asarray(finest_latent, dtype=np.float64)
    if latent.ndim != 3 or latent.shape[:2] != pyramid.finest:
        raise GridMismatch(
            f"finest latent {latent.shape} does not sit on grid {pyramid.finest}")
    H, W = pyramid.finest
    codes = []
    for h, w in pyramid.grids:
        pooled = np.einsum("ir,rcb,jc->ijb", _pool_matrix(h, H), latent,
                           _pool_matrix(w, W), optimize=True)
        codes.append(bit_quantize(pooled))
    return BitCodeMap(pyramid, tuple(codes))


def _corrupt_with_rng(codes: BitCodeMap, flip_prob: float,
                      rng: np.random.Generator) -> BitCodeMap:
    flipped = []
    for arr in codes.codes:
        flips = rng.random(arr.shape) < flip_prob
        flipped.append(np.where(flips, 1 - arr, arr).astype(np.int8))
    return BitCodeMap(codes.pyramid, tuple(flipped))


def corrupt_bits(codes: BitCodeMap, flip_prob: float, seed: int) -> BitCodeMap:
    """Independently flip each bit with probability flip_prob.

    Draws one uniform per bit, scale by scale in pyramid order, from
    ``numpy.random.default_rng(seed)``. Meant for the input side of
    training sequences only; prediction targets stay clean.
    """
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError(f"flip_prob must lie in [0, 1], got {flip_prob}")
    return _corrupt_with_rng(codes, flip_prob, np.random.default_rng(seed))


def scale_loss_weights(pyramid: ScalePyramid) -> np.ndarray:
    """Per-scale weights proportional to 1/token_count, normalized to sum 1.

    Every scale then contributes equally to the loss regardless of how
    many tokens it has, which keeps coarse scales from being drowned out.
    """
    inv = 1.0 / np.array(pyramid.token_counts, dtype=np.float64)
    return inv / inv.sum()


def bit_cross_entropy(logits, targets, weights=None) -> Tensor:
    """Mean-over-bits sigmoid cross-entropy, weight-averaged over tokens.

    ``logits`` is [n, B]; ``targets`` holds 0/1 bits. Per bit the loss is
    softplus(z) - y*z, the negative log-likelihood of an independent
    Bernoulli per bit.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimMismatch(f"targets {y.shape} do not match logits {logits.shape}")
    n = logits.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total == 0.0:
        return Tensor(0.0)
    per_bit = ad.add(ad.softplus(logits), ad.mul(ad.mul(logits, y), -1.0))
    per_token = ad.tmean(per_bit, axis=1)
    return ad.mul(ad.tsum(ad.mul(per_token, w)), 1.0 / total)


@dataclass
class PatchMergerParams:
    """Projection + one self-attention block + pooling head."""

    n_heads: int
    w_proj: Tensor   # [D_cnn, D_vit]
    wq: Tensor       # [D_vit, D_vit]
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w_out: Tensor    # [D_vit, D_out]

    @staticmethod
    def init(d_cnn: int, d_vit: int, d_out: int, n_heads: int,
             seed: int = 0) -> "PatchMergerParams":
        if d_vit % n_heads:
            raise DimMismatch(f"d_vit {d_vit} not divisible by {n_heads} heads")
        rng = np.random.default_rng(seed)

        def mat(rows, cols, fan_in):
            return Tensor(rng.standard_normal((rows, cols)) / math.sqrt(fan_in),
                          requires_grad=True)

        return PatchMergerParams(
            n_heads=n_heads,
            w_proj=mat(d_cnn, d_vit, d_cnn),
            wq=mat(d_vit, d_vit, d_vit),
            wk=mat(d_vit, d_vit, d_vit),
            wv=mat(d_vit, d_vit, d_vit),
            wo=mat(d_vit, d_vit, d_vit),
            w_out=mat(d_vit, d_out, d_vit),
        )

    def tensors(self) -> list[Tensor]:
        return [self.w_proj, self.wq, self.wk, self.wv, self.wo, self.w_out]


def patch_merge(f_cnn, f_vit, params: PatchMergerParams) -> Tensor:
    """Fuse [N, K, D_cnn] and [N, K, D_vit] patch stacks into [N, D_out].

    The convolutional stream is projected into the ViT width, the 2K
    patches are concatenated and mixed by one multi-head self-attention
    block (no residual), mean-pooled over patches, and projected out. The
    merge is invariant to any common permutation of the patch slots.
    """
    f_cnn = f_cnn if isinstance(f_cnn, Tensor) else Tensor(f_cnn)
    f_vit = f_vit if isinstance(f_vit, Tensor) else Tensor(f_vit)
    if f_cnn.ndim != 3 or f_vit.ndim != 3:
        raise DimMismatch("patch stacks must be [N, K, D]")
    if f_cnn.shape[:2] != f_vit.shape[:2]:
        raise DimMismatch(f"patch counts disagree: {f_cnn.shape} vs {f_vit.shape}")
    if f_cnn.shape[2] != params.w_proj.shape[0]:
        raise DimMismatch(
            f"cnn width {f_cnn.shape[2]} does not match projection {params.w_proj.shape}")
    if f_vit.shape[2] != params.w_proj.shape[1]:
        raise DimMismatch(
            f"vit width {f_vit.shape[2]} does not match projection {params.w_proj.shape}")
    n, k, d_vit = f_vit.shape
    heads = params.n_heads
    dh = d_vit // heads
    merged = ad.concat([ad.matmul(f_cnn, params.w_proj), f_vit], axis=1)  # [N, 2K, Dv]

    def split(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (n, 2 * k, heads, dh)), (0, 2, 1, 3))

    q = split(ad.matmul(merged, params.wq))
    key = split(ad.matmul(merged, params.wk))
    v = split(ad.matmul(merged, params.wv))
    scores = ad.mul(ad.matmul(q, ad.transpose(key, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    mixed = ad.matmul(ad.softmax(scores, axis=-1), v)
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (n, 2 * k, d_vit))
    pooled = ad.tmean(ad.matmul(mixed, params.wo), axis=1)
    return ad.matmul(pooled, params.w_out)


def _upsample_to(bits: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Nearest-cell upsample of [h, w, B] bits onto a finer grid."""
    h_src, w_src = bits.shape[:2]
    h_dst, w_dst = grid
    ri = (np.arange(h_dst) * h_src) // h_dst
    ci = (np.arange(w_dst) * w_src) // w_dst
    return bits[ri][:, ci]


def build_nfsp_sequence(frames: Sequence[BitCodeMap], flip_prob: float = 0.0,
                        seed: int = 0, window: int | None = None) -> TokenSequence:
    """Assemble a next-scale prediction TokenSequence from frame pyramids.

    Token order is frame-major, scale-minor, raster within a scale. Each
    token's input is the previous scale's bits at the covering cell
    (coarsest scale gets zeros), mapped 0/1 to -1/+1; its target is its
    own clean bit vector. With flip_prob > 0 the inputs are read from a
    corrupted copy (one rng seeded once, frames corrupted in order) while
    targets always stay uncorrupted. ``window`` switches the mask to the
    windowed temporal variant; otherwise visibility is scale-causal.
    """
    if not frames:
        raise EmptyPyramid("need at least one frame")
    pyramid = frames[0].pyramid
    for f in frames[1:]:
        if f.pyramid != pyramid:
            raise PyramidMismatch("all frames must share one pyramid")
    bit_width = frames[0].bits
    rng = np.random.default_rng(seed)
    history = [(_corrupt_with_rng(f, flip_prob, rng) if flip_prob > 0.0 else f)
               for f in frames]

    inputs, targets, weights = [], [], []
    per_scale_w = scale_loss_weights(pyramid)
    for frame, noisy in zip(frames, history):
        for s, grid in enumerate(pyramid.grids):
            if s == 0:
                inputs.append(np.zeros((grid[0] * grid[1], bit_width)))
            else:
                up = _upsample_to(noisy.codes[s - 1], grid).reshape(-1, bit_width)
                inputs.append(up * 2.0 - 1.0)
            targets.append(frame.codes[s].reshape(-1, bit_width))
            weights.append(np.full(grid[0] * grid[1], per_scale_w[s]))

    n = len(frames) * pyramid.total_tokens
    scale_counts = [list(pyramid.token_counts)] * len(frames)
    mask = (build_windowed_temporal(scale_counts, window) if window is not None
            else build_scale_causal(scale_counts))
    layout = tuple(FrameSpan(pyramid.grids) for _ in frames)
    return TokenSequence(
        n=n,
        blocks={VISION: ModalityBlock(np.arange(n),
                                      np.concatenate(inputs).astype(np.float64),
                                      np.concatenate(targets).astype(np.int8))},
        weights=np.concatenate(weights),
        positions=assign_positions(layout),
        mask=mask,
        layout=layout,
    )


def bits_to_hex(row_bits: np.ndarray) -> str:
    """Hex-encode one grid row of bits (cells flattened, MSB first)."""
    flat = np.asarray(row_bits, dtype=np.uint8).reshape(-1)
    return np.packbits(flat).tobytes().hex()


def hex_to_bits(text: str, cols: int, bits: int) -> np.ndarray:
    """Invert bits_to_hex back to a [cols, bits] array."""
    raw = np.frombuffer(bytes.fromhex(text), dtype=np.uint8)
    flat = np.unpackbits(raw)[: cols * bits]
    return flat.reshape(cols, bits).astype(np.int8)


def code_map_to_text(codes: BitCodeMap) -> str:
    """Line format: per scale a header 'scale h w B' then h hex rows."""
    lines = []
    for (h, w), arr in zip(codes.pyramid.grids, codes.codes):
        lines.append(f"scale {h} {w} {arr.shape[2]}")
        for r in range(h):
            lines.append(bits_to_hex(arr[r]))
    return "\n".join(lines) + "\n"


_PATCH_PROBE = np.random.default_rng(25).standard_normal((2, 4))
_BIT_TARGETS = (np.random.default_rng(29).random((5, 8)) < 0.5).astype(np.int8)
_BIT_WEIGHTS = np.array([1.0, 0.0, 2.0, 0.5, 1.0])


def _patch_merge_inputs() -> list[np.ndarray]:
    rng = np.random.default_rng(23)
    params = PatchMergerParams.init(d_cnn=5, d_vit=6, d_out=4, n_heads=2, seed=24)
    return ([rng.standard_normal((2, 3, 5)), rng.standard_normal((2, 3, 6))]
            + [t.data for t in params.tensors()])


def _patch_merge_fn(fc: Tensor, fv: Tensor, *weights: Tensor) -> Tensor:
    p = PatchMergerParams(2, *weights)
    return ad.tsum(ad.mul(patch_merge(fc, fv, p), _PATCH_PROBE))


def _bit_loss_inputs() -> list[np.ndarray]:
    return [np.random.default_rng(31).standard_normal((5, 8))]


register_grad_case("patch_merge.two_heads", _patch_merge_fn, _patch_merge_inputs)
register_grad_case("bit_cross_entropy.weighted",
                   lambda z: bit_cross_entropy(z, _BIT_TARGETS, _BIT_WEIGHTS),
                   _bit_loss_inputs)


def code_map_from_text(text: str) -> BitCodeMap:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    grids: list[tuple[int, int]] = []
    arrays: list[np.ndarray] = []
    i = 0
    while i < len(lines):
        head = lines[i].split()
        if head[0] != "scale" or len(head) != 4:
            raise ValueError(f"expected 'scale h w B' header, got {lines[i]!r}")
        h, w, bits = int(head[1]), int(head[2]), int(head[3])
        rows = [hex_to_bits(lines[i + 1 + r], w, bits) for r in range(h)]
        grids.append((h, w))
        arrays.append(np.stack(rows))
        i += 1 + h
    return BitCodeMap(ScalePyramid(tuple(grids)), tuple(arrays))
