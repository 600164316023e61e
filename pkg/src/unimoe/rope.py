"""Shared rotary positions over a (t, h, w) coordinate triple.

Text and audio tokens advance all three coordinates together with the
running sequence index, so on pure text the scheme collapses to ordinary
1-D RoPE. Every visual frame consumes a single time step: all its tokens,
across all pyramid scales, share one integer t, and their spatial
coordinates come from center-aligning each scale's grid onto the frame's
finest grid. The head dimension is split into three contiguous bands
(t, h, w); when the pair count is not divisible by three the remainder
pairs go to the t band. Within a band, pair m couples dims (m, m+pb) in
the usual half-split layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import BadHeadDim

DEFAULT_BASE = 1_000_000.0


class PositionTriple(NamedTuple):
    t: float
    h: float
    w: float


@dataclass(frozen=True)
class TextSpan:
    count: int


@dataclass(frozen=True)
class AudioSpan:
    count: int


@dataclass(frozen=True)
class FrameSpan:
    """One visual frame: per-scale (rows, cols) grids, coarsest first."""

    grids: tuple[tuple[int, int], ...]


def center_align_scale(grid: tuple[int, int], finest: tuple[int, int]) -> np.ndarray:
    """Map a coarse grid onto finest-grid coordinates, centers aligned.

    Returns [rows, cols, 2] with the (h, w) coordinate of each cell:
    cell i of a length-g axis mapped onto length-G sits at (i+0.5)*G/g - 0.5.
    The finest scale maps to the identity integer lattice.
    """
    rows, cols = grid
    ref_rows, ref_cols = finest
    if rows < 1 or cols < 1 or ref_rows < 1 or ref_cols < 1:
        raise ValueError(f"grid sizes must be positive, got {grid} onto {finest}")
    hs = (np.arange(rows) + 0.5) * (ref_rows / rows) - 0.5
    ws = (np.arange(cols) + 0.5) * (ref_cols / cols) - 0.5
    out = np.empty((rows, cols, 2))
    out[..., 0] = hs[:, None]
    out[..., 1] = ws[None, :]
    return out


def assign_positions(layout: Sequence, start: int = 0) -> np.ndarray:
    """Positions [n, 3] for a layout of TextSpan / AudioSpan / FrameSpan parts.

    The running counter begins at ``start``. Text and audio tokens take
    (c, c, c) and advance c by one each; a frame assigns its single t to
    every token (scales in order, raster order within a scale) and then
    advances c by one.
    """
    triples: list[np.ndarray] = []
    c = int(start)
    for span in layout:
        if isinstance(span, (TextSpan, AudioSpan)):
            if span.count < 0:
                raise ValueError("span count must be non-negative")
            idx = np.arange(c, c + span.count, dtype=np.float64)
            triples.append(np.stack([idx, idx, idx], axis=1))
            c += span.count
        elif isinstance(span, FrameSpan):
            if not span.grids:
                raise ValueError("a frame needs at least one scale grid")
            finest = span.grids[-1]
            for grid in span.grids:
                coords = center_align_scale(grid, finest).reshape(-1, 2)
                block = np.empty((coords.shape[0], 3))
                block[:, 0] = float(c)
                block[:, 1:] = coords
                triples.append(block)
            c += 1
        else:
            raise TypeError(f"unknown layout span {type(span).__name__}")
    if not triples:
        return np.zeros((0, 3))
    return np.concatenate(triples, axis=0)


def band_sizes(d: int) -> tuple[int, int, int]:
    """Pair counts for the (t, h, w) bands of a head of width d."""
    if d < 2 or d % 2 != 0:
        raise BadHeadDim(f"head dim must be a positive even number, got {d}")
    pairs = d // 2
    base = pairs // 3
    return (base + pairs % 3, base, base)


def rotation_arrays(positions: np.ndarray, d: int,
                    base: float = DEFAULT_BASE) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Precompute (cos, sin, perm, sign) applying the triple rotation to [..., d].

    A vector x at the given positions rotates as
        x * cos + x[..., perm] * sign * sin
    which is the half-split complex rotation done band by band.
    """
    positions = np.asarray(positions, dtype=np.float64)
    coords = positions.reshape(-1, 3)
    bands = band_sizes(d)
    cos_parts, sin_parts, perm_parts, sign_parts = [], [], [], []
    offset = 0
    for axis, pb in enumerate(bands):
        if pb == 0:
            continue
        inv_freq = base ** (-np.arange(pb) / pb)
        theta = coords[:, axis:axis + 1] * inv_freq[None, :]
        cos = np.cos(theta)
        sin = np.sin(theta)
        cos_parts.append(np.concatenate([cos, cos], axis=1))
        sin_parts.append(np.concatenate([sin, sin], axis=1))
        perm_parts.append(np.concatenate([np.arange(pb, 2 * pb), np.arange(0, pb)]) + offset)
        sign_parts.append(np.concatenate([-np.ones(pb), np.ones(pb)]))
        offset += 2 * pb
    lead = positions.shape[:-1] if positions.ndim > 1 else ()
    cos = np.concatenate(cos_parts, axis=1).reshape(*lead, d)
    sin = np.concatenate(sin_parts, axis=1).reshape(*lead, d)
    return cos, sin, np.concatenate(perm_parts), np.concatenate(sign_parts)


def rotate(vec: np.ndarray, pos, base: float = DEFAULT_BASE) -> np.ndarray:
    """Rotate [..., d] vectors by position triple(s); norm-preserving.

    ``pos`` is a PositionTriple (or length-3 sequence) shared by all
    vectors, or an array of triples matching the leading axes of ``vec``.
    """
    vec = np.asarray(vec, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    cos, sin, perm, sign = rotation_arrays(pos, vec.shape[-1], base)
    return vec * cos + np.take(vec, perm, axis=-1) * sign * sin
