"""Token sequences that mix text, vision, and audio in one stream.

A TokenSequence is the assembly currency between data generation and the
model: per-token modality tags, per-modality payload blocks, position
triples, a visibility mask, prediction targets, and loss weights. Inputs
and targets differ by modality (token ids for text, bit vectors for
vision, codec code stacks for audio), so rows are grouped into blocks and
indexed back into the shared order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .masks import MaskSpec, canonicalize_intervals
from .rope import assign_positions

TEXT, VISION, AUDIO = 0, 1, 2
MODALITY_NAMES = {TEXT: "text", VISION: "vision", AUDIO: "audio"}


@dataclass
class ModalityBlock:
    """Rows of one modality: indices into the sequence plus payloads."""

    rows: np.ndarray     # [m] int, strictly increasing
    inputs: np.ndarray   # text: [m] ids; vision: [m, B] floats; audio: [m, L] codes
    targets: np.ndarray  # text: [m] ids; vision: [m, B] bits; audio: [m, L] codes


@dataclass
class TokenSequence:
    n: int
    blocks: dict[int, ModalityBlock]
    weights: np.ndarray    # [n]
    positions: np.ndarray  # [n, 3]
    mask: MaskSpec
    layout: tuple = field(default_factory=tuple)  # rope spans, kept for re-assembly

    def __post_init__(self):
        if self.mask.n != self.n:
            raise ValueError(f"mask covers {self.mask.n} tokens, sequence has {self.n}")
        if self.positions.shape != (self.n, 3):
            raise ValueError(f"positions shape {self.positions.shape} != ({self.n}, 3)")
        if self.weights.shape != (self.n,):
            raise ValueError(f"weights shape {self.weights.shape} != ({self.n},)")
        seen = np.concatenate([b.rows for b in self.blocks.values()]) if self.blocks \
            else np.empty(0, dtype=np.intp)
        if len(np.unique(seen)) != self.n or (self.n and seen.max() >= self.n):
            raise ValueError("modality blocks must partition the token rows")
        for code, block in self.blocks.items():
            if len(block.rows) != len(block.inputs) or len(block.rows) != len(block.targets):
                raise ValueError(f"{MODALITY_NAMES.get(code, code)} block arrays disagree")

    @property
    def tags(self) -> np.ndarray:
        out = np.empty(self.n, dtype=np.int8)
        for code, block in self.blocks.items():
            out[block.rows] = code
        return out

    def same_shape_as(self, other: "TokenSequence") -> bool:
        """True when the two sequences can share one batched forward pass."""
        if self.n != other.n or self.mask != other.mask:
            return False
        if not np.array_equal(self.weights, other.weights):
            return False
        if not np.array_equal(self.positions, other.positions):
            return False
        if set(self.blocks) != set(other.blocks):
            return False
        return all(np.array_equal(self.blocks[c].rows, other.blocks[c].rows)
                   for c in self.blocks)


def concat_sequences(seqs: Sequence[TokenSequence]) -> TokenSequence:
    """Join sequences; every earlier segment is fully visible to later ones.

    Inside a segment the original mask applies unchanged. Positions are
    re-derived from the concatenated layouts so the running time counter
    continues across segments.
    """
    if not seqs:
        raise ValueError("need at least one sequence")
    total = sum(s.n for s in seqs)
    layout: list = []
    for s in seqs:
        if not s.layout:
            raise ValueError("concat needs sequences that carry their layout")
        layout.extend(s.layout)
    columns: list[tuple] = []
    offset = 0
    for s in seqs:
        seg_end = offset + s.n
        for intervals in s.mask.columns:
            shifted = [(lo + offset, hi + offset) for lo, hi in intervals]
            if seg_end < total:
                shifted.append((seg_end, total))
            columns.append(canonicalize_intervals(shifted))
        offset = seg_end
    blocks: dict[int, ModalityBlock] = {}
    offset = 0
    for s in seqs:
        for code, block in s.blocks.items():
            rows = block.rows + offset
            if code in blocks:
                prev = blocks[code]
                blocks[code] = ModalityBlock(
                    np.concatenate([prev.rows, rows]),
                    np.concatenate([prev.inputs, block.inputs]),
                    np.concatenate([prev.targets, block.targets]))
            else:
                blocks[code] = ModalityBlock(rows, block.inputs.copy(), block.targets.copy())
        offset += s.n
    return TokenSequence(
        n=total,
        blocks=blocks,
        weights=np.concatenate([s.weights for s in seqs]),
        positions=assign_positions(layout),
        mask=MaskSpec(total, tuple(columns)),
        layout=tuple(layout),
    )
