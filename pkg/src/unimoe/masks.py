"""Attention masks stored as per-key-column row intervals.

A mask over n tokens is kept as, for every key column j, the sorted
disjoint half-open intervals [lo, hi) of query rows that may attend to j.
This is the compact currency the rest of the package trades in; kernels
densify it on demand. Canonical form merges adjacent intervals, so equal
masks compare equal structurally.

Builders cover the layouts used by the models here: plain causal text,
scale-wise causal pyramids (a token sees all earlier frames, earlier
scales of its own frame, and its whole own scale bidirectionally), a
windowed variant that limits how many trailing frames stay visible, and
seeded random dropout of historical frames.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

Interval = tuple[int, int]


def canonicalize_intervals(intervals: Sequence[Interval]) -> tuple[Interval, ...]:
    """Sort, drop empties, and merge overlapping or adjacent intervals."""
    cleaned = sorted((int(lo), int(hi)) for lo, hi in intervals if hi > lo)
    merged: list[Interval] = []
    for lo, hi in cleaned:
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return tuple(merged)


@dataclass(frozen=True)
class MaskSpec:
    """Visibility mask: ``columns[j]`` lists query-row intervals that see key j."""

    n: int
    columns: tuple[tuple[Interval, ...], ...]

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("token count must be non-negative")
        if len(self.columns) != self.n:
            raise ValueError(f"expected {self.n} columns, got {len(self.columns)}")
        for j, intervals in enumerate(self.columns):
            prev_hi = None
            for lo, hi in intervals:
                if not (0 <= lo < hi <= self.n):
                    raise ValueError(f"column {j}: interval [{lo},{hi}) out of range")
                if prev_hi is not None and lo <= prev_hi:
                    raise ValueError(f"column {j}: intervals not sorted-disjoint-merged")
                prev_hi = hi

    @staticmethod
    def make(n: int, columns: Sequence[Sequence[Interval]]) -> "MaskSpec":
        """Build a canonical MaskSpec, normalizing each column's intervals."""
        return MaskSpec(n, tuple(canonicalize_intervals(c) for c in columns))

    def pair_count(self) -> int:
        return sum(hi - lo for col in self.columns for lo, hi in col)

    def to_text(self) -> str:
        lines = [str(self.n)]
        for j, intervals in enumerate(self.columns):
            parts = [str(j)] + [f"{lo}:{hi}" for lo, hi in intervals]
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "MaskSpec":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty mask text")
        n = int(lines[0])
        if len(lines) != n + 1:
            raise ValueError(f"expected {n} column lines, got {len(lines) - 1}")
        columns: list[tuple[Interval, ...]] = []
        for j, line in enumerate(lines[1:]):
            fields = line.split()
            if int(fields[0]) != j:
                raise ValueError(f"column line {j} is labeled {fields[0]}")
            intervals = []
            for field in fields[1:]:
                lo, hi = field.split(":")
                intervals.append((int(lo), int(hi)))
            columns.append(tuple(intervals))
        return MaskSpec(n, tuple(columns))


def densify(spec: MaskSpec) -> np.ndarray:
    """Boolean [n, n] matrix, entry [i, j] true when query i sees key j."""
    dense = np.zeros((spec.n, spec.n), dtype=bool)
    for j, intervals in enumerate(spec.columns):
        for lo, hi in intervals:
            dense[lo:hi, j] = True
    return dense


def compact(dense: np.ndarray) -> MaskSpec:
    """Inverse of densify: recover the canonical column-interval form."""
    dense = np.asarray(dense, dtype=bool)
    if dense.ndim != 2 or dense.shape[0] != dense.shape[1]:
        raise ValueError(f"expected a square matrix, got {dense.shape}")
    n = dense.shape[0]
    columns: list[tuple[Interval, ...]] = []
    for j in range(n):
        col = dense[:, j]
        # Edges of the visible runs: +1 opens an interval, -1 closes it.
        diff = np.diff(col.astype(np.int8), prepend=0, append=0)
        starts = np.flatnonzero(diff == 1)
        stops = np.flatnonzero(diff == -1)
        columns.append(tuple(zip(starts.tolist(), stops.tolist())))
    return MaskSpec(n, tuple(columns))


def build_causal(n: int) -> MaskSpec:
    """Standard autoregressive mask: key j visible to rows j..n-1."""
    return MaskSpec(n, tuple(((j, n),) for j in range(n)))


def _normalize_frames(frames: Sequence) -> list[list[int]]:
    """Accept per-frame scale-count lists, or plain ints for single-scale frames."""
    out: list[list[int]] = []
    for frame in frames:
        scales = [int(frame)] if isinstance(frame, (int, np.integer)) else [int(s) for s in frame]
        if not scales or any(s <= 0 for s in scales):
            raise ValueError(f"frame scale counts must be positive, got {scales}")
        out.append(scales)
    return out


def _frame_layout(frames: Sequence) -> tuple[int, list[tuple[int, int]], list[list[tuple[int, int]]]]:
    """Flatten frames to (n, per-frame [start, end), per-frame scale [start, end))."""
    normalized = _normalize_frames(frames)
    offset = 0
    frame_spans: list[tuple[int, int]] = []
    scale_spans: list[list[tuple[int, int]]] = []
    for scales in normalized:
        start = offset
        spans = []
        for count in scales:
            spans.append((offset, offset + count))
            offset += count
        frame_spans.append((start, offset))
        scale_spans.append(spans)
    return offset, frame_spans, scale_spans


def build_scale_causal(frames: Sequence) -> MaskSpec:
    """Scale-wise causal visibility over a sequence of frame pyramids.

    Each token attends to every token of earlier frames, to earlier scales
    of its own frame, and bidirectionally within its own scale. Column-wise
    that collapses to a single interval per key: from the key's own scale
    start to the end of the sequence.
    """
    n, _, scale_spans = _frame_layout(frames)
    columns: list[tuple[Interval, ...]] = []
    for spans in scale_spans:
        for lo, hi in spans:
            columns.extend(((lo, n),) for _ in range(hi - lo))
    return MaskSpec(n, tuple(columns))


def build_windowed_temporal(frames: Sequence, window: int) -> MaskSpec:
    """Scale-causal visibility with cross-frame attention limited to a window.

    A query in frame f sees other frames only in [f-window+1, f-1]; intra-frame
    rules are unchanged. Column-wise, a key in frame g stays visible from its
    own scale start through the end of frame min(g+window-1, last).
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    n, frame_spans, scale_spans = _frame_layout(frames)
    last = len(frame_spans) - 1
    columns: list[tuple[Interval, ...]] = []
    for g, spans in enumerate(scale_spans):
        visible_end = frame_spans[min(g + window - 1, last)][1]
        for lo, hi in spans:
            columns.extend(((lo, visible_end),) for _ in range(hi - lo))
    return MaskSpec(n, tuple(columns))


def drop_history_frames(frames: Sequence, drop_prob: float, seed: int) -> MaskSpec:
    """Scale-causal mask with each historical frame independently hidden.

    One uniform variate is drawn per historical frame in frame order from
    ``numpy.random.default_rng(seed)``; frame g is dropped when its variate
    is below ``drop_prob``. A dropped frame keeps its intra-frame visibility
    but its keys disappear from every later frame's view. The last frame is
    the current one and is never dropped.
    """
    if not 0.0 <= drop_prob <= 1.0:
        raise ValueError(f"drop_prob must lie in [0, 1], got {drop_prob}")
    n, frame_spans, scale_spans = _frame_layout(frames)
    n_frames = len(frame_spans)
    rng = np.random.default_rng(seed)
    draws = rng.random(max(n_frames - 1, 0))
    dropped = [bool(draws[g] < drop_prob) for g in range(n_frames - 1)] + [False]
    columns: list[tuple[Interval, ...]] = []
    for g, spans in enumerate(scale_spans):
        visible_end = frame_spans[g][1] if dropped[g] else n
        for lo, hi in spans:
            columns.extend(((lo, visible_end),) for _ in range(hi - lo))
    return MaskSpec(n, tuple(columns))
