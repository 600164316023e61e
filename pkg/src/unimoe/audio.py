"""Residual vector quantization and next-codebook prediction for audio.

An audio token is a stack of L codebook indices produced by greedy
residual quantization of a feature vector: level 0 quantizes the vector,
each later level quantizes what the previous levels left over. Decoding
sums the chosen entries. On the model side a token embeds as the sum of
its per-level table rows, and the loss predicts the L codes of each
target token level by level, feeding the ground-truth embedding of every
earlier level back into the hidden state (teacher forcing) so a single
forward pass scores all levels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import CodeOutOfRange, DimMismatch, ModeMissingGroundTruth
from .kernel import cross_entropy, register_grad_case


@dataclass(frozen=True)
class Codebooks:
    """Quantizer tables, one [codes, dim] matrix per level: shape [L, C, D]."""

    tables: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.tables, dtype=np.float64)
        if arr.ndim != 3:
            raise DimMismatch(f"tables must be [levels, codes, dim], got {arr.shape}")
        object.__setattr__(self, "tables", arr)

    @property
    def levels(self) -> int:
        return self.tables.shape[0]

    @property
    def codes_per_level(self) -> int:
        return self.tables.shape[1]

    @property
    def dim(self) -> int:
        return self.tables.shape[2]


def rvq_encode(vectors: np.ndarray, books: Codebooks) -> np.ndarray:
    """Greedy residual quantization: [..., D] vectors to [..., L] codes.

    Each level picks the entry nearest (squared distance) to the current
    residual, ties going to the lower index, then subtracts it.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.shape[-1] != books.dim:
        raise DimMismatch(f"vector dim {x.shape[-1]} vs codebook dim {books.dim}")
    lead = x.shape[:-1]
    residual = x.reshape(-1, books.dim).copy()
    codes = np.empty((residual.shape[0], books.levels), dtype=np.int64)
    for level in range(books.levels):
        table = books.tables[level]
        d2 = (np.sum(residual**2, axis=1, keepdims=True)
              - 2.0 * residual @ table.T
              + np.sum(table**2, axis=1))
        idx = np.argmin(d2, axis=1)
        codes[:, level] = idx
        residual -= table[idx]
    return codes.reshape(*lead, books.levels)


def rvq_decode(codes: np.ndarray, books: Codebooks) -> np.ndarray:
    """Sum the table entries named by [..., L] codes back to [..., D]."""
    idx = np.asarray(codes)
    if idx.shape[-1] != books.levels:
        raise DimMismatch(f"{idx.shape[-1]} code levels vs {books.levels} tables")
    if idx.size and (idx.min() < 0 or idx.max() >= books.codes_per_level):
        raise CodeOutOfRange(
            f"codes must lie in [0, {books.codes_per_level}), "
            f"got range [{idx.min()}, {idx.max()}]")
    out = np.zeros(idx.shape[:-1] + (books.dim,))
    for level in range(books.levels):
        out += books.tables[level][idx[..., level]]
    return out


def fit_codebooks(data: np.ndarray, levels: int, codes_per_level: int,
                  iters: int = 20, seed: int = 0) -> Codebooks:
    """Residual k-means: fit each level's table to the previous residuals.

    Plain Lloyd iterations per level, centroids seeded by sampling data
    rows without replacement; a cluster that loses all members keeps its
    centroid. Deterministic for a fixed seed.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise DimMismatch(f"data must be [n, dim], got {x.shape}")
    if x.shape[0] < codes_per_level:
        raise ValueError(f"need at least {codes_per_level} rows, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    residual = x.copy()
    tables = np.empty((levels, codes_per_level, x.shape[1]))
    for level in range(levels):
        centroids = residual[rng.choice(len(residual), codes_per_level,
                                        replace=False)].copy()
        for _ in range(iters):
            d2 = (np.sum(residual**2, axis=1, keepdims=True)
                  - 2.0 * residual @ centroids.T
                  + np.sum(centroids**2, axis=1))
            assign = np.argmin(d2, axis=1)
            for c in range(codes_per_level):
                members = residual[assign == c]
                if len(members):
                    centroids[c] = members.mean(axis=0)
        tables[level] = centroids
        d2 = (np.sum(residual**2, axis=1, keepdims=True)
              - 2.0 * residual @ centroids.T
              + np.sum(centroids**2, axis=1))
        residual -= centroids[np.argmin(d2, axis=1)]
    return Codebooks(tables)


def _as_array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def additive_embed(codes: np.ndarray, tables: Sequence[Tensor]) -> Tensor:
    """Embed [m, L] codes as the sum of per-level table rows: [m, d]."""
    idx = np.asarray(codes)
    if idx.ndim != 2 or idx.shape[1] != len(tables):
        raise DimMismatch(f"codes {idx.shape} vs {len(tables)} tables")
    out = ad.gather(tables[0], idx[:, 0], axis=0)
    for level in range(1, len(tables)):
        out = ad.add(out, ad.gather(tables[level], idx[:, level], axis=0))
    return out


def ncp_teacher_forced_loss(h_levels: Sequence[Tensor], heads: Sequence[Tensor],
                            tables: Sequence[Tensor], targets: np.ndarray,
                            weights: np.ndarray | None = None) -> Tensor:
    """Mean over levels of weighted cross-entropy on next-codebook logits.

    ``h_levels[l]`` is the [m, d] hidden used for level l (all the same
    tensor when heads share one read-out point). Level l's logits are
    (h_l + sum of ground-truth embeddings of levels < l) @ heads[l], so
    gradients flow through the add-back tables as well as the heads.
    """
    y = np.asarray(targets)
    L = len(heads)
    if len(tables) != L or len(h_levels) != L:
        raise DimMismatch(
            f"{len(h_levels)} hiddens, {len(heads)} heads, {len(tables)} tables")
    if y.ndim != 2 or y.shape[1] != L:
        raise DimMismatch(f"targets {y.shape} must be [m, {L}]")
    total = None
    carried = None
    for level in range(L):
        h = h_levels[level] if carried is None else ad.add(h_levels[level], carried)
        level_loss = cross_entropy(ad.matmul(h, heads[level]), y[:, level], weights)
        total = level_loss if total is None else ad.add(total, level_loss)
        addback = ad.gather(tables[level], y[:, level], axis=0)
        carried = addback if carried is None else ad.add(carried, addback)
    return ad.mul(total, 1.0 / L)


def ncp_generate(h_levels: Sequence, heads: Sequence, tables: Sequence,
                 mode: str = "greedy", rng: np.random.Generator | None = None,
                 ground_truth: np.ndarray | None = None) -> np.ndarray:
    """Emit [m, L] codes level by level from per-level hiddens.

    greedy: argmax each level, feed the predicted embedding forward.
    sample: draw from the softmax instead (rng required to be useful).
    teacher: argmax predictions, but feed ground-truth embeddings forward
    the way the loss does; requires ground_truth codes.
    """
    if mode not in ("greedy", "sample", "teacher"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "teacher" and ground_truth is None:
        raise ModeMissingGroundTruth("teacher mode needs ground_truth codes")
    if mode == "sample" and rng is None:
        rng = np.random.default_rng(0)
    hs = [_as_array(h) for h in h_levels]
    ws = [_as_array(h) for h in heads]
    ts = [_as_array(t) for t in tables]
    L, m = len(ws), hs[0].shape[0]
    out = np.empty((m, L), dtype=np.int64)
    with no_grad():
        carried = np.zeros_like(hs[0])
        for level in range(L):
            logits = (hs[level] + carried) @ ws[level]
            if mode == "sample":
                shifted = logits - logits.max(axis=1, keepdims=True)
                probs = np.exp(shifted)
                probs /= probs.sum(axis=1, keepdims=True)
                draws = rng.random((m, 1))
                out[:, level] = (probs.cumsum(axis=1) < draws).sum(axis=1)
            else:
                out[:, level] = np.argmax(logits, axis=1)
            feed = ground_truth[:, level] if mode == "teacher" else out[:, level]
            carried = carried + ts[level][feed]
    return out


_NCP_TARGETS = np.array([[0, 3], [2, 1], [1, 1], [3, 0]])
_NCP_WEIGHTS = np.array([1.0, 0.5, 0.0, 2.0])


def _ncp_inputs() -> list[np.ndarray]:
    rng = np.random.default_rng(37)
    # order: h0, h1, head0, head1, table0, table1
    shapes = [(4, 6), (4, 6), (6, 4), (6, 4), (4, 6), (4, 6)]
    return [rng.standard_normal(s) for s in shapes]


def _ncp_fn(h0, h1, w0, w1, t0, t1):
    return ncp_teacher_forced_loss([h0, h1], [w0, w1], [t0, t1],
                                   _NCP_TARGETS, _NCP_WEIGHTS)


register_grad_case("ncp_loss.two_level", _ncp_fn, _ncp_inputs)
