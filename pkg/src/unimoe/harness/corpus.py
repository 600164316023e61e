"""Synthetic corpora with learnable structure, one generator per modality.

text   mode-switched permutation grammar: token 0 names one of n_modes
       hidden permutations of the vocabulary, and each following token is
       the permutation applied to its predecessor with probability 0.9
       (uniform noise otherwise). Predicting well requires combining the
       mode token with the current token, so capacity and attention both
       matter.
vision rank-1 smooth latent fields per bit channel, so coarse-scale bit
       codes genuinely predict finer ones after pyramid pooling.
audio  cluster-anchored AR(1) feature walks; quantized codes inherit the
       temporal structure.

All generators are pure functions of (size, seed).
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigInvalid
from ..masks import build_causal
from ..rope import AudioSpan, TextSpan, assign_positions
from ..sequence import AUDIO, TEXT, ModalityBlock, TokenSequence


def gen_text(size: int, seed: int, length: int = 32, vocab: int = 32,
             n_modes: int = 4, follow_prob: float = 0.9) -> np.ndarray:
    """[size, length] int64 token grid from the permutation grammar."""
    if n_modes > vocab:
        raise ConfigInvalid(f"n_modes {n_modes} exceeds vocab {vocab}")
    rng = np.random.default_rng(seed)
    perms = np.stack([rng.permutation(vocab) for _ in range(n_modes)])
    out = np.empty((size, length), dtype=np.int64)
    for i in range(size):
        mode = int(rng.integers(n_modes))
        out[i, 0] = mode
        for t in range(1, length):
            if rng.random() < follow_prob:
                out[i, t] = perms[mode, out[i, t - 1]]
            else:
                out[i, t] = rng.integers(vocab)
    return out


def grammar_conditional_entropy(vocab: int, follow_prob: float = 0.9) -> float:
    """Nats per token achievable by a perfect model of the grammar."""
    p_hit = follow_prob + (1.0 - follow_prob) / vocab
    p_miss = (1.0 - follow_prob) / vocab
    miss_term = (vocab - 1) * p_miss * np.log(p_miss) if p_miss > 0 else 0.0
    return float(-p_hit * np.log(p_hit) - miss_term)


def unigram_entropy(tokens: np.ndarray, vocab: int) -> float:
    """Entropy of the empirical unigram distribution, in nats."""
    counts = np.bincount(np.asarray(tokens).reshape(-1), minlength=vocab)
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def gen_vision(size: int, seed: int, grid: tuple[int, int] = (4, 4),
               bits: int = 8, noise: float = 0.3) -> np.ndarray:
    """[size, H, W, bits] smooth latents: rank-1 field + noise per channel."""
    rng = np.random.default_rng(seed)
    h, w = grid
    u = rng.standard_normal((size, h, 1, bits))
    v = rng.standard_normal((size, 1, w, bits))
    return u * v + noise * rng.standard_normal((size, h, w, bits))


def gen_audio(size: int, seed: int, frames: int = 16, dim: int = 8,
              n_clusters: int = 8, inertia: float = 0.7,
              noise: float = 0.1) -> np.ndarray:
    """[size, frames, dim] feature walks pulled toward a per-sequence anchor."""
    rng = np.random.default_rng(seed)
    centers = 2.0 * rng.standard_normal((n_clusters, dim))
    out = np.empty((size, frames, dim))
    for i in range(size):
        anchor = centers[rng.integers(n_clusters)]
        x = anchor + noise * rng.standard_normal(dim)
        for t in range(frames):
            out[i, t] = x
            x = inertia * x + (1.0 - inertia) * anchor \
                + noise * rng.standard_normal(dim)
    return out


def gen_corpus(modality: str, size: int, seed: int, **kwargs) -> np.ndarray:
    """Dispatch to the per-modality generator; size=0 yields an empty array."""
    gens = {"text": gen_text, "vision": gen_vision, "audio": gen_audio}
    if modality not in gens:
        raise ConfigInvalid(f"unknown modality {modality!r}")
    return gens[modality](size, seed, **kwargs)


def text_sequence(tokens: np.ndarray) -> TokenSequence:
    """Next-token sequence: inputs tokens[:-1], targets tokens[1:], causal."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.size - 1
    layout = (TextSpan(n),)
    return TokenSequence(
        n=n,
        blocks={TEXT: ModalityBlock(np.arange(n), tokens[:-1], tokens[1:])},
        weights=np.ones(n),
        positions=assign_positions(layout),
        mask=build_causal(n),
        layout=layout,
    )


def audio_token_sequence(codes: np.ndarray) -> TokenSequence:
    """Next-frame sequence over [frames, levels] quantizer codes, causal."""
    codes = np.asarray(codes, dtype=np.int64)
    n = codes.shape[0] - 1
    layout = (AudioSpan(n),)
    return TokenSequence(
        n=n,
        blocks={AUDIO: ModalityBlock(np.arange(n), codes[:-1], codes[1:])},
        weights=np.ones(n),
        positions=assign_positions(layout),
        mask=build_causal(n),
        layout=layout,
    )
