"""A small pre-norm transformer with mixture-of-experts feed-forwards.

Every block is attention plus a routed expert layer on residual paths;
every feed-forward is a mixture (dense equals n_experts=1, top_k=1).
Queries and keys are rotated by the three-axis rotary scheme, attention
visibility comes from a MaskSpec, and routing follows moe.route exactly:
softmax gate scores, bias-steered selection, score-only mixing weights.

One forward pass serves a batch of structurally identical TokenSequences
(same mask, positions, and modality layout), which is how the training
harness amortizes graph overhead. A SubModelSpec can restrict the pass to
a subset of layers, experts, and a smaller top-k; inactive layers act as
the identity on the residual stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import audio as audio_ops
from . import autodiff as ad
from . import vision as vision_ops
from .autodiff import Tensor
from .errors import ConfigInvalid, EmptyAttentionRow, SpecIncompatible
from .kernel import masked_softmax
from .masks import densify
from .moe import topk_by_score
from .rope import rotation_arrays
from .sequence import AUDIO, TEXT, VISION, TokenSequence


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 32
    d_model: int = 48
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 48
    n_experts: int = 8
    top_k: int = 2
    rope_base: float = 1_000_000.0
    bits: int = 8
    audio_levels: int = 3
    audio_codebook: int = 16
    router_update_speed: float = 1e-3
    audio_head_placement: str = "final"

    def __post_init__(self):
        positive = {"vocab": self.vocab, "d_model": self.d_model,
                    "n_layers": self.n_layers, "n_heads": self.n_heads,
                    "d_ff": self.d_ff, "n_experts": self.n_experts,
                    "top_k": self.top_k, "bits": self.bits,
                    "audio_levels": self.audio_levels,
                    "audio_codebook": self.audio_codebook}
        for name, value in positive.items():
            if int(value) != value or value < 1:
                raise ConfigInvalid(f"{name} must be a positive integer, got {value}")
        if self.d_model % self.n_heads:
            raise ConfigInvalid(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigInvalid("head dimension must be even for rotary pairs")
        if self.top_k > self.n_experts:
            raise ConfigInvalid(f"top_k {self.top_k} exceeds n_experts {self.n_experts}")
        if self.audio_head_placement not in ("final", "staggered"):
            raise ConfigInvalid(
                f"audio_head_placement must be 'final' or 'staggered', "
                f"got {self.audio_head_placement!r}")
        if self.audio_head_placement == "staggered" and self.audio_levels > self.n_layers:
            raise ConfigInvalid("staggered audio heads need audio_levels <= n_layers")
        if self.rope_base <= 1.0:
            raise ConfigInvalid(f"rope_base must exceed 1, got {self.rope_base}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerParams:
    ln1: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2: Tensor
    gate: Tensor        # [d, E]
    w1: Tensor          # [E, d, ff]
    b1: Tensor          # [E, ff]
    w2: Tensor          # [E, ff, d]
    b2: Tensor          # [E, d]


@dataclass
class RouteTrace:
    """Per-layer expert usage collected during forward passes."""

    n_layers: int
    n_experts: int
    loads: list[np.ndarray] = field(default_factory=list)
    modality_loads: list[dict[int, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if not self.loads:
            self.loads = [np.zeros(self.n_experts) for _ in range(self.n_layers)]
        if not self.modality_loads:
            self.modality_loads = [{} for _ in range(self.n_layers)]

    def add(self, layer: int, expert_ids: np.ndarray, tags: np.ndarray) -> None:
        flat = expert_ids.reshape(-1)
        self.loads[layer] += np.bincount(flat, minlength=self.n_experts)
        k = expert_ids.shape[1]
        tag_rep = np.repeat(tags, k)
        for code in np.unique(tag_rep):
            bucket = self.modality_loads[layer].setdefault(
                int(code), np.zeros(self.n_experts))
            bucket += np.bincount(flat[tag_rep == code], minlength=self.n_experts)


@dataclass
class ForwardResult:
    hidden: Tensor                    # [B, n, d] after the final norm
    audio_taps: list[Tensor] | None   # staggered audio head inputs, or None
    trace: RouteTrace


@dataclass
class LossBundle:
    losses: dict[str, Tensor]
    token_counts: dict[str, int]
    trace: RouteTrace


def rms_norm(x: Tensor, g: Tensor, eps: float = 1e-6) -> Tensor:
    ms = ad.tmean(ad.mul(x, x), axis=-1, keepdims=True)
    return ad.mul(ad.mul(x, ad.power(ad.add(ms, eps), -0.5)), g)


class MoeTransformer:
    """The shared multimodal backbone plus per-modality embeddings and heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, ff, E = cfg.d_model, cfg.d_ff, cfg.n_experts

        def mat(*shape, fan_in):
            return Tensor(rng.standard_normal(shape) / math.sqrt(fan_in),
                          requires_grad=True)

        self.embed_text = mat(cfg.vocab, d, fan_in=d)
        self.embed_vision = mat(cfg.bits, d, fan_in=cfg.bits)
        self.audio_tables = [mat(cfg.audio_codebook, d, fan_in=d)
                             for _ in range(cfg.audio_levels)]
        self.layers: list[LayerParams] = []
        self.router_biases: list[np.ndarray] = []
        for _ in range(cfg.n_layers):
            self.layers.append(LayerParams(
                ln1=Tensor(np.ones(d), requires_grad=True),
                wq=mat(d, d, fan_in=d),
                wk=mat(d, d, fan_in=d),
                wv=mat(d, d, fan_in=d),
                wo=mat(d, d, fan_in=d),
                ln2=Tensor(np.ones(d), requires_grad=True),
                gate=mat(d, E, fan_in=d),
                w1=mat(E, d, ff, fan_in=d),
                b1=Tensor(np.zeros((E, ff)), requires_grad=True),
                w2=mat(E, ff, d, fan_in=ff),
                b2=Tensor(np.zeros((E, d)), requires_grad=True),
            ))
            self.router_biases.append(np.zeros(E))
        self.final_g = Tensor(np.ones(d), requires_grad=True)
        self.head_text = mat(d, cfg.vocab, fan_in=d)
        self.head_vision = mat(d, cfg.bits, fan_in=d)
        self.audio_heads = [mat(d, cfg.audio_codebook, fan_in=d)
                            for _ in range(cfg.audio_levels)]

    # -- parameter plumbing ---------------------------------------------

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [("embed_text", self.embed_text), ("embed_vision", self.embed_vision)]
        out += [(f"audio_tables.{i}", t) for i, t in enumerate(self.audio_tables)]
        for i, lp in enumerate(self.layers):
            for attr in ("ln1", "wq", "wk", "wv", "wo", "ln2",
                         "gate", "w1", "b1", "w2", "b2"):
                out.append((f"layers.{i}.{attr}", getattr(lp, attr)))
        out.append(("final_g", self.final_g))
        out.append(("head_text", self.head_text))
        out.append(("head_vision", self.head_vision))
        out += [(f"audio_heads.{i}", t) for i, t in enumerate(self.audio_heads)]
        return out

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_params())

    # -- forward ----------------------------------------------------------

    def _active_plan(self, spec) -> tuple[list[int], dict[int, np.ndarray | None], int]:
        if spec is None:
            return (list(range(self.cfg.n_layers)),
                    {i: None for i in range(self.cfg.n_layers)},
                    self.cfg.top_k)
        spec.validate_against(self.cfg)
        experts = {layer: np.asarray(ids, dtype=np.intp)
                   for layer, ids in zip(spec.active_layers, spec.active_experts)}
        full = np.arange(self.cfg.n_experts)
        experts = {layer: None if np.array_equal(ids, full) else ids
                   for layer, ids in experts.items()}
        return list(spec.active_layers), experts, spec.top_k

    def _embed(self, seqs: Sequence[TokenSequence]) -> Tensor:
        base = seqs[0]
        B, n = len(seqs), base.n
        parts: list[Tensor] = []
        dests: list[np.ndarray] = []
        for code, block in base.blocks.items():
            rows = block.rows
            dest = (np.arange(B)[:, None] * n + rows[None, :]).reshape(-1)
            if code == TEXT:
                ids = np.stack([s.blocks[code].inputs for s in seqs]).reshape(-1)
                emb = ad.gather(self.embed_text, ids, axis=0)
            elif code == VISION:
                bits = np.stack([s.blocks[code].inputs for s in seqs])
                emb = ad.matmul(Tensor(bits.reshape(-1, self.cfg.bits)), self.embed_vision)
            elif code == AUDIO:
                codes = np.stack([s.blocks[code].inputs for s in seqs]).reshape(-1, self.cfg.audio_levels)
                emb = ad.gather(self.audio_tables[0], codes[:, 0], axis=0)
                for level in range(1, self.cfg.audio_levels):
                    emb = ad.add(emb, ad.gather(self.audio_tables[level],
                                                codes[:, level], axis=0))
            else:
                raise ValueError(f"unknown modality code {code}")
            parts.append(emb)
            dests.append(dest)
        stacked = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]
        flat = ad.scatter_add(stacked, np.concatenate(dests), B * n)
        return ad.reshape(flat, (B, n, self.cfg.d_model))

    def _attention(self, x_norm: Tensor, lp: LayerParams, rot, visible) -> Tensor:
        cfg = self.cfg
        B, n = x_norm.shape[0], x_norm.shape[1]
        H, dh = cfg.n_heads, cfg.head_dim
        cos, sin_sign, perm = rot

        def split_heads(t: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(t, (B, n, H, dh)), (0, 2, 1, 3))

        def rotated(t: Tensor) -> Tensor:
            return ad.add(ad.mul(t, cos), ad.mul(ad.gather(t, perm, axis=-1), sin_sign))

        q = rotated(split_heads(ad.matmul(x_norm, lp.wq)))
        k = rotated(split_heads(ad.matmul(x_norm, lp.wk)))
        v = split_heads(ad.matmul(x_norm, lp.wv))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = masked_softmax(scores, visible)
        out = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)),
                         (B, n, cfg.d_model))
        return ad.matmul(out, lp.wo)

    def _moe(self, x_norm: Tensor, layer_idx: int, active: np.ndarray | None,
             k: int, trace: RouteTrace, tags_flat: np.ndarray) -> Tensor:
        lp = self.layers[layer_idx]
        B, n, d = x_norm.shape
        T = B * n
        flat = ad.reshape(x_norm, (T, d))
        if active is None:
            gate, bias = lp.gate, self.router_biases[layer_idx]
        else:
            gate = ad.gather(lp.gate, active, axis=1)
            bias = self.router_biases[layer_idx][active]
        probs = ad.softmax(ad.matmul(flat, gate), axis=-1)
        chosen = topk_by_score(probs.data + bias, k)          # [T, k] local ids
        rows = np.repeat(np.arange(T), k)
        cols = chosen.reshape(-1)
        picked = ad.reshape(ad.take_at(probs, rows, cols), (T, k))
        weights = ad.mul(picked, ad.power(ad.tsum(picked, axis=1, keepdims=True), -1.0))
        global_ids = chosen if active is None else active[chosen]
        gcols = global_ids.reshape(-1)
        x_sel = ad.reshape(ad.gather(flat, rows, axis=0), (T * k, 1, d))
        h = ad.add(ad.reshape(ad.matmul(x_sel, ad.gather(lp.w1, gcols, axis=0)),
                              (T * k, self.cfg.d_ff)),
                   ad.gather(lp.b1, gcols, axis=0))
        h = ad.silu(h)
        y = ad.add(ad.reshape(ad.matmul(ad.reshape(h, (T * k, 1, self.cfg.d_ff)),
                                        ad.gather(lp.w2, gcols, axis=0)),
                              (T * k, d)),
                   ad.gather(lp.b2, gcols, axis=0))
        weighted = ad.mul(y, ad.reshape(weights, (T * k, 1)))
        trace.add(layer_idx, global_ids, tags_flat)
        return ad.reshape(ad.scatter_add(weighted, rows, T), (B, n, d))

    def forward(self, seqs: Sequence[TokenSequence], spec=None) -> ForwardResult:
        base = seqs[0]
        for other in seqs[1:]:
            if not base.same_shape_as(other):
                raise ValueError("batched sequences must share mask, positions, and layout")
        active_layers, layer_experts, k = self._active_plan(spec)
        visible = densify(base.mask)
        missing = np.flatnonzero(~visible.any(axis=1))
        if missing.size:
            raise EmptyAttentionRow(f"query rows {missing.tolist()} see no key")
        cos, sin, perm, sign = rotation_arrays(base.positions, self.cfg.head_dim,
                                               self.cfg.rope_base)
        rot = (cos, sin * sign, perm)
        tags_flat = np.tile(base.tags, len(seqs))
        trace = RouteTrace(self.cfg.n_layers, self.cfg.n_experts)
        want_taps = (self.cfg.audio_head_placement == "staggered"
                     and AUDIO in base.blocks)
        if want_taps and len(active_layers) < self.cfg.audio_levels:
            raise SpecIncompatible(
                "staggered audio heads need at least audio_levels active layers")
        tap_layers = set(active_layers[-self.cfg.audio_levels:]) if want_taps else set()

        x = self._embed(seqs)
        taps: list[Tensor] = []
        for layer_idx in active_layers:
            lp = self.layers[layer_idx]
            x = ad.add(x, self._attention(rms_norm(x, lp.ln1), lp, rot, visible))
            x = ad.add(x, self._moe(rms_norm(x, lp.ln2), layer_idx,
                                    layer_experts[layer_idx], k, trace, tags_flat))
            if layer_idx in tap_layers:
                taps.append(rms_norm(x, self.final_g))
        hidden = rms_norm(x, self.final_g)
        return ForwardResult(hidden, taps if want_taps else None, trace)

    # -- losses ------------------------------------------------------------

    def loss_components(self, seqs: Sequence[TokenSequence], spec=None) -> LossBundle:
        from .kernel import cross_entropy

        result = self.forward(seqs, spec=spec)
        base = seqs[0]
        B, n = len(seqs), base.n
        flat_hidden = ad.reshape(result.hidden, (B * n, self.cfg.d_model))
        losses: dict[str, Tensor] = {}
        counts: dict[str, int] = {}
        for code, block in base.blocks.items():
            rows = block.rows
            dest = (np.arange(B)[:, None] * n + rows[None, :]).reshape(-1)
            weights = np.tile(base.weights[rows], B)
            if code == TEXT:
                h = ad.gather(flat_hidden, dest, axis=0)
                logits = ad.matmul(h, self.head_text)
                targets = np.stack([s.blocks[code].targets for s in seqs]).reshape(-1)
                losses["text"] = cross_entropy(logits, targets, weights)
                counts["text"] = len(dest)
            elif code == VISION:
                h = ad.gather(flat_hidden, dest, axis=0)
                logits = ad.matmul(h, self.head_vision)
                targets = np.stack([s.blocks[code].targets for s in seqs])
                losses["vision"] = vision_ops.bit_cross_entropy(
                    logits, targets.reshape(-1, self.cfg.bits), weights)
                counts["vision"] = len(dest)
            elif code == AUDIO:
                targets = np.stack([s.blocks[code].targets for s in seqs])
                targets = targets.reshape(-1, self.cfg.audio_levels)
                if result.audio_taps is not None:
                    h_levels = [ad.gather(ad.reshape(tap, (B * n, self.cfg.d_model)),
                                          dest, axis=0)
                                for tap in result.audio_taps]
                else:
                    h0 = ad.gather(flat_hidden, dest, axis=0)
                    h_levels = [h0] * self.cfg.audio_levels
                losses["audio"] = audio_ops.ncp_teacher_forced_loss(
                    h_levels, self.audio_heads, self.audio_tables, targets, weights)
                counts["audio"] = len(dest)
        return LossBundle(losses, counts, result.trace)
