"""Elastic sub-model sampling, restricted execution, and extraction.

Training can shrink the model along three independent axes, each drawn
per training instance: depth (drop uniformly spaced interior layers,
keeping the first and last), width (route within a random expert subset),
and sparsity (a smaller top-k). A SubModelSpec names one such sub-model;
restrict_forward runs the full parameter set under that restriction, and
extract materializes the sub-model as a standalone network that computes
the same function.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigInvalid, SpecIncompatible
from .model import ModelConfig, MoeTransformer


@dataclass(frozen=True)
class SubModelSpec:
    """Active layers, per-layer active experts, and inference top-k."""

    active_layers: tuple[int, ...]
    active_experts: tuple[tuple[int, ...], ...]
    top_k: int

    def __post_init__(self):
        if not self.active_layers:
            raise SpecIncompatible("a sub-model needs at least one active layer")
        if list(self.active_layers) != sorted(set(self.active_layers)):
            raise SpecIncompatible("active_layers must be strictly increasing")
        if len(self.active_experts) != len(self.active_layers):
            raise SpecIncompatible("need one expert set per active layer")
        for ids in self.active_experts:
            if not ids or list(ids) != sorted(set(ids)):
                raise SpecIncompatible("expert ids must be non-empty, sorted, unique")
            if len(ids) < self.top_k:
                raise SpecIncompatible(
                    f"top_k {self.top_k} exceeds active expert count {len(ids)}")
        if self.top_k < 1:
            raise SpecIncompatible("top_k must be at least 1")

    @staticmethod
    def full(cfg: ModelConfig) -> "SubModelSpec":
        return SubModelSpec(tuple(range(cfg.n_layers)),
                            tuple(tuple(range(cfg.n_experts)) for _ in range(cfg.n_layers)),
                            cfg.top_k)

    def validate_against(self, cfg: ModelConfig) -> None:
        if self.active_layers[-1] >= cfg.n_layers:
            raise SpecIncompatible(
                f"layer {self.active_layers[-1]} outside a {cfg.n_layers}-layer model")
        for ids in self.active_experts:
            if ids[-1] >= cfg.n_experts:
                raise SpecIncompatible(
                    f"expert {ids[-1]} outside a {cfg.n_experts}-expert layer")

    def to_json(self) -> str:
        return json.dumps({"active_layers": list(self.active_layers),
                           "active_experts": [list(ids) for ids in self.active_experts],
                           "top_k": self.top_k}, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SubModelSpec":
        raw = json.loads(text)
        try:
            return SubModelSpec(tuple(raw["active_layers"]),
                                tuple(tuple(ids) for ids in raw["active_experts"]),
                                int(raw["top_k"]))
        except KeyError as missing:
            raise SpecIncompatible(f"sub-model json lacks key {missing}") from None


@dataclass(frozen=True)
class ElasticSchedule:
    """Per-dimension full-model probabilities and reduced options.

    Each training instance draws the three dimensions independently: with
    probability ``p_full_*`` the dimension stays full, otherwise one of
    the reduced options is chosen uniformly. A dimension with no options
    listed never reduces, whatever its p_full. Flagship-style recipes
    keep depth full 75% of the time and width/sparsity full 80%; the
    companion small-scale ablations used 80% for depth as well, so that
    knob is explicit here.
    """

    p_full_depth: float = 0.75
    depth_options: tuple[int, ...] = ()
    p_full_width: float = 0.8
    width_options: tuple[int, ...] = ()
    p_full_sparsity: float = 0.8
    sparsity_options: tuple[int, ...] = ()

    def validate_against(self, cfg: ModelConfig) -> None:
        for name, p in (("p_full_depth", self.p_full_depth),
                        ("p_full_width", self.p_full_width),
                        ("p_full_sparsity", self.p_full_sparsity)):
            if not 0.0 <= p <= 1.0:
                raise ConfigInvalid(f"{name} must lie in [0, 1], got {p}")
        for m in self.depth_options:
            if not 1 <= m < cfg.n_layers:
                raise ConfigInvalid(f"depth option {m} not in [1, {cfg.n_layers - 1}]")
        for e in self.width_options:
            if not 1 <= e < cfg.n_experts:
                raise ConfigInvalid(f"width option {e} not in [1, {cfg.n_experts - 1}]")
        for k in self.sparsity_options:
            if not 1 <= k < cfg.top_k:
                raise ConfigInvalid(f"sparsity option {k} not in [1, {cfg.top_k - 1}]")
        smallest_width = min(self.width_options, default=cfg.n_experts)
        largest_k = max(self.sparsity_options, default=0)
        if smallest_width < cfg.top_k or (largest_k and smallest_width < largest_k):
            raise ConfigInvalid("every width option must fit the largest top_k in play")


def keep_layers(n_layers: int, reduced: int) -> tuple[int, ...]:
    """Uniformly spaced layer subset; first and last always survive.

    reduced=1 keeps only the last layer, the one feeding the output head.
    """
    if reduced >= n_layers:
        return tuple(range(n_layers))
    if reduced == 1:
        return (n_layers - 1,)
    step = (n_layers - 1) / (reduced - 1)
    return tuple(sorted({round(i * step) for i in range(reduced)}))


def sample_spec(schedule: ElasticSchedule, cfg: ModelConfig, seed: int) -> SubModelSpec:
    """Draw one sub-model. The three dimensions are sampled independently
    from a single seeded stream, in depth, width, sparsity order.
    """
    schedule.validate_against(cfg)
    rng = np.random.default_rng(seed)

    if rng.random() < schedule.p_full_depth or not schedule.depth_options:
        layers = tuple(range(cfg.n_layers))
    else:
        reduced = schedule.depth_options[rng.integers(len(schedule.depth_options))]
        layers = keep_layers(cfg.n_layers, reduced)

    if rng.random() < schedule.p_full_width or not schedule.width_options:
        experts = tuple(tuple(range(cfg.n_experts)) for _ in layers)
    else:
        size = schedule.width_options[rng.integers(len(schedule.width_options))]
        experts = tuple(
            tuple(sorted(rng.choice(cfg.n_experts, size=size, replace=False).tolist()))
            for _ in layers)

    if rng.random() < schedule.p_full_sparsity or not schedule.sparsity_options:
        k = cfg.top_k
    else:
        k = int(schedule.sparsity_options[rng.integers(len(schedule.sparsity_options))])

    return SubModelSpec(layers, experts, k)


def restrict_forward(model: MoeTransformer, spec: SubModelSpec, seqs) -> np.ndarray:
    """Hidden states of the full model run under ``spec``, without gradients."""
    seqs = [seqs] if not isinstance(seqs, (list, tuple)) else list(seqs)
    spec.validate_against(model.cfg)
    with ad.no_grad():
        return model.forward(seqs, spec=spec).hidden.data


def extract(model: MoeTransformer, spec: SubModelSpec) -> MoeTransformer:
    """Materialize the sub-model named by ``spec`` as a standalone network.

    The extracted network reproduces restrict_forward exactly: routing
    restricted to an expert subset softmaxes over that subset's gate
    columns, which is precisely the extracted gate matrix, and mixing
    weights are renormalized over the same selected scores. Requires a
    uniform active-expert count across layers so the result is a regular
    network of its own.
    """
    spec.validate_against(model.cfg)
    widths = {len(ids) for ids in spec.active_experts}
    if len(widths) != 1:
        raise SpecIncompatible("extract needs the same expert count on every layer")
    width = widths.pop()
    cfg = replace(model.cfg, n_layers=len(spec.active_layers),
                  n_experts=width, top_k=spec.top_k)
    out = MoeTransformer(cfg, seed=0)

    def copy_into(dst, src) -> None:
        dst.data = np.array(src.data, copy=True)

    copy_into(out.embed_text, model.embed_text)
    copy_into(out.embed_vision, model.embed_vision)
    for dst, src in zip(out.audio_tables, model.audio_tables):
        copy_into(dst, src)
    copy_into(out.final_g, model.final_g)
    copy_into(out.head_text, model.head_text)
    copy_into(out.head_vision, model.head_vision)
    for dst, src in zip(out.audio_heads, model.audio_heads):
        copy_into(dst, src)
    for new_idx, (old_idx, ids) in enumerate(zip(spec.active_layers, spec.active_experts)):
        src, dst = model.layers[old_idx], out.layers[new_idx]
        sel = np.asarray(ids, dtype=np.intp)
        for attr in ("ln1", "wq", "wk", "wv", "wo", "ln2"):
            copy_into(getattr(dst, attr), getattr(src, attr))
        dst.gate.data = np.array(src.gate.data[:, sel], copy=True)
        dst.w1.data = np.array(src.w1.data[sel], copy=True)
        dst.b1.data = np.array(src.b1.data[sel], copy=True)
        dst.w2.data = np.array(src.w2.data[sel], copy=True)
        dst.b2.data = np.array(src.b2.data[sel], copy=True)
        out.router_biases[new_idx] = model.router_biases[old_idx][sel].copy()
    return out
