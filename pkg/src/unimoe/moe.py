"""Expert routing with bias-steered, loss-free load balancing.

Gate scores are a softmax over expert logits. Selection adds a per-expert
bias to the scores and takes the top k (ties to the lower expert index);
the bias steers load only and never touches the mixing weights, which are
the raw scores of the selected experts renormalized to sum to one. After
each step the bias moves a fixed distance toward whichever experts were
underloaded:

    b_i <- b_i + u * sign(mean(loads) - loads_i)

Full-scale recipes start u around 1e-4 and drop it to 1e-5 late in
training; the desk-scale defaults here are larger because runs are short.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import AllZeroLoads, KTooLarge, ShapeMismatch


@dataclass
class RouterState:
    gate: np.ndarray          # [d, E] gate projection
    bias: np.ndarray          # [E] selection bias, balance-steered
    update_speed: float = 1e-3

    def __post_init__(self):
        self.gate = np.asarray(self.gate, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.gate.ndim != 2 or self.bias.shape != (self.gate.shape[1],):
            raise ShapeMismatch(
                f"gate {self.gate.shape} and bias {self.bias.shape} disagree")

    @property
    def n_experts(self) -> int:
        return self.gate.shape[1]


@dataclass
class DispatchPlan:
    """Routing decision for one batch of tokens.

    ``expert_ids[t]`` lists token t's experts in selection order (highest
    biased score first, ties to the lower index); ``weights[t]`` are the
    matching mixing weights, each row summing to one.
    """

    expert_ids: np.ndarray   # [n, k] int
    weights: np.ndarray      # [n, k] float
    n_experts: int

    def loads(self) -> np.ndarray:
        """Tokens assigned to each expert, length n_experts."""
        return np.bincount(self.expert_ids.reshape(-1),
                           minlength=self.n_experts).astype(np.float64)

    def tokens_for_expert(self, expert: int) -> np.ndarray:
        """Ascending token indices routed to ``expert``."""
        return np.flatnonzero((self.expert_ids == expert).any(axis=1))


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def topk_by_score(selection_scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ties to the lower index."""
    order = np.argsort(-selection_scores, axis=-1, kind="stable")
    return order[..., :k]


def route(tokens, state: RouterState, k: int) -> DispatchPlan:
    """Assign every token to exactly k distinct experts.

    ``tokens`` is [n, d] (Tensor or ndarray). Gate scores are softmaxed
    logits; the bias participates in selection only. KTooLarge is raised
    when k exceeds the expert count.
    """
    x = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens, dtype=np.float64)
    n_experts = state.n_experts
    if not 1 <= k <= n_experts:
        raise KTooLarge(f"top-{k} of {n_experts} experts is not routable")
    if x.ndim != 2 or x.shape[1] != state.gate.shape[0]:
        raise ShapeMismatch(f"tokens {x.shape} do not match gate {state.gate.shape}")
    scores = softmax_rows(x @ state.gate)
    chosen = topk_by_score(scores + state.bias, k)
    picked = np.take_along_axis(scores, chosen, axis=1)
    weights = picked / picked.sum(axis=1, keepdims=True)
    return DispatchPlan(expert_ids=chosen, weights=weights, n_experts=n_experts)


def combine(expert_outputs: np.ndarray, plan: DispatchPlan) -> np.ndarray:
    """Mix per-slot expert outputs [n, k, d] into token outputs [n, d].

    Summation runs in selection order, matching the model's own combine.
    """
    outputs = np.asarray(expert_outputs, dtype=np.float64)
    if outputs.shape[:2] != plan.expert_ids.shape:
        raise ShapeMismatch(
            f"outputs {outputs.shape} do not align with plan {plan.expert_ids.shape}")
    return np.einsum("nkd,nk->nd", outputs, plan.weights, optimize=True)


def update_bias(state: RouterState, loads: np.ndarray) -> RouterState:
    """Move the selection bias one notch toward balance; mutates ``state``.

    Underloaded experts (load below the mean) gain bias, overloaded ones
    lose it, each by exactly ``update_speed``; sign(0) keeps an exactly
    average expert unchanged.
    """
    loads = np.asarray(loads, dtype=np.float64)
    if loads.shape != (state.n_experts,):
        raise ShapeMismatch(f"loads {loads.shape} do not match {state.n_experts} experts")
    state.bias = state.bias + state.update_speed * np.sign(loads.mean() - loads)
    return state


def normalized_entropy(loads: np.ndarray) -> float:
    """Entropy of the load distribution over experts, scaled to [0, 1].

    1.0 means perfectly uniform usage, 0.0 means a single expert takes
    everything. A single-expert layer is reported as balanced (1.0).
    Raises AllZeroLoads when no token was routed at all.
    """
    loads = np.asarray(loads, dtype=np.float64)
    total = loads.sum()
    if total <= 0.0:
        raise AllZeroLoads("cannot measure balance of all-zero loads")
    if loads.size == 1:
        return 1.0
    p = loads / total
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(-terms.sum() / math.log(loads.size)) + 0.0


def top_share_iou(loads_a: np.ndarray, loads_b: np.ndarray,
                  fraction: float = 0.25) -> float:
    """Overlap of the most-used expert sets under two load profiles.

    Takes the ceil(fraction * E) most frequent experts of each profile
    (ties to the lower index) and returns intersection over union.
    """
    a = np.asarray(loads_a, dtype=np.float64)
    b = np.asarray(loads_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatch(f"load profiles disagree: {a.shape} vs {b.shape}")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if a.sum() <= 0.0 or b.sum() <= 0.0:
        raise AllZeroLoads("cannot rank experts with all-zero loads")
    m = math.ceil(fraction * a.size)
    top_a = set(topk_by_score(a, m).tolist())
    top_b = set(topk_by_score(b, m).tolist())
    return len(top_a & top_b) / len(top_a | top_b)
