"""Differentiable core ops and the finite-difference gradient contract.

masked_attention and cross_entropy are the two numeric workhorses every
model in this package shares. Both are exact float64 and both are wired
into GRAD_CASES, a package-wide registry of differentiable operations
with seeded inputs; the test suite runs grad_check over every entry and
holds the line at 1e-5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyAttentionRow, IndexOutOfVocab, NonFiniteGradient
from .masks import MaskSpec, densify


def masked_softmax(scores: Tensor, visible: np.ndarray) -> Tensor:
    """Softmax over the visible entries of each row; invisible entries get 0.

    ``visible`` is a boolean array broadcastable to ``scores``. Rows are
    shifted by their visible maximum before exponentiation, so arbitrarily
    large scores stay finite. Rows with no visible entry must be rejected
    by the caller beforehand.
    """
    s = scores.data
    vis = np.broadcast_to(visible, s.shape)
    neg_inf = np.where(vis, s, -np.inf)
    rowmax = neg_inf.max(axis=-1, keepdims=True)
    e = np.where(vis, np.exp(np.where(vis, s - rowmax, 0.0)), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    data = e / denom

    def vjp(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return ad._node(data, (scores,), vjp)


def masked_attention(q, k, v, mask: MaskSpec, scale: float | None = None) -> Tensor:
    """Scaled dot-product attention restricted to a MaskSpec.

    q, k, v have shape [..., n, d] (leading axes share the mask). Raises
    EmptyAttentionRow before any exponentiation if some query row has no
    visible key, since its softmax would be undefined.
    """
    q = q if isinstance(q, Tensor) else Tensor(q)
    k = k if isinstance(k, Tensor) else Tensor(k)
    v = v if isinstance(v, Tensor) else Tensor(v)
    n, d = q.shape[-2], q.shape[-1]
    if mask.n != n:
        raise ValueError(f"mask covers {mask.n} tokens but q has {n} rows")
    visible = densify(mask)
    rows_without_keys = np.flatnonzero(~visible.any(axis=1))
    if rows_without_keys.size:
        raise EmptyAttentionRow(f"query rows {rows_without_keys.tolist()} see no key")
    if scale is None:
        scale = 1.0 / math.sqrt(d)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, _swap_last(k.ndim))), scale)
    attn = masked_softmax(scores, visible)
    return ad.matmul(attn, v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean negative log-softmax over rows of ``logits``.

    ``targets`` holds one class id per row; every id must lie inside the
    vocabulary axis or IndexOutOfVocab is raised. ``weights`` defaults to
    ones; the result is sum(w * nll) / sum(w), so a zero-weight token
    contributes nothing to either the value or the gradient. All-zero
    weights give an empty objective, reported as exactly 0.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    n, vocab = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} does not match {n} rows")
    bad = (targets < 0) | (targets >= vocab)
    if bad.any():
        raise IndexOutOfVocab(
            f"target ids {np.unique(targets[bad]).tolist()} outside vocab of size {vocab}")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ValueError(f"weights shape {w.shape} does not match {n} rows")
    total = w.sum()
    if total == 0.0:
        return Tensor(0.0)
    # Shift by the row max; the shift has zero gradient through logsumexp.
    shift = logits.data.max(axis=1, keepdims=True)
    lse = ad.add(ad.log(ad.tsum(ad.exp(ad.add(logits, -shift)), axis=1)), shift[:, 0])
    picked = ad.take_at(logits, np.arange(n), targets)
    nll = ad.add(lse, ad.mul(picked, -1.0))
    return ad.mul(ad.tsum(ad.mul(nll, w)), 1.0 / total)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
               eps: float = 1e-6) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps one Tensor per input array to a scalar Tensor. Returns the
    maximum over all input coordinates of

        |analytic - central| / max(1, |central|)

    and raises NonFiniteGradient if any value or gradient fails to be
    finite. eps is the half-step of the central difference.
    """
    leaves = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    if out.size != 1:
        raise ValueError("grad_check requires a scalar-valued fn")
    if not np.isfinite(out.data).all():
        raise NonFiniteGradient("objective value is not finite")
    out.backward()
    analytic = [np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
                for leaf in leaves]
    if any(not np.isfinite(g).all() for g in analytic):
        raise NonFiniteGradient("analytic gradient is not finite")

    worst = 0.0
    with ad.no_grad():
        for idx, leaf in enumerate(leaves):
            base = leaf.data
            flat = base.reshape(-1)
            for coord in range(flat.size):
                keep = flat[coord]
                flat[coord] = keep + eps
                hi = float(fn(*leaves).data)
                flat[coord] = keep - eps
                lo = float(fn(*leaves).data)
                flat[coord] = keep
                central = (hi - lo) / (2.0 * eps)
                if not math.isfinite(central):
                    raise NonFiniteGradient(f"central difference diverged at input {idx}")
                err = abs(analytic[idx].reshape(-1)[coord] - central) / max(1.0, abs(central))
                worst = max(worst, err)
    return worst


@dataclass(frozen=True)
class GradCheckCase:
    """A named differentiable op with a seeded scalar-valued harness."""

    name: str
    fn: Callable[..., Tensor]
    make_inputs: Callable[[], list[np.ndarray]]
    eps: float = 1e-6


GRAD_CASES: list[GradCheckCase] = []


def register_grad_case(name: str, fn: Callable[..., Tensor],
                       make_inputs: Callable[[], list[np.ndarray]],
                       eps: float = 1e-6) -> None:
    """Add an op to the package-wide gradient-check registry."""
    GRAD_CASES.append(GradCheckCase(name, fn, make_inputs, eps))


def _attention_case() -> list[np.ndarray]:
    rng = np.random.default_rng(7)
    n, d = 6, 4
    return [rng.standard_normal((n, d)) for _ in range(3)] + [rng.standard_normal((n, d))]


def _attention_loss(q: Tensor, k: Tensor, v: Tensor, probe: Tensor) -> Tensor:
    from .masks import build_causal

    out = masked_attention(q, k, v, build_causal(q.shape[0]))
    return ad.tsum(ad.mul(out, probe))


def _cross_entropy_case() -> list[np.ndarray]:
    rng = np.random.default_rng(11)
    return [rng.standard_normal((5, 7))]


def _cross_entropy_loss(logits: Tensor) -> Tensor:
    targets = np.array([0, 3, 6, 2, 2])
    weights = np.array([1.0, 0.5, 2.0, 0.0, 1.0])
    return cross_entropy(logits, targets, weights)


register_grad_case("masked_attention.causal", _attention_loss, _attention_case)
register_grad_case("cross_entropy.weighted", _cross_entropy_loss, _cross_entropy_case)
