"""Policy-optimization objectives and a rollout scheduling simulator.

Four clipped-surrogate objectives over rollout groups, all calibrated by
a trust band [alpha, beta] on the ratio between the training engine's
and the inference engine's token probabilities under the frozen rollout
policy. The band zeroes both value and gradient for out-of-band tokens
(token-level form), out-of-band sequences (sequence-level form), or any
rollout with a single out-of-band token (mixed form). A well-learned
sample mask and an annealed hinting schedule round out the set.

The scheduling simulator models a generation pool of slot_count =
train_batch * buffer_factor slots where every occupied slot emits one
token per discrete step and training itself takes zero steps. Three
policies differ in what each training iteration consumes:

  sync   batch barrier: iteration t runs only group t's responses and
         waits for all of them.
  april  first-completed: the pool streams all responses continuously
         and each iteration trains on the next batch of completions,
         whichever queries they came from (biased toward short ones).
  urb    data order preserved: the pool streams continuously but
         iteration t trains exactly on group t's responses, however
         long its slowest member takes; spare slots run ahead.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigInvalid, InvalidWorkload
from .kernel import register_grad_case

ADV_STD_FLOOR = 1e-6


# -- rollouts and parameters ------------------------------------------------


@dataclass(frozen=True)
class Rollout:
    """One sampled response with per-token log-probs under three policies.

    lp_infer_old and lp_train_old are the inference and training engines'
    log-probs at rollout time (same parameters, possibly different
    numerics); lp_train_new is the current policy being optimized.
    """

    lp_infer_old: np.ndarray
    lp_train_old: np.ndarray
    lp_train_new: np.ndarray
    reward: float
    entropy: float = 0.0

    def __post_init__(self):
        arrays = {}
        for name in ("lp_infer_old", "lp_train_old", "lp_train_new"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1 or arr.size == 0:
                raise ValueError(f"{name} must be a non-empty 1-D array")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")
            arrays[name] = arr
        lengths = {a.size for a in arrays.values()}
        if len(lengths) != 1:
            raise ValueError(f"log-prob arrays disagree on length: {lengths}")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.lp_train_new.size


@dataclass(frozen=True)
class RolloutGroup:
    query_id: int
    rollouts: tuple[Rollout, ...]

    def __post_init__(self):
        object.__setattr__(self, "rollouts", tuple(self.rollouts))
        if not self.rollouts:
            raise ValueError("a rollout group cannot be empty")

    @property
    def acc(self) -> float:
        """Fraction of rollouts with positive reward."""
        return float(np.mean([r.reward > 0 for r in self.rollouts]))

    def group_relative_advantages(self) -> np.ndarray:
        """Per-rollout (reward - mean)/std with a 1e-6 std floor.

        A group whose rewards are all identical carries no learning
        signal, so it gets exactly zero advantages rather than a blowup.
        """
        if len(self.rollouts) < 2:
            raise ValueError("group-relative advantages need at least 2 rollouts")
        r = np.array([ro.reward for ro in self.rollouts], dtype=np.float64)
        std = r.std()
        if std == 0.0:
            return np.zeros_like(r)
        return (r - r.mean()) / max(std, ADV_STD_FLOOR)


@dataclass(frozen=True)
class MiscParams:
    alpha: float
    beta: float
    eps: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0 <= self.beta:
            raise ConfigInvalid(
                f"band must satisfy 0 < alpha <= 1 <= beta, got [{self.alpha}, {self.beta}]")
        if not 0.0 < self.eps < 1.0:
            raise ConfigInvalid(f"eps must lie in (0, 1), got {self.eps}")


@dataclass(frozen=True)
class WpsmParams:
    """eta: entropy stability bound; tau: group accuracy threshold.

    eps is the surrogate clip width; it mirrors MiscParams.eps because
    the masked objective still runs the same clipped sequence surrogate.
    """

    eta: float
    tau: float
    alpha_mask: float
    eps: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.alpha_mask <= 1.0:
            raise ConfigInvalid(f"alpha_mask must lie in [0, 1], got {self.alpha_mask}")
        if not 0.0 < self.eps < 1.0:
            raise ConfigInvalid(f"eps must lie in (0, 1), got {self.eps}")


@dataclass(frozen=True)
class HintParams:
    p_initial: float
    gamma: float

    def __post_init__(self):
        if not 0.0 <= self.p_initial <= 1.0:
            raise ConfigInvalid(f"p_initial must lie in [0, 1], got {self.p_initial}")
        if self.gamma < 0.0:
            raise ConfigInvalid(f"gamma must be non-negative, got {self.gamma}")


# -- objectives ---------------------------------------------------------------


def mask_band(k: float, alpha: float, beta: float) -> float:
    """k if it lies in the closed band [alpha, beta], else 0."""
    return k if alpha <= k <= beta else 0.0


def gspo_seq_ratio(rollout: Rollout) -> float:
    """Length-normalized policy ratio exp(mean(lp_new - lp_old)), log-space."""
    return float(np.exp(np.mean(rollout.lp_train_new - rollout.lp_train_old)))


def _clipped_surrogate(ratio: Tensor, adv: float, eps: float) -> Tensor:
    return ad.minimum(ad.mul(ratio, adv),
                      ad.mul(ad.clip(ratio, 1.0 - eps, 1.0 + eps), adv))


def _seq_ratio_tensor(lp_new: Tensor, rollout: Rollout) -> Tensor:
    return ad.exp(ad.tmean(ad.add(lp_new, -rollout.lp_train_old)))


def grpo_icepop_core(lp_new: Sequence[Tensor], group: RolloutGroup,
                     params: MiscParams) -> Tensor:
    """Token-level banded objective as a differentiable graph.

    Per token: band(train_old/infer_old) * min(r*A, clip(r)*A) with
    r = exp(lp_new - lp_train_old); averaged over each rollout's tokens
    (band zeros count in the denominator), then over rollouts.
    """
    advs = group.group_relative_advantages()
    total = None
    for lp, ro, adv in zip(lp_new, group.rollouts, advs):
        calib = np.exp(ro.lp_train_old - ro.lp_infer_old)
        gate = np.where((calib >= params.alpha) & (calib <= params.beta), calib, 0.0)
        ratio = ad.exp(ad.add(lp, -ro.lp_train_old))
        m = ad.tmean(ad.mul(_clipped_surrogate(ratio, float(adv), params.eps), gate))
        total = m if total is None else ad.add(total, m)
    return ad.mul(total, 1.0 / len(group.rollouts))


def gspo_icepop_core(lp_new: Sequence[Tensor], group: RolloutGroup,
                     params: MiscParams) -> Tensor:
    """Sequence-level variant: band the length-normalized calibration
    ratio, clip the length-normalized policy ratio s_i."""
    advs = group.group_relative_advantages()
    total = None
    for lp, ro, adv in zip(lp_new, group.rollouts, advs):
        calib = math.exp(float(np.mean(ro.lp_train_old - ro.lp_infer_old)))
        gate = mask_band(calib, params.alpha, params.beta)
        s = _seq_ratio_tensor(lp, ro)
        m = ad.mul(_clipped_surrogate(s, float(adv), params.eps), gate)
        total = m if total is None else ad.add(total, m)
    return ad.mul(total, 1.0 / len(group.rollouts))


def mixed_icepop_core(lp_new: Sequence[Tensor], group: RolloutGroup,
                      params: MiscParams) -> Tensor:
    """Mixed variant: token-level band as an all-or-nothing rollout gate.

    A rollout survives only if every token calibration ratio lies in the
    band; survivors are weighted by the geometric mean of those ratios
    and optimized with the sequence-level clipped surrogate.
    """
    advs = group.group_relative_advantages()
    total = None
    for lp, ro, adv in zip(lp_new, group.rollouts, advs):
        log_calib = ro.lp_train_old - ro.lp_infer_old
        calib = np.exp(log_calib)
        if np.all((calib >= params.alpha) & (calib <= params.beta)):
            gate = math.exp(float(np.mean(log_calib)))
        else:
            gate = 0.0
        s = _seq_ratio_tensor(lp, ro)
        m = ad.mul(_clipped_surrogate(s, float(adv), params.eps), gate)
        total = m if total is None else ad.add(total, m)
    return ad.mul(total, 1.0 / len(group.rollouts))


def wpsm_core(lp_new: Sequence[Tensor], group: RolloutGroup,
              params: WpsmParams) -> Tensor:
    """Well-learned positive sample masking over the sequence surrogate.

    A rollout is down-weighted by (1 - alpha_mask) when its entropy sits
    below eta while the whole group's accuracy exceeds tau; everything
    else trains at full weight.
    """
    advs = group.group_relative_advantages()
    acc = group.acc
    total = None
    for lp, ro, adv in zip(lp_new, group.rollouts, advs):
        mask = params.alpha_mask if (ro.entropy < params.eta and acc > params.tau) else 0.0
        s = _seq_ratio_tensor(lp, ro)
        m = ad.mul(_clipped_surrogate(s, float(adv), params.eps), 1.0 - mask)
        total = m if total is None else ad.add(total, m)
    return ad.mul(total, 1.0 / len(group.rollouts))


@dataclass(frozen=True)
class ObjectiveResult:
    value: float
    grads: tuple[np.ndarray, ...]   # d value / d lp_train_new, one per rollout


def _evaluate(core, group, params) -> ObjectiveResult:
    lp_new = [Tensor(ro.lp_train_new, requires_grad=True) for ro in group.rollouts]
    out = core(lp_new, group, params)
    out.backward()
    return ObjectiveResult(float(out.data),
                           tuple(t.grad.copy() for t in lp_new))


def grpo_icepop_objective(group: RolloutGroup, params: MiscParams) -> ObjectiveResult:
    return _evaluate(grpo_icepop_core, group, params)


def gspo_icepop_objective(group: RolloutGroup, params: MiscParams) -> ObjectiveResult:
    return _evaluate(gspo_icepop_core, group, params)


def mixed_icepop_objective(group: RolloutGroup, params: MiscParams) -> ObjectiveResult:
    return _evaluate(mixed_icepop_core, group, params)


def wpsm_objective(group: RolloutGroup, params: WpsmParams) -> ObjectiveResult:
    return _evaluate(wpsm_core, group, params)


# -- annealed hinting ---------------------------------------------------------


def hint_prob(params: HintParams, t: int, pass_initial: float) -> float:
    """Annealed hint fraction p_initial * exp(-gamma * t * pass_initial).

    Queries the model already passes sometimes (pass_initial > 0) lose
    their hints over iterations; impossible ones keep them indefinitely.
    """
    if t < 0:
        raise ValueError(f"iteration must be non-negative, got {t}")
    if not 0.0 <= pass_initial <= 1.0:
        raise ValueError(f"pass_initial must lie in [0, 1], got {pass_initial}")
    return params.p_initial * math.exp(-params.gamma * t * pass_initial)


def build_hinted_query(query: Sequence, think: Sequence, p: float) -> list:
    """Append the first ceil(p * len(think)) think tokens to the query."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"hint fraction must lie in [0, 1], got {p}")
    take = math.ceil(p * len(think))
    return list(query) + list(think[:take])


# -- rollout scheduling simulator --------------------------------------------


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    trained_queries: tuple[int, ...]   # query id per trained response
    mean_true_length: float
    wall_steps: int                    # cumulative wall clock at train time
    idle_slot_steps: int               # idle within this iteration's window


@dataclass(frozen=True)
class TraceMetrics:
    policy: str
    seed: int
    slot_count: int
    iterations: tuple[IterationRecord, ...]
    total_wall_steps: int
    total_idle_slot_steps: int


def _validate_workload(workload, train_batch: int, buffer_factor: int,
                       group_size: int) -> list[list[int]]:
    if train_batch < 1 or buffer_factor < 1 or group_size < 1:
        raise InvalidWorkload("train_batch, buffer_factor, group_size must be >= 1")
    if not workload:
        raise InvalidWorkload("workload has no queries")
    clean = []
    for q, lengths in enumerate(workload):
        lengths = list(lengths)
        if len(lengths) != group_size:
            raise InvalidWorkload(
                f"query {q} has {len(lengths)} responses, expected {group_size}")
        for L in lengths:
            if int(L) != L or L < 1:
                raise InvalidWorkload(f"query {q} has non-positive length {L}")
        clean.append([int(L) for L in lengths])
    if len(clean) % train_batch:
        raise InvalidWorkload(
            f"{len(clean)} queries do not divide into batches of {train_batch}")
    return clean


def _stream_schedule(lengths: Sequence[int], slots: int) -> tuple[np.ndarray, np.ndarray]:
    """Assign responses to slots in data order; return start/end steps.

    A response occupies its slot for steps [start, end); ties between
    simultaneously free slots resolve by slot index, so the schedule is
    deterministic.
    """
    free: list[tuple[int, int]] = [(0, s) for s in range(slots)]
    heapq.heapify(free)
    start = np.empty(len(lengths), dtype=np.int64)
    end = np.empty(len(lengths), dtype=np.int64)
    for i, L in enumerate(lengths):
        t, s = heapq.heappop(free)
        start[i], end[i] = t, t + L
        heapq.heappush(free, (t + L, s))
    return start, end


def _tokens_in_window(start: np.ndarray, end: np.ndarray, lo: int, hi: int) -> int:
    return int(np.sum(np.clip(np.minimum(end, hi) - np.maximum(start, lo), 0, None)))


def simulate_rollout_scheduling(policy: str, workload, train_batch: int,
                                buffer_factor: int, group_size: int,
                                seed: int = 0) -> TraceMetrics:
    """Discrete-time rollout scheduling under sync, april, or urb.

    ``workload[q]`` lists the true token lengths of query q's group_size
    responses; queries are consumed in order, train_batch per iteration.
    The pool has train_batch * buffer_factor slots, each emitting one
    token per occupied step. Training itself costs zero steps. The seed
    is recorded for provenance; the schedule is fully deterministic.
    """
    if policy not in ("sync", "april", "urb"):
        raise InvalidWorkload(f"unknown policy {policy!r}")
    queries = _validate_workload(workload, train_batch, buffer_factor, group_size)
    slots = train_batch * buffer_factor
    n_iters = len(queries) // train_batch
    per_iter = train_batch * group_size
    flat_lengths = [L for q in queries for L in q]
    flat_query = [q for q in range(len(queries)) for _ in range(group_size)]

    records: list[IterationRecord] = []
    if policy == "sync":
        wall = 0
        total_idle = 0
        for it in range(n_iters):
            lo, hi = it * per_iter, (it + 1) * per_iter
            batch = flat_lengths[lo:hi]
            _, end = _stream_schedule(batch, slots)
            span = int(end.max())
            idle = slots * span - sum(batch)
            wall += span
            total_idle += idle
            records.append(IterationRecord(
                it, tuple(flat_query[lo:hi]), float(np.mean(batch)), wall, idle))
        return TraceMetrics("sync", seed, slots, tuple(records), wall, total_idle)

    start, end = _stream_schedule(flat_lengths, slots)
    if policy == "urb":
        boundaries = []
        prev = 0
        for it in range(n_iters):
            lo, hi = it * per_iter, (it + 1) * per_iter
            prev = max(prev, int(end[lo:hi].max()))
            boundaries.append((lo, hi, prev))
    else:  # april: train on the next per_iter completions, in completion order
        order = sorted(range(len(flat_lengths)), key=lambda i: (end[i], i))
        boundaries = []
        for it in range(n_iters):
            ranked = order[it * per_iter:(it + 1) * per_iter]
            boundaries.append((ranked, None, int(end[ranked[-1]])))

    prev_wall = 0
    total_idle = 0
    for it, entry in enumerate(boundaries):
        if policy == "urb":
            lo, hi, wall = entry
            trained = list(range(lo, hi))
        else:
            trained, _, wall = entry
        idle = slots * (wall - prev_wall) - _tokens_in_window(start, end, prev_wall, wall)
        total_idle += idle
        records.append(IterationRecord(
            it,
            tuple(flat_query[i] for i in trained),
            float(np.mean([flat_lengths[i] for i in trained])),
            wall, idle))
        prev_wall = wall
    return TraceMetrics(policy, seed, slots, tuple(records), prev_wall, total_idle)


# -- gradient-check registrations ---------------------------------------------


def _case_group() -> RolloutGroup:
    rng = np.random.default_rng(41)
    rollouts = []
    for reward in (1.0, 0.0, 1.0, 0.0):
        n = int(rng.integers(3, 7))
        lp_infer = -rng.random(n) - 0.1
        lp_train_old = lp_infer + rng.normal(0.0, 0.15, n)
        lp_new = lp_train_old + rng.normal(0.0, 0.1, n)
        rollouts.append(Rollout(lp_infer, lp_train_old, lp_new, reward,
                                entropy=float(rng.random())))
    return RolloutGroup(0, tuple(rollouts))


_CASE_GROUP = _case_group()
_CASE_MISC = MiscParams(alpha=0.9, beta=1.1, eps=0.2)
_CASE_WPSM = WpsmParams(eta=0.6, tau=0.4, alpha_mask=0.5, eps=0.2)


def _case_inputs() -> list[np.ndarray]:
    return [ro.lp_train_new for ro in _CASE_GROUP.rollouts]


register_grad_case("rl.grpo_icepop",
                   lambda *lp: grpo_icepop_core(lp, _CASE_GROUP, _CASE_MISC),
                   _case_inputs)
register_grad_case("rl.gspo_icepop",
                   lambda *lp: gspo_icepop_core(lp, _CASE_GROUP, _CASE_MISC),
                   _case_inputs)
register_grad_case("rl.mixed_icepop",
                   lambda *lp: mixed_icepop_core(lp, _CASE_GROUP, _CASE_MISC),
                   _case_inputs)
register_grad_case("rl.wpsm",
                   lambda *lp: wpsm_core(lp, _CASE_GROUP, _CASE_WPSM),
                   _case_inputs)
