"""Optimizer, training loop, evaluation, and checkpoint round-trips.

Each step trains one modality's batch (modalities rotate), optionally
under a sampled sub-model spec when an elastic schedule is configured.
Router selection biases are nudged after every step from that step's
observed expert loads; restricted steps only touch the active experts'
biases. All randomness flows from the run seed, so a repeated run is
bit-identical.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import autodiff as ad
from ..audio import fit_codebooks, rvq_encode
from ..autodiff import Tensor, no_grad
from ..elastic import SubModelSpec, sample_spec
from ..errors import CheckpointMissing, ConfigInvalid, NonFiniteGradient
from ..model import ModelConfig, MoeTransformer, RouteTrace
from ..sequence import TokenSequence
from ..vision import ScalePyramid, build_nfsp_sequence, build_pyramid_codes
from . import corpus
from .artifacts import load_arrays, save_arrays
from .config import RunConfig
from .schedules import ModalityLossRescaler, batch_ramp, cosine_anneal, wsd_lr


class Adam:
    """Standard Adam with bias correction; lr is passed per step."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise NonFiniteGradient("non-finite gradient in optimizer step")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


# -- data preparation ---------------------------------------------------------


@dataclass
class PreparedData:
    train: dict[str, list[TokenSequence]]
    held_out: dict[str, list[TokenSequence]]


def _split(items: list, eval_fraction: float) -> tuple[list, list]:
    n_eval = max(1, int(round(len(items) * eval_fraction))) if items else 0
    if n_eval >= len(items):
        return items, items
    return items[:-n_eval], items[-n_eval:]


def prepare_data(cfg: RunConfig) -> PreparedData:
    d, m = cfg.data, cfg.model
    train: dict[str, list[TokenSequence]] = {}
    held: dict[str, list[TokenSequence]] = {}
    if d.text_sequences:
        grid = corpus.gen_text(d.text_sequences, seed=cfg.seed * 10 + 1,
                               length=d.text_len + 1, vocab=m.vocab,
                               n_modes=d.text_modes)
        seqs = [corpus.text_sequence(row) for row in grid]
        train["text"], held["text"] = _split(seqs, d.eval_fraction)
    if d.vision_sequences:
        pyramid = ScalePyramid(d.vision_grids)
        count = d.vision_sequences * d.vision_frames
        latents = corpus.gen_vision(count, seed=cfg.seed * 10 + 2,
                                    grid=pyramid.finest, bits=m.bits)
        seqs = []
        for i in range(d.vision_sequences):
            frames = [build_pyramid_codes(latents[i * d.vision_frames + f], pyramid)
                      for f in range(d.vision_frames)]
            seqs.append(build_nfsp_sequence(frames, flip_prob=d.vision_flip_prob,
                                            seed=cfg.seed * 100000 + i,
                                            window=d.vision_window))
        train["vision"], held["vision"] = _split(seqs, d.eval_fraction)
    if d.audio_sequences:
        feats = corpus.gen_audio(d.audio_sequences, seed=cfg.seed * 10 + 3,
                                 frames=d.audio_frames + 1, dim=d.audio_feature_dim)
        books = fit_codebooks(feats.reshape(-1, d.audio_feature_dim),
                              levels=m.audio_levels,
                              codes_per_level=m.audio_codebook,
                              seed=cfg.seed * 10 + 4)
        seqs = [corpus.audio_token_sequence(rvq_encode(feats[i], books))
                for i in range(d.audio_sequences)]
        train["audio"], held["audio"] = _split(seqs, d.eval_fraction)
    if not train:
        raise ConfigInvalid("no modality has any sequences configured")
    return PreparedData(train, held)


# -- training -----------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    modality: str
    lr: float
    batch: int
    loss_raw: float
    loss_scaled: float
    sub_model: bool


@dataclass
class TrainResult:
    model: MoeTransformer
    history: list[StepRecord]
    eval_losses: dict[str, float]
    eval_trace: RouteTrace
    data: PreparedData | None = field(repr=False, default=None)


def _bias_update(biases: np.ndarray, loads: np.ndarray,
                 active: np.ndarray | None, speed: float) -> None:
    if active is None:
        biases += speed * np.sign(loads.mean() - loads)
    else:
        sub = loads[active]
        biases[active] += speed * np.sign(sub.mean() - sub)


def _batched_losses(model: MoeTransformer, seqs: list[TokenSequence],
                    spec: SubModelSpec | None, chunk: int,
                    trace_into: RouteTrace | None = None) -> dict[str, tuple[float, int]]:
    """Token-weighted losses over a pool, chunked to bound graph size."""
    sums: dict[str, tuple[float, int]] = {}
    for lo in range(0, len(seqs), chunk):
        with no_grad():
            bundle = model.loss_components(seqs[lo:lo + chunk], spec=spec)
        for name, loss in bundle.losses.items():
            count = bundle.token_counts[name]
            prev = sums.get(name, (0.0, 0))
            sums[name] = (prev[0] + float(loss.data) * count, prev[1] + count)
        if trace_into is not None:
            for li in range(model.cfg.n_layers):
                trace_into.loads[li] += bundle.trace.loads[li]
                for code, vec in bundle.trace.modality_loads[li].items():
                    bucket = trace_into.modality_loads[li].setdefault(
                        code, np.zeros(model.cfg.n_experts))
                    bucket += vec
    return sums


def evaluate(model: MoeTransformer, pools: dict[str, list[TokenSequence]],
             spec: SubModelSpec | None = None, chunk: int = 16,
             collect_trace: bool = False) -> tuple[dict[str, float], RouteTrace | None]:
    trace = RouteTrace(model.cfg.n_layers, model.cfg.n_experts) if collect_trace else None
    losses: dict[str, float] = {}
    for name, seqs in pools.items():
        if not seqs:
            continue
        sums = _batched_losses(model, seqs, spec, chunk, trace_into=trace)
        total, count = sums[name]
        losses[name] = total / count
    return losses, trace


def train_model(cfg: RunConfig, data: PreparedData | None = None,
                model: MoeTransformer | None = None) -> TrainResult:
    data = data if data is not None else prepare_data(cfg)
    model = model if model is not None else MoeTransformer(cfg.model, seed=cfg.seed)
    opt = Adam([t for _, t in model.named_params()])
    rescaler = ModalityLossRescaler(cfg.train.ema_decay)
    rng = np.random.default_rng(cfg.seed * 10 + 7)
    modalities = [m for m in ("text", "vision", "audio") if data.train.get(m)]
    history: list[StepRecord] = []

    decay_steps = round(cfg.train.steps * cfg.train.decay_fraction)
    for step in range(cfg.train.steps):
        lr = wsd_lr(step, cfg.train.warmup_steps, cfg.train.peak_lr)
        tail = step - (cfg.train.steps - decay_steps)
        if tail >= 0:
            lr = min(lr, cosine_anneal(tail, decay_steps, cfg.train.peak_lr))
        batch = batch_ramp(step, cfg.train.batch_start, cfg.train.batch_end,
                           cfg.train.batch_ramp_steps)
        modality = modalities[step % len(modalities)]
        pool = data.train[modality]
        take = min(batch, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        seqs = [pool[i] for i in idx]
        spec = None
        if cfg.elastic is not None:
            spec = sample_spec(cfg.elastic, cfg.model, seed=int(rng.integers(2**32)))

        bundle = model.loss_components(seqs, spec=spec)
        total = None
        raw_sum = 0.0
        scaled_sum = 0.0
        for name, loss in bundle.losses.items():
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteGradient(f"{name} loss is non-finite at step {step}")
            mult = (rescaler.multiplier(name, value)
                    if cfg.train.rescale_losses else 1.0)
            term = ad.mul(loss, mult)
            total = term if total is None else ad.add(total, term)
            raw_sum += value
            scaled_sum += value * mult
        opt.zero_grad()
        total.backward()
        opt.step(lr)

        if spec is None:
            for li in range(cfg.model.n_layers):
                _bias_update(model.router_biases[li], bundle.trace.loads[li],
                             None, cfg.model.router_update_speed)
        else:
            for li, experts in zip(spec.active_layers, spec.active_experts):
                _bias_update(model.router_biases[li], bundle.trace.loads[li],
                             np.asarray(experts), cfg.model.router_update_speed)
        history.append(StepRecord(step, modality, lr, take, raw_sum, scaled_sum,
                                  spec is not None))

    eval_losses, eval_trace = evaluate(model, data.held_out, collect_trace=True)
    return TrainResult(model, history, eval_losses, eval_trace, data)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path: str | Path, model: MoeTransformer) -> Path:
    arrays = {f"param/{name}": t.data for name, t in model.named_params()}
    for i, b in enumerate(model.router_biases):
        arrays[f"router_bias/{i}"] = b
    blob = json.dumps(dataclasses.asdict(model.cfg), sort_keys=True).encode()
    arrays["config_json"] = np.frombuffer(blob, dtype=np.uint8)
    return save_arrays(path, arrays)


def load_checkpoint(path: str | Path) -> MoeTransformer:
    path = Path(path)
    if not path.exists():
        raise CheckpointMissing(f"checkpoint not found: {path}")
    arrays = load_arrays(path)
    cfg = ModelConfig(**json.loads(bytes(arrays["config_json"].tobytes()).decode()))
    model = MoeTransformer(cfg, seed=0)
    for name, t in model.named_params():
        stored = arrays[f"param/{name}"]
        if stored.shape != t.data.shape:
            raise CheckpointMissing(
                f"checkpoint param {name} has shape {stored.shape}, "
                f"expected {t.data.shape}")
        t.data = stored.astype(np.float64)
    for i in range(cfg.n_layers):
        model.router_biases[i][...] = arrays[f"router_bias/{i}"]
    return model
