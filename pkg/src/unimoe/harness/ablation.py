"""Elastic co-training studies: depth, width, and sparsity grids.

Each study jointly trains a supernet and one family of sub-models on the
permutation-grammar corpus, then evaluates held-out loss under each
inference configuration. All seeds of a study share one corpus (drawn
from DATA_SEED) so the seed axis varies initialization and batch order
only; grammar difficulty stays controlled. The expected orderings
(shallower worse, fewer experts worse, smaller top-k worse) are
summarized with per-seed margins and their seed-to-seed spread so a
caller can check that an ordering is consistent rather than a single
lucky draw.

Margin convention: for a (reduced, full) pair the per-seed margin is
loss(reduced) - loss(full); the ordering "holds with margin" on a seed
when that margin exceeds 3x the sample standard deviation of the margins
across seeds. The sparsity chain uses the k=1 vs k=8 endpoint margin,
plus a non-increasing check on the seed-mean losses over k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..elastic import ElasticSchedule, SubModelSpec, keep_layers
from ..model import ModelConfig
from .config import DataConfig, RunConfig, TrainConfig
from .training import evaluate, prepare_data, train_model

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class Study:
    name: str
    model: ModelConfig
    elastic: ElasticSchedule
    eval_specs: tuple[tuple[str, SubModelSpec], ...]
    steps: int = 120
    batch: int = 8
    peak_lr: float = 2e-3
    warmup: int = 30
    decay_fraction: float = 0.0
    sequences: int = 128
    text_len: int = 32


def _full_experts(cfg: ModelConfig, n_layers: int) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(range(cfg.n_experts)) for _ in range(n_layers))


def depth_study() -> Study:
    # The grammar is one-hop (gather the mode token, apply the permutation),
    # so a heavily co-trained single layer eventually closes the gap; the
    # 90/10 mix keeps the sub-model honest but under-trained, and the decay
    # tail stops the final losses from wobbling at full step size.
    cfg = ModelConfig(vocab=32, d_model=48, n_layers=4, n_heads=4, d_ff=256,
                      n_experts=8, top_k=2)
    kept = keep_layers(cfg.n_layers, 1)
    reduced = SubModelSpec(kept, _full_experts(cfg, len(kept)), cfg.top_k)
    return Study(
        name="depth",
        model=cfg,
        elastic=ElasticSchedule(p_full_depth=0.9, depth_options=(1,)),
        eval_specs=(("layers=4", SubModelSpec.full(cfg)),
                    ("layers=1", reduced)),
        decay_fraction=0.3,
    )


def width_study() -> Study:
    cfg = ModelConfig(vocab=32, d_model=32, n_layers=2, n_heads=4, d_ff=64,
                      n_experts=64, top_k=8)
    half = tuple(tuple(range(32)) for _ in range(cfg.n_layers))
    reduced = SubModelSpec(tuple(range(cfg.n_layers)), half, cfg.top_k)
    return Study(
        name="width",
        model=cfg,
        elastic=ElasticSchedule(p_full_width=0.8, width_options=(32,)),
        eval_specs=(("experts=64", SubModelSpec.full(cfg)),
                    ("experts=32", reduced)),
    )


def sparsity_study() -> Study:
    cfg = ModelConfig(vocab=32, d_model=48, n_layers=2, n_heads=4, d_ff=192,
                      n_experts=16, top_k=8)
    layers = tuple(range(cfg.n_layers))
    experts = _full_experts(cfg, cfg.n_layers)
    return Study(
        name="sparsity",
        model=cfg,
        elastic=ElasticSchedule(p_full_sparsity=0.8,
                                sparsity_options=(1, 2, 3, 4, 5, 6, 7)),
        eval_specs=tuple((f"top_k={k}", SubModelSpec(layers, experts, k))
                         for k in (1, 2, 4, 8)),
    )


STUDIES = {"depth": depth_study, "width": width_study, "sparsity": sparsity_study}


@dataclass(frozen=True)
class StudyRow:
    study: str
    seed: int
    label: str
    loss: float


DATA_SEED = 1009  # one corpus per study; seeds vary init and batch order only


def run_study(study: Study, seeds=DEFAULT_SEEDS,
              steps: int | None = None) -> list[StudyRow]:
    def cfg_for(seed: int) -> RunConfig:
        return RunConfig(
            seed=seed,
            model=study.model,
            data=DataConfig(text_sequences=study.sequences,
                            text_len=study.text_len),
            train=TrainConfig(steps=steps if steps is not None else study.steps,
                              warmup_steps=study.warmup,
                              peak_lr=study.peak_lr,
                              decay_fraction=study.decay_fraction,
                              batch_start=study.batch, batch_end=study.batch),
            elastic=study.elastic,
        )

    data = prepare_data(cfg_for(DATA_SEED))
    rows = []
    for seed in seeds:
        result = train_model(cfg_for(seed), data=data)
        for label, spec in study.eval_specs:
            losses, _ = evaluate(result.model, data.held_out, spec=spec)
            rows.append(StudyRow(study.name, seed, label, losses["text"]))
    return rows


def _by_label(rows: list[StudyRow]) -> dict[str, dict[int, float]]:
    out: dict[str, dict[int, float]] = {}
    for r in rows:
        out.setdefault(r.label, {})[r.seed] = r.loss
    return out


def summarize_pair(rows: list[StudyRow], reduced: str, full: str) -> dict:
    """Margins loss(reduced)-loss(full) per seed, 3-sigma pass count."""
    table = _by_label(rows)
    seeds = sorted(table[full])
    margins = np.array([table[reduced][s] - table[full][s] for s in seeds])
    sigma = float(margins.std(ddof=1)) if len(margins) > 1 else 0.0
    passes = int(np.sum(margins > 3.0 * sigma))
    return {"reduced": reduced, "full": full, "seeds": seeds,
            "margins": margins.tolist(), "sigma": sigma,
            "passes": passes, "total": len(seeds),
            "holds": passes >= min(4, len(seeds))}


def summarize_chain(rows: list[StudyRow], labels: list[str]) -> dict:
    """Endpoint margin labels[0]-labels[-1] per seed, plus a mean-loss
    non-increasing check along the chain."""
    table = _by_label(rows)
    seeds = sorted(table[labels[0]])
    margins = np.array([table[labels[0]][s] - table[labels[-1]][s] for s in seeds])
    sigma = float(margins.std(ddof=1)) if len(margins) > 1 else 0.0
    passes = int(np.sum(margins > 3.0 * sigma))
    means = [float(np.mean([table[lb][s] for s in seeds])) for lb in labels]
    monotone = all(a >= b for a, b in zip(means, means[1:]))
    return {"labels": labels, "seeds": seeds, "mean_losses": means,
            "monotone_mean": monotone, "margins": margins.tolist(),
            "sigma": sigma, "passes": passes, "total": len(seeds),
            "holds": monotone and passes >= min(4, len(seeds))}


def summarize(name: str, rows: list[StudyRow]) -> dict:
    if name == "depth":
        return summarize_pair(rows, "layers=1", "layers=4")
    if name == "width":
        return summarize_pair(rows, "experts=32", "experts=64")
    if name == "sparsity":
        return summarize_chain(rows, ["top_k=1", "top_k=2", "top_k=4", "top_k=8"])
    raise ValueError(f"unknown study {name!r}")
