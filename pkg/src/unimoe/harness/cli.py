"""Command-line entry point.

Exit codes: 0 success, 2 configuration problems (bad file, unknown keys,
invalid values, missing checkpoint, malformed workload), 3 numeric
failure (non-finite loss or gradient). Every run requires a seed, via
--seed or the config file.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..elastic import SubModelSpec, extract, keep_layers
from ..errors import (CheckpointMissing, ConfigInvalid, InvalidWorkload,
                      NonFiniteGradient)
from ..rl import (HintParams, MiscParams, Rollout, RolloutGroup, WpsmParams,
                  grpo_icepop_objective, gspo_icepop_objective, hint_prob,
                  mixed_icepop_objective, simulate_rollout_scheduling,
                  wpsm_objective)
from ..vision import ScalePyramid, build_nfsp_sequence, build_pyramid_codes
from . import ablation, corpus, reports
from .artifacts import save_arrays, write_json, write_text
from .config import RunConfig, load_config
from .training import (evaluate, load_checkpoint, prepare_data,
                       save_checkpoint, train_model)


def _resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
    else:
        if args.seed is None:
            raise ConfigInvalid("provide --config or --seed; runs must be seeded")
        cfg = RunConfig(seed=args.seed)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = _out(cfg)
    d, m = cfg.data, cfg.model
    arrays = {}
    stats = {}
    if d.text_sequences:
        text = corpus.gen_text(d.text_sequences, seed=cfg.seed * 10 + 1,
                               length=d.text_len + 1, vocab=m.vocab,
                               n_modes=d.text_modes)
        arrays["text"] = text
        stats["text"] = {"sequences": int(text.shape[0]),
                         "unigram_entropy": corpus.unigram_entropy(text, m.vocab),
                         "grammar_entropy":
                             corpus.grammar_conditional_entropy(m.vocab)}
    if d.vision_sequences:
        grids = ScalePyramid(d.vision_grids)
        arrays["vision"] = corpus.gen_vision(
            d.vision_sequences * d.vision_frames, seed=cfg.seed * 10 + 2,
            grid=grids.finest, bits=m.bits)
        stats["vision"] = {"latents": int(arrays["vision"].shape[0])}
    if d.audio_sequences:
        arrays["audio"] = corpus.gen_audio(
            d.audio_sequences, seed=cfg.seed * 10 + 3,
            frames=d.audio_frames + 1, dim=d.audio_feature_dim)
        stats["audio"] = {"sequences": int(arrays["audio"].shape[0])}
    save_arrays(out / "corpus.npz", arrays)
    write_json(out / "corpus_stats.json", stats)
    print(f"wrote {out / 'corpus.npz'}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out(cfg)
    write_text(out / "config.json", cfg.to_json())
    result = train_model(cfg)
    save_checkpoint(out / "checkpoint.npz", result.model)
    reports.write_training_reports(out, result.history, result.eval_losses,
                                   result.eval_trace)
    losses = " ".join(f"{k}={v:.4f}" for k, v in sorted(result.eval_losses.items()))
    print(f"trained {cfg.train.steps} steps; eval {losses}; reports in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _out(cfg)
    model = load_checkpoint(args.checkpoint)
    data = prepare_data(replace(cfg, model=model.cfg))
    losses, trace = evaluate(model, data.held_out, collect_trace=True)
    write_json(out / "eval.json", {"eval_loss": losses})
    reports.write_route_reports(out, trace)
    print(f"eval {losses}; reports in {out}")
    return 0


def _spec_from_args(args, cfg_model) -> SubModelSpec:
    if args.spec:
        return SubModelSpec.from_json(Path(args.spec).read_text())
    layers = (keep_layers(cfg_model.n_layers, args.depth)
              if args.depth else tuple(range(cfg_model.n_layers)))
    width = args.width if args.width else cfg_model.n_experts
    experts = tuple(tuple(range(width)) for _ in layers)
    top_k = args.top_k if args.top_k else min(cfg_model.top_k, width)
    return SubModelSpec(layers, experts, top_k)


def cmd_extract(args) -> int:
    cfg = _resolve_config(args)
    out = _out(cfg)
    model = load_checkpoint(args.checkpoint)
    spec = _spec_from_args(args, model.cfg)
    sub = extract(model, spec)
    save_checkpoint(out / "submodel.npz", sub)
    write_text(out / "submodel_spec.json", spec.to_json() + "\n")
    print(f"extracted {sub.param_count()} params to {out / 'submodel.npz'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = _out(cfg)
    names = list(ablation.STUDIES) if args.study == "all" else [args.study]
    seeds = tuple(range(args.seeds))
    rows = []
    summaries = {}
    for name in names:
        study_rows = ablation.run_study(ablation.STUDIES[name](), seeds=seeds,
                                        steps=args.steps)
        rows.extend(study_rows)
        summaries[name] = ablation.summarize(name, study_rows)
    reports.write_ablation_reports(out, rows, summaries)
    verdicts = " ".join(f"{k}:{'ok' if v['holds'] else 'FAIL'}"
                        for k, v in summaries.items())
    print(f"ablation {verdicts}; reports in {out}")
    return 0


def cmd_route_stats(args) -> int:
    cfg = _resolve_config(args)
    out = _out(cfg)
    model = load_checkpoint(args.checkpoint)
    data = prepare_data(replace(cfg, model=model.cfg))
    _, trace = evaluate(model, data.held_out, collect_trace=True)
    reports.write_route_reports(out, trace)
    print(f"route stats in {out}")
    return 0


def build_workload(cfg: RunConfig) -> list[list[int]]:
    """Long-tail workload: jittered base lengths with one slow query."""
    r = cfg.rl
    rng = np.random.default_rng(cfg.seed)
    work = [[int(r.base_length + rng.integers(0, r.length_jitter + 1))
             for _ in range(r.group_size)] for _ in range(r.queries)]
    work[r.tail_index] = [r.tail_length] * r.group_size
    return work


def cmd_rl_sim(args) -> int:
    cfg = _resolve_config(args)
    out = _out(cfg)
    workload = build_workload(cfg)
    r = cfg.rl
    metrics = {policy: simulate_rollout_scheduling(
                   policy, workload, r.train_batch, r.buffer_factor,
                   r.group_size, seed=cfg.seed)
               for policy in ("sync", "april", "urb")}
    reports.write_rl_sim_reports(out, metrics)
    idles = {p: m.total_idle_slot_steps for p, m in metrics.items()}
    print(f"simulated {r.queries} queries; idle {idles}; reports in {out}")
    return 0


def _synthetic_group(seed: int, g: int = 4, max_len: int = 16) -> RolloutGroup:
    rng = np.random.default_rng(seed)
    rollouts = []
    for i in range(g):
        n = int(rng.integers(4, max_len + 1))
        lp_infer = -rng.random(n) - 0.05
        lp_old = lp_infer + rng.normal(0.0, 0.1, n)
        lp_new = lp_old + rng.normal(0.0, 0.08, n)
        rollouts.append(Rollout(lp_infer, lp_old, lp_new,
                                reward=float(rng.integers(0, 2)),
                                entropy=float(rng.random())))
    return RolloutGroup(seed, tuple(rollouts))


def cmd_rl_objectives(args) -> int:
    cfg = _resolve_config(args)
    out = _out(cfg)
    misc = MiscParams(alpha=0.85, beta=1.15, eps=0.2)
    wpsm = WpsmParams(eta=0.5, tau=0.5, alpha_mask=0.5, eps=0.2)
    hint = HintParams(p_initial=0.8, gamma=0.1)
    records = []
    for i in range(8):
        group = _synthetic_group(cfg.seed * 100 + i)
        for name, fn, params in (("grpo_icepop", grpo_icepop_objective, misc),
                                 ("gspo_icepop", gspo_icepop_objective, misc),
                                 ("mixed_icepop", mixed_icepop_objective, misc),
                                 ("wpsm", wpsm_objective, wpsm)):
            res = fn(group, params)
            records.append({
                "group": i, "objective": name, "value": res.value,
                "grad_norms": [float(np.linalg.norm(g)) for g in res.grads]})
        records.append({"group": i, "objective": "hint_prob",
                        "value": hint_prob(hint, t=i, pass_initial=0.5)})
    reports.write_objective_log(out, records)
    print(f"wrote {out / 'rl_objectives.jsonl'}")
    return 0


def cmd_nfsp_dump(args) -> int:
    cfg = _resolve_config(args)
    out = _out(cfg)
    d, m = cfg.data, cfg.model
    pyramid = ScalePyramid(d.vision_grids)
    n_frames = max(1, d.vision_frames)
    latents = corpus.gen_vision(n_frames, seed=cfg.seed * 10 + 2,
                                grid=pyramid.finest, bits=m.bits)
    frames = [build_pyramid_codes(latents[f], pyramid) for f in range(n_frames)]
    seq = build_nfsp_sequence(frames, flip_prob=d.vision_flip_prob,
                              seed=cfg.seed, window=d.vision_window)
    reports.write_nfsp_reports(out, frames, seq)
    print(f"dumped {seq.n} tokens, {seq.mask.pair_count()} mask pairs to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unimoe",
        description="Multimodal MoE training sandbox: data, training, "
                    "elastic studies, routing reports, RL scheduling.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML or JSON run config")
        p.add_argument("--seed", type=int, help="seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.set_defaults(func=fn)
        return p

    add("gen-data", cmd_gen_data, "write synthetic corpora to disk")
    add("train", cmd_train, "train a model and emit reports + checkpoint")
    p = add("eval", cmd_eval, "evaluate a checkpoint on held-out data")
    p.add_argument("--checkpoint", required=True)
    p = add("extract-submodel", cmd_extract, "slice a sub-model out of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spec", help="sub-model spec JSON file")
    p.add_argument("--depth", type=int, help="keep this many layers")
    p.add_argument("--width", type=int, help="keep the first N experts per layer")
    p.add_argument("--top-k", type=int, dest="top_k")
    p = add("elastic-ablate", cmd_ablate, "run the depth/width/sparsity studies")
    p.add_argument("--study", choices=[*ablation.STUDIES, "all"], default="all")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--steps", type=int, help="override per-study step count")
    p = add("route-stats", cmd_route_stats, "routing NE/IoU reports for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    add("rl-sim", cmd_rl_sim, "rollout scheduling simulation (sync/april/urb)")
    add("rl-objectives", cmd_rl_objectives, "log objective values on synthetic groups")
    add("nfsp-dump", cmd_nfsp_dump, "dump a next-scale sequence as text + figures")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigInvalid, CheckpointMissing, InvalidWorkload) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteGradient as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
