"""Report emitters: delimited tables, JSON summaries, and rendered figures.

Every writer funnels through artifacts.py so reruns are byte-identical;
figures are rendered with the Agg backend at fixed dpi and a pinned
metadata block (matplotlib would otherwise stamp its version string,
which is stable, but no timestamps are ever written).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..masks import densify
from ..moe import normalized_entropy, top_share_iou
from ..model import RouteTrace
from ..rl import TraceMetrics
from ..sequence import MODALITY_NAMES, VISION
from ..vision import BitCodeMap, bits_to_hex, code_map_to_text
from .artifacts import write_csv, write_json, write_text

_FIG_META = {"Software": "unimoe"}


def _plt():
    import matplotlib
    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_FIG_META)


# -- routing ------------------------------------------------------------------


def route_rows(trace: RouteTrace) -> tuple[list, list]:
    """(ne rows, iou rows) from accumulated loads.

    ne rows: (layer, modality, ne); iou rows: (layer, modality_a,
    modality_b, iou). Zero-load combinations are skipped.
    """
    ne_rows, iou_rows = [], []
    for layer in range(trace.n_layers):
        total = trace.loads[layer]
        if total.sum() > 0:
            ne_rows.append((layer, "all", normalized_entropy(total)))
        per_mod = trace.modality_loads[layer]
        names = {code: MODALITY_NAMES[code] for code in sorted(per_mod)}
        for code, loads in sorted(per_mod.items()):
            if loads.sum() > 0:
                ne_rows.append((layer, names[code], normalized_entropy(loads)))
        codes = [c for c in sorted(per_mod) if per_mod[c].sum() > 0]
        for i, a in enumerate(codes):
            for b in codes[i + 1:]:
                iou_rows.append((layer, names[a], names[b],
                                 top_share_iou(per_mod[a], per_mod[b])))
    return ne_rows, iou_rows


def write_route_reports(out_dir: str | Path, trace: RouteTrace) -> None:
    out = Path(out_dir)
    ne_rows, iou_rows = route_rows(trace)
    write_csv(out / "ne_by_layer.csv", ["layer", "modality", "ne"], ne_rows)
    write_csv(out / "iou.csv", ["layer", "modality_a", "modality_b", "iou"],
              iou_rows)
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    groups: dict[str, list[tuple[int, float]]] = {}
    for layer, modality, ne in ne_rows:
        groups.setdefault(modality, []).append((layer, ne))
    width = 0.8 / max(1, len(groups))
    for i, (modality, pts) in enumerate(sorted(groups.items())):
        xs = [p[0] + i * width for p in pts]
        ax.bar(xs, [p[1] for p in pts], width=width, label=modality)
    ax.set_xlabel("layer")
    ax.set_ylabel("normalized entropy")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, out / "ne_by_layer.png")
    plt.close(fig)

    if iou_rows:
        fig, ax = plt.subplots(figsize=(5, 3))
        labels = [f"L{r[0]} {r[1]}/{r[2]}" for r in iou_rows]
        ax.bar(range(len(iou_rows)), [r[3] for r in iou_rows])
        ax.set_xticks(range(len(iou_rows)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_ylabel("top-share IoU")
        ax.set_ylim(0.0, 1.05)
        fig.tight_layout()
        _save(fig, out / "iou.png")
        plt.close(fig)


# -- training -----------------------------------------------------------------


def write_training_reports(out_dir: str | Path, history, eval_losses,
                           trace: RouteTrace) -> None:
    out = Path(out_dir)
    write_csv(out / "metrics.csv",
              ["step", "modality", "lr", "batch", "loss_raw", "loss_scaled",
               "sub_model"],
              [(r.step, r.modality, r.lr, r.batch, r.loss_raw, r.loss_scaled,
                int(r.sub_model)) for r in history])
    write_json(out / "eval.json", {"eval_loss": eval_losses})
    write_route_reports(out, trace)

    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    by_mod: dict[str, list[tuple[int, float]]] = {}
    for r in history:
        by_mod.setdefault(r.modality, []).append((r.step, r.loss_raw))
    for modality, pts in sorted(by_mod.items()):
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=modality, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out / "loss_curves.png")
    plt.close(fig)


# -- elastic ablation -----------------------------------------------------------


def write_ablation_reports(out_dir: str | Path, rows, summaries: dict) -> None:
    out = Path(out_dir)
    write_csv(out / "ablation.csv", ["study", "seed", "label", "loss"],
              [(r.study, r.seed, r.label, r.loss) for r in rows])
    write_json(out / "ablation_summary.json", summaries)

    plt = _plt()
    studies = sorted({r.study for r in rows})
    fig, axes = plt.subplots(1, len(studies), figsize=(4 * len(studies), 3),
                             squeeze=False)
    for ax, study in zip(axes[0], studies):
        sub = [r for r in rows if r.study == study]
        labels = sorted({r.label for r in sub})
        means = [float(np.mean([r.loss for r in sub if r.label == lb]))
                 for lb in labels]
        spread = [float(np.std([r.loss for r in sub if r.label == lb], ddof=1))
                  if sum(r.label == lb for r in sub) > 1 else 0.0
                  for lb in labels]
        ax.bar(range(len(labels)), means, yerr=spread, capsize=3)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
        ax.set_title(study, fontsize=10)
        ax.set_ylabel("held-out loss")
    fig.tight_layout()
    _save(fig, out / "ablation.png")
    plt.close(fig)


# -- rollout scheduling ----------------------------------------------------------


def write_rl_sim_reports(out_dir: str | Path,
                         metrics: dict[str, TraceMetrics]) -> None:
    out = Path(out_dir)
    rows = []
    for policy in sorted(metrics):
        for rec in metrics[policy].iterations:
            rows.append((rec.iteration, policy, rec.mean_true_length,
                         rec.idle_slot_steps, rec.wall_steps))
    write_csv(out / "rl_schedule.csv",
              ["iteration", "policy", "trained_mean_length",
               "idle_slot_steps", "wall_steps"], rows)
    write_json(out / "rl_summary.json", {
        policy: {"total_wall_steps": m.total_wall_steps,
                 "total_idle_slot_steps": m.total_idle_slot_steps,
                 "slot_count": m.slot_count,
                 "seed": m.seed}
        for policy, m in metrics.items()})

    plt = _plt()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    for policy in sorted(metrics):
        recs = metrics[policy].iterations
        ax1.plot([r.iteration for r in recs], [r.mean_true_length for r in recs],
                 marker="o", ms=3, label=policy)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("trained mean length")
    ax1.legend(fontsize=8)
    names = sorted(metrics)
    ax2.bar(range(len(names)),
            [metrics[p].total_idle_slot_steps for p in names])
    ax2.set_xticks(range(len(names)))
    ax2.set_xticklabels(names)
    ax2.set_ylabel("idle slot-steps")
    fig.tight_layout()
    _save(fig, out / "schedule_trace.png")
    plt.close(fig)


def write_objective_log(out_dir: str | Path, records: list[dict]) -> None:
    import json as _json
    lines = [_json.dumps(rec, sort_keys=True) for rec in records]
    write_text(Path(out_dir) / "rl_objectives.jsonl", "\n".join(lines) + "\n")


# -- next-scale dumps -------------------------------------------------------------


def write_nfsp_reports(out_dir: str | Path, frames: list[BitCodeMap],
                       seq) -> None:
    out = Path(out_dir)
    write_text(out / "nfsp_codes.txt",
               "".join(code_map_to_text(f) for f in frames))
    write_text(out / "nfsp_mask.txt", seq.mask.to_text())
    pyramid = frames[0].pyramid
    block = seq.blocks[VISION]
    rows = []
    token = 0
    for f, frame in enumerate(frames):
        for s, (h, w) in enumerate(pyramid.grids):
            for r in range(h):
                for c in range(w):
                    target = block.targets[token].reshape(1, -1)
                    inputs = (block.inputs[token] > 0).astype(np.int8).reshape(1, -1)
                    rows.append((token, f, s, r, c,
                                 seq.positions[token, 0], seq.positions[token, 1],
                                 seq.positions[token, 2],
                                 seq.weights[token],
                                 bits_to_hex(target), bits_to_hex(inputs)))
                    token += 1
    write_csv(out / "nfsp_sequence.csv",
              ["token", "frame", "scale", "row", "col", "t", "h", "w",
               "weight", "target_hex", "input_hex"], rows)
    write_json(out / "nfsp_stats.json", {
        "tokens": seq.n,
        "mask_pairs": seq.mask.pair_count(),
        "frames": len(frames),
        "grids": [list(g) for g in pyramid.grids],
    })

    plt = _plt()
    n_scales = len(pyramid.grids)
    fig, axes = plt.subplots(len(frames), n_scales,
                             figsize=(2 * n_scales, 2 * len(frames)),
                             squeeze=False)
    for f, frame in enumerate(frames):
        for s, arr in enumerate(frame.codes):
            gray = arr.astype(float).mean(axis=2)
            axes[f][s].imshow(gray, cmap="gray", vmin=0, vmax=1,
                              interpolation="nearest")
            axes[f][s].set_title(f"f{f} s{s}", fontsize=8)
            axes[f][s].axis("off")
    fig.tight_layout()
    _save(fig, out / "nfsp_codes.png")
    plt.close(fig)


def mask_density(seq) -> float:
    dense = densify(seq.mask)
    return float(dense.sum()) / dense.size
