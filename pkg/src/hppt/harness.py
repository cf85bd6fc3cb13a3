"""End-to-end experiment runner, baselines, audits, and report files.

One run executes a strategy over the generated stream and writes four
deterministic artifacts into the output directory: manifest.json (stream
layout), report.json (per-episode taxonomy, IoU table, transfer metrics,
audits), iou.csv (presentation table), and trace.jsonl (refinement steps).
Every artifact is a pure function of (config, seed).

Strategies:
  hppt          first episode trains everything jointly and builds the tree;
                later episodes train only new leaves and heads, then refine
                the tree per new class
  seq_finetune  keeps training the same model on each episode with nothing
                frozen (the forgetting-prone baseline)
  independent   a fresh model per episode, the source of the individual-
                training IoU baselines
  joint         one model trained on all episodes pooled (upper bound)
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import json
import os
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from . import stream as stream_mod
from .config import ExperimentConfig, resolve, to_document
from .errors import IncompatibilityError
from .model import (
    ToyModel,
    batch_probabilities,
    fuse,
    new_model,
    snapshot_parameters,
    train_episode,
)
from .tree import ParsingTree, new_tree

_MODEL_SEED = 11
_TREE_SEED = 12
_LEAF_SEED = 13


def _sub_seed(seed: int, *codes: int) -> int:
    return int(np.random.SeedSequence((seed, *codes)).generate_state(1)[0])


def worker_count() -> int:
    raw = os.environ.get("HPPT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Evaluation protocol
# ---------------------------------------------------------------------------


def evaluate_classes(
    model: ToyModel,
    tree: ParsingTree,
    eval_episodes: list[stream_mod.Episode],
    upto: int,
    owned: list[str],
    tau: float,
) -> dict[str, float]:
    """Dataset-level IoU per class from fused predictions.

    Predictions fuse all ``owned`` classes; class c accumulates intersection
    and union over the evaluation samples of every episode up to ``upto``
    whose label space contains c, so later episodes never leak into earlier
    scores.
    """
    order = sorted(owned)
    inter = {c: 0 for c in order}
    union = {c: 0 for c in order}
    for ep in eval_episodes[:upto]:
        images = np.stack([s.image for s in ep.samples]).astype(np.float64)
        flat_probs = {
            c: batch_probabilities(model, tree, images, c).ravel() for c in order
        }
        fused = fuse(flat_probs, tau)
        h, w = images.shape[2:]
        for k, c in enumerate(order, start=1):
            if c not in ep.label_space:
                continue
            pred = fused == k
            gt = np.stack(
                [s.masks.get(c, np.zeros((h, w), dtype=bool)) for s in ep.samples]
            ).ravel()
            inter[c] += int(np.logical_and(pred, gt).sum())
            union[c] += int(np.logical_or(pred, gt).sum())
    return {
        c: (1.0 if union[c] == 0 else inter[c] / union[c])
        for c in order
        if any(c in ep.label_space for ep in eval_episodes[:upto])
    }


def _audit(before: dict[str, bytes], model: ToyModel, tree: ParsingTree, allowed) -> dict:
    after = snapshot_parameters(model, tree)
    changed = [name for name, blob in before.items() if after.get(name) != blob]
    violations = sorted(name for name in changed if not allowed(name))
    return {
        "ok": not violations,
        "changed": sorted(changed),
        "added": sorted(set(after) - set(before)),
        "violations": violations,
    }


# ---------------------------------------------------------------------------
# Strategy loops
# ---------------------------------------------------------------------------


def _displacement(before_tokens: dict[int, np.ndarray], tree: ParsingTree, class_ids) -> float | None:
    leaves = [leaf for leaf in tree.leaves() if leaf.class_id in class_ids]
    if not leaves:
        return None
    return max(
        float(np.abs(tree.nodes[leaf.node_id].tokens - before_tokens[leaf.node_id]).max())
        for leaf in leaves
        if leaf.node_id in before_tokens
    )


def _run_sequential(config: ExperimentConfig, train_eps, eval_eps, trace_sink) -> dict:
    """hppt and seq_finetune share this loop; only freezing differs."""
    m = config.model
    label_spaces = [ep.label_space for ep in train_eps]
    model = new_model(
        m.embed_dim, m.layers, (m.depth1, m.depth2, m.depth3),
        seed=_sub_seed(config.seed, _MODEL_SEED),
    )
    first = sorted(train_eps[0].label_space)
    tree = new_tree(
        m.n_max, m.prompt_tokens, m.embed_dim,
        [(c, train_eps[0].part_counts[c]) for c in first],
        rng_seed=_sub_seed(config.seed, _TREE_SEED),
    )
    table = metrics_mod.IoUTable()
    episode_reports = []
    for t, ep in enumerate(train_eps, start=1):
        tax = stream_mod.taxonomy(label_spaces, t)
        before = snapshot_parameters(model, tree)
        before_tokens = {nid: node.tokens.copy() for nid, node in tree.nodes.items()}
        if config.strategy == "hppt":
            mode = "auto"
            refine_cfg = config.refine if t > 1 else None
        else:
            mode = "joint" if t == 1 else "incremental_finetune"
            refine_cfg = None

        def trace(record, _t=t):
            trace_sink.append({"episode": _t, **record})

        train_report = train_episode(
            model, tree, ep, tax, config.train,
            part_counts=ep.part_counts, refine_config=refine_cfg, mode=mode,
            leaf_seed=_sub_seed(config.seed, _LEAF_SEED, t), trace=trace,
        )
        if t == 1 or config.strategy != "hppt":
            allowed = lambda name: True
        else:
            new_heads = {f"head_w:{c}" for c in tax.new} | {f"head_b:{c}" for c in tax.new}
            allowed = lambda name, _nh=new_heads: name in _nh or name.startswith("node:")
        audit = _audit(before, model, tree, allowed)
        owned = sorted(set().union(*label_spaces[:t]))
        per_class = evaluate_classes(model, tree, eval_eps, t, owned, config.tau)
        for c, v in per_class.items():
            table.set(t, c, v)
        steps_to_threshold = {}
        for key, rep in train_report["classes"].items():
            for c, steps in rep.get("steps_to_threshold", {}).items():
                steps_to_threshold[c] = steps
        episode_reports.append({
            "episode": t,
            "taxonomy": {
                "new": sorted(tax.new), "regular": sorted(tax.regular), "old": sorted(tax.old),
            },
            "mode": train_report["mode"],
            "per_class_iou": {c: per_class[c] for c in sorted(per_class)},
            "steps_to_threshold": {c: steps_to_threshold[c] for c in sorted(steps_to_threshold)},
            "frozen_phase_ok": all(
                rep.get("frozen_ok", True) for rep in train_report["classes"].values()
            ),
            "freeze_audit": audit,
            "old_leaf_displacement_max": _displacement(before_tokens, tree, tax.old),
            "losses": {
                key: {"initial": rep.get("initial_loss"), "final": rep.get("final_loss")}
                for key, rep in sorted(train_report["classes"].items())
            },
        })
    return {"table": table, "episodes": episode_reports}


def _run_independent(config: ExperimentConfig, train_eps, eval_eps) -> dict:
    m = config.model
    label_spaces = [ep.label_space for ep in train_eps]
    table = metrics_mod.IoUTable()
    episode_reports = []
    for t, ep in enumerate(train_eps, start=1):
        tax = stream_mod.taxonomy(label_spaces, t)
        classes = sorted(ep.label_space)
        model = new_model(
            m.embed_dim, m.layers, (m.depth1, m.depth2, m.depth3),
            seed=_sub_seed(config.seed, _MODEL_SEED, t),
        )
        tree = new_tree(
            m.n_max, m.prompt_tokens, m.embed_dim,
            [(c, ep.part_counts[c]) for c in classes],
            rng_seed=_sub_seed(config.seed, _TREE_SEED, t),
        )
        train_report = train_episode(
            model, tree, ep, tax, config.train,
            part_counts=ep.part_counts, mode="joint",
            leaf_seed=_sub_seed(config.seed, _LEAF_SEED, t),
        )
        per_class = evaluate_classes(model, tree, eval_eps, t, classes, config.tau)
        for c, v in per_class.items():
            table.set(t, c, v)
            if c not in table.ind:
                table.ind[c] = v
        joint_rep = train_report["classes"]["joint"]
        episode_reports.append({
            "episode": t,
            "taxonomy": {
                "new": sorted(tax.new), "regular": sorted(tax.regular), "old": sorted(tax.old),
            },
            "mode": "independent",
            "per_class_iou": {c: per_class[c] for c in sorted(per_class)},
            "steps_to_threshold": dict(sorted(joint_rep["steps_to_threshold"].items())),
            "frozen_phase_ok": True,
            "freeze_audit": {"ok": True, "changed": [], "added": [], "violations": []},
            "old_leaf_displacement_max": None,
            "losses": {"joint": {"initial": joint_rep["initial_loss"],
                                 "final": joint_rep["final_loss"]}},
        })
    return {"table": table, "episodes": episode_reports}


def _run_joint(config: ExperimentConfig, train_eps, eval_eps) -> dict:
    m = config.model
    label_spaces = [ep.label_space for ep in train_eps]
    all_classes = sorted(set().union(*label_spaces))
    part_counts = {}
    samples = []
    for ep in train_eps:
        part_counts.update(ep.part_counts)
        samples.extend(ep.samples)
    pooled = stream_mod.Episode(
        index=1, samples=samples, label_space=set(all_classes), part_counts=part_counts
    )
    tax = stream_mod.Taxonomy(new=set(all_classes), regular=set(all_classes), old=set())
    model = new_model(
        m.embed_dim, m.layers, (m.depth1, m.depth2, m.depth3),
        seed=_sub_seed(config.seed, _MODEL_SEED),
    )
    tree = new_tree(
        m.n_max, m.prompt_tokens, m.embed_dim,
        [(c, part_counts[c]) for c in all_classes],
        rng_seed=_sub_seed(config.seed, _TREE_SEED),
    )
    train_report = train_episode(
        model, tree, pooled, tax, config.train,
        part_counts=part_counts, mode="joint",
        leaf_seed=_sub_seed(config.seed, _LEAF_SEED),
    )
    t_final = len(train_eps)
    per_class = evaluate_classes(model, tree, eval_eps, t_final, all_classes, config.tau)
    table = metrics_mod.IoUTable()
    for c, v in per_class.items():
        table.set(t_final, c, v)
    joint_rep = train_report["classes"]["joint"]
    episode_reports = [{
        "episode": t_final,
        "taxonomy": {"new": all_classes, "regular": all_classes, "old": []},
        "mode": "joint",
        "per_class_iou": {c: per_class[c] for c in sorted(per_class)},
        "steps_to_threshold": dict(sorted(joint_rep["steps_to_threshold"].items())),
        "frozen_phase_ok": True,
        "freeze_audit": {"ok": True, "changed": [], "added": [], "violations": []},
        "old_leaf_displacement_max": None,
        "losses": {"joint": {"initial": joint_rep["initial_loss"],
                             "final": joint_rep["final_loss"]}},
    }]
    return {"table": table, "episodes": episode_reports}


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------


def run(
    config: ExperimentConfig,
    out_dir,
    verbose: bool = False,
    ind_table: metrics_mod.IoUTable | None = None,
) -> dict:
    """Execute the configured strategy and write all artifacts under out_dir.

    ``ind_table`` supplies individual-training baselines so the report can
    include forward-transfer values; without it fwt entries are null.
    """
    config = resolve(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    train_cfg = dataclasses.replace(config.stream, split="train")
    eval_cfg = dataclasses.replace(
        config.stream, split="eval", samples_per_episode=config.eval_samples
    )
    train_eps = stream_mod.generate_stream(train_cfg)
    eval_eps = stream_mod.generate_stream(eval_cfg)
    label_spaces = [ep.label_space for ep in train_eps]

    trace_sink: list[dict] = []
    if config.strategy in ("hppt", "seq_finetune"):
        outcome = _run_sequential(config, train_eps, eval_eps, trace_sink)
    elif config.strategy == "independent":
        outcome = _run_independent(config, train_eps, eval_eps)
    else:
        outcome = _run_joint(config, train_eps, eval_eps)

    table: metrics_mod.IoUTable = outcome["table"]
    if ind_table is not None:
        table.ind.update(ind_table.ind)

    for entry in outcome["episodes"]:
        t = entry["episode"]
        tax = stream_mod.taxonomy(label_spaces, t)
        entry["bwt"] = None
        entry["fwt"] = None
        if t > 1 and config.strategy in ("hppt", "seq_finetune"):
            try:
                entry["bwt"] = metrics_mod.bwt(table, t, tax)
            except metrics_mod.MissingDataError:
                pass
        if table.ind and tax.new:
            try:
                entry["fwt"] = metrics_mod.fwt(table, t, tax)
            except metrics_mod.MissingDataError:
                pass

    report = {
        "version": 1,
        "strategy": config.strategy,
        "seed": config.seed,
        "config": to_document(config),
        "manifest": stream_mod.manifest(train_cfg, train_eps),
        "eval_manifest": stream_mod.manifest(eval_cfg, eval_eps),
        "episodes": outcome["episodes"],
        "iou_table": metrics_mod.table_to_document(table),
    }
    _write_json(out / "report.json", report)
    _write_json(out / "manifest.json", report["manifest"])
    (out / "iou.csv").write_text(metrics_mod.table_to_csv(table))
    with open(out / "trace.jsonl", "w") as fh:
        for record in trace_sink:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    if verbose:
        for record in trace_sink:
            print(json.dumps(record, sort_keys=True))
    return report


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def run_with_baseline(config: ExperimentConfig, out_dir) -> tuple[dict, dict]:
    """Convenience: run the independent baseline, then the configured strategy
    with the baseline's individual-training IoU column filled in."""
    out = Path(out_dir)
    ind_cfg = dataclasses.replace(config, strategy="independent")
    ind_report = run(ind_cfg, out / "independent")
    ind_table = metrics_mod.table_from_document(ind_report["iou_table"])
    main_report = run(config, out / config.strategy, ind_table=ind_table)
    return main_report, ind_report


def gamma_sweep(config: ExperimentConfig, gammas: list[float], out_dir) -> list[dict]:
    """Run the strategy once per decay value; emit sweep.csv and sweep.json.

    Rows report the maximum old-class leaf displacement plus headline metrics
    per decay. Runs execute in a worker pool capped by HPPT_THREADS.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(gamma: float) -> dict:
        cfg = dataclasses.replace(
            config, refine=dataclasses.replace(config.refine, decay=gamma)
        )
        report = run(cfg, out / f"gamma_{gamma:g}")
        displacements = [
            ep["old_leaf_displacement_max"]
            for ep in report["episodes"]
            if ep["old_leaf_displacement_max"] is not None
        ]
        final = report["episodes"][-1]
        ious = list(final["per_class_iou"].values())
        return {
            "gamma": gamma,
            "old_leaf_displacement_max": max(displacements) if displacements else None,
            "bwt": final["bwt"],
            "mean_iou": float(np.mean(ious)) if ious else None,
        }

    workers = worker_count()
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, gammas))
    else:
        rows = [one(g) for g in gammas]
    rows.sort(key=lambda r: r["gamma"])
    _write_json(out / "sweep.json", {"rows": rows})
    lines = ["gamma,old_leaf_displacement_max,bwt,mean_iou"]
    for r in rows:
        lines.append(
            f"{r['gamma']:g},{_csv_cell(r['old_leaf_displacement_max'])},"
            f"{_csv_cell(r['bwt'])},{_csv_cell(r['mean_iou'])}"
        )
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    return rows


def _csv_cell(value) -> str:
    return "" if value is None else repr(float(value))


def compare(report_paths: list) -> dict:
    """Side-by-side final-episode IoU, BWT, and FWT for matched runs.

    All reports must describe the same stream manifest; anything else is an
    IncompatibilityError, as is a single report.
    """
    if len(report_paths) < 2:
        raise IncompatibilityError("compare needs at least two reports")
    reports = []
    for path in report_paths:
        with open(path) as fh:
            reports.append(json.load(fh))
    manifests = [r["manifest"] for r in reports]
    for other in manifests[1:]:
        if other != manifests[0]:
            raise IncompatibilityError("reports were produced from different streams")

    columns = []
    for r in reports:
        name = f"{r['strategy']}/seed{r['seed']}"
        if name in columns:
            name = f"{name}#{columns.count(name) + 1}"
        columns.append(name)
    classes = sorted({
        c for r in reports for ep in r["episodes"] for c in ep["per_class_iou"]
    })
    rows = {}
    for c in classes:
        rows[f"iou:{c}"] = [
            r["episodes"][-1]["per_class_iou"].get(c) for r in reports
        ]
    rows["bwt"] = [r["episodes"][-1]["bwt"] for r in reports]
    rows["fwt"] = [r["episodes"][-1]["fwt"] for r in reports]
    best = {}
    for key, values in rows.items():
        present = [(v, i) for i, v in enumerate(values) if v is not None]
        best[key] = max(present)[1] if present else None
    return {"columns": columns, "rows": rows, "best": best}


def comparison_csv(result: dict) -> str:
    lines = ["metric," + ",".join(result["columns"]) + ",best"]
    for key in sorted(result["rows"]):
        cells = [
            "" if v is None else f"{v:.4f}" for v in result["rows"][key]
        ]
        best = result["best"][key]
        best_name = result["columns"][best] if best is not None else ""
        lines.append(f"{key}," + ",".join(cells) + f",{best_name}")
    return "\n".join(lines) + "\n"
