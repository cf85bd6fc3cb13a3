"""Command-line interface.

Subcommands:
  generate    write a synthetic stream (manifest, image blobs, label grids)
  run         execute one strategy end to end and write report artifacts
  compare     tabulate two or more reports side by side
  graph-demo  dump adjacency, transition, stationary, and propagation
              matrices for a tree re-rooted at a class leaf
  vote        aggregate part-count responses by majority vote

Run `hppt run --help` for the full flag set; every config field has a
--<section>-<field> override and precedence is CLI > --config file > defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import graph as graph_mod
from . import harness, metrics, stream, tree as tree_mod
from .config import PROFILES, STRATEGIES, add_flags, apply_flags, default_config, load_file
from .errors import HpptError


def _config_from_args(args) -> "ExperimentConfig":
    cfg = default_config(args.profile or "desk")
    if args.config:
        load_file(args.config, cfg)
    apply_flags(cfg, args)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.strategy is not None:
        cfg.strategy = args.strategy
    if args.tau is not None:
        cfg.tau = args.tau
    return cfg


def _add_common(parser) -> None:
    parser.add_argument("--config", type=str, default=None, help="INI config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--strategy", type=str, default=None, choices=STRATEGIES)
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--profile", type=str, default=None, choices=PROFILES)
    parser.add_argument("--out", type=str, required=True, help="output directory")
    parser.add_argument("--verbose", action="store_true")
    add_flags(parser)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hppt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write a synthetic stream to disk")
    _add_common(p_gen)

    p_run = sub.add_parser("run", help="run one strategy over the stream")
    _add_common(p_run)
    p_run.add_argument(
        "--with-baseline", action="store_true",
        help="also run the independent baseline and fill the FWT column",
    )
    p_run.add_argument(
        "--sweep-gamma", type=str, default=None,
        help="comma-separated decay values; runs once per value and emits sweep.csv",
    )

    p_cmp = sub.add_parser("compare", help="tabulate reports side by side")
    p_cmp.add_argument("reports", nargs="+", help="paths to report.json files")
    p_cmp.add_argument("--out", type=str, required=True)

    p_graph = sub.add_parser("graph-demo", help="dump graph matrices for a tree")
    p_graph.add_argument("--tree", type=str, default=None, help="serialized tree JSON")
    p_graph.add_argument("--new-class", type=str, default=None,
                         help="class leaf to re-root at (default: last class)")
    p_graph.add_argument("--gamma", type=float, default=0.05)
    p_graph.add_argument("--alpha", type=float, default=0.001)
    p_graph.add_argument("--seed", type=int, default=0)
    p_graph.add_argument("--out", type=str, required=True)

    p_vote = sub.add_parser("vote", help="majority-vote part counts from responses")
    p_vote.add_argument("responses", help="JSON file: {class: {count: frequency}}")
    p_vote.add_argument("--out", type=str, default=None)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except HpptError as exc:
        error = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(error, sort_keys=True), file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "generate":
        cfg = _config_from_args(args)
        from .config import resolve

        resolve(cfg)
        episodes = stream.generate_stream(cfg.stream)
        stream.save_stream(episodes, cfg.stream, args.out)
        print(f"wrote {sum(len(ep.samples) for ep in episodes)} samples to {args.out}")
        return 0

    if args.command == "run":
        cfg = _config_from_args(args)
        if args.sweep_gamma:
            gammas = [float(x) for x in args.sweep_gamma.split(",") if x.strip()]
            rows = harness.gamma_sweep(cfg, gammas, args.out)
            for row in rows:
                print(json.dumps(row, sort_keys=True))
            return 0
        if args.with_baseline:
            report, _ = harness.run_with_baseline(cfg, args.out)
        else:
            report = harness.run(cfg, args.out, verbose=args.verbose)
        final = report["episodes"][-1]
        print(json.dumps(
            {"strategy": report["strategy"], "seed": report["seed"],
             "bwt": final["bwt"], "fwt": final["fwt"],
             "per_class_iou": final["per_class_iou"]},
            sort_keys=True,
        ))
        return 0

    if args.command == "compare":
        result = harness.compare(args.reports)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(json.dumps(result, sort_keys=True, indent=1) + "\n")
        (out / "comparison.csv").write_text(harness.comparison_csv(result))
        print(harness.comparison_csv(result), end="")
        return 0

    if args.command == "graph-demo":
        if args.tree:
            t = tree_mod.from_json(Path(args.tree).read_text())
        else:
            spec_cfg = stream.StreamConfig(seed=args.seed)
            specs = stream.build_class_specs(spec_cfg)
            class_specs = [(c, specs[c].part_count) for c in sorted(specs)]
            t = tree_mod.new_tree(3, 4, 16, class_specs, rng_seed=args.seed)
        classes = t.class_ids()
        target = args.new_class or classes[-1]
        leaf = t.class_node(target)
        dump = graph_mod.debug_dump(t, leaf.node_id, args.gamma, args.alpha)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "graph.json").write_text(json.dumps(dump, sort_keys=True, indent=1) + "\n")
        print(f"wrote graph dump for class {target!r} ({len(dump['vertex_order'])} vertices)")
        return 0

    if args.command == "vote":
        with open(args.responses) as fh:
            raw = json.load(fh)
        responses = {
            c: {int(k): int(v) for k, v in votes.items()} for c, votes in raw.items()
        }
        result = metrics.majority_vote_part_count(responses)
        text = json.dumps(result, sort_keys=True, indent=1)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "part_counts.json").write_text(text + "\n")
        print(text)
        return 0

    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    raise SystemExit(main())
