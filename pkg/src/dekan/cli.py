"""Command line interface: stage-by-stage pipeline control plus one-shot runs."""
from __future__ import annotations

import argparse
import sys

from .errors import DekanError, StageError
from .config import ExperimentConfig, load_config
from .orchestrator import PipelineContext, run_all, write_reports
from .evaluation import run_protocol


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", default=None,
                   help="YAML experiment config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, default=None, metavar="N",
                   help="override the configured seed list with this one seed")
    p.add_argument("--out", default=None, metavar="DIR",
                   help="output directory (beats config and DEKAN_OUTPUT_DIR)")
    p.add_argument("--methods", default=None, metavar="LIST",
                   help="comma-separated subset of methods to run")
    p.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True,
                   help="reuse on-disk artifacts whose config digests match")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dekan",
        description="Merge frozen per-domain classifiers into one "
                    "domain-robust student without their training data.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("build-bench", "generate the multi-domain benchmark"),
        ("train-teachers", "fit one frozen teacher per domain"),
        ("invert", "stage 1: synthesize per-teacher datasets"),
        ("fuse", "stage 2: synthesize cross-domain datasets"),
        ("distill", "stage 3: train students from synthetic data"),
        ("evaluate", "run the leave-one-out protocol and write reports"),
        ("run-all", "everything above in one shot"),
        ("report", "re-render the results table from stored records"),
    ):
        _add_common(sub.add_parser(name, help=desc))
    return parser


def _configure(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    updates = {}
    if args.seed is not None:
        updates["seeds"] = (args.seed,)
    if args.methods is not None:
        updates["methods"] = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    if updates:
        from dataclasses import replace
        config = replace(config, **updates)
    return config


def _loo_pairs(bench):
    ids = [d.domain_id for d in bench.domains]
    return [(a, b) for a in ids for b in ids if a != b]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _configure(args)
        ctx = PipelineContext(config, out_dir=args.out, resume=args.resume)
        cmd = args.command

        if cmd == "build-bench":
            bench = ctx.benchmark()
            print(f"benchmark ready: {len(bench)} domains "
                  f"({', '.join(bench.domain_names)}) in {ctx.out / 'bench'}")
        elif cmd == "train-teachers":
            bench = ctx.benchmark()
            for seed in config.seeds:
                teachers = ctx.teachers_for([d.domain_id for d in bench.domains], seed)
                accs = ", ".join(f"{t.domain_id}:{t.val_accuracy:.3f}"
                                 for t in teachers.values())
                print(f"seed {seed}: teachers trained (val acc {accs})")
        elif cmd == "invert":
            bench = ctx.benchmark()
            for seed in config.seeds:
                for dom in bench.domains:
                    ds = ctx.stage1(dom.domain_id, seed)
                    print(f"seed {seed} domain {dom.name}: {len(ds)} images "
                          f"({ds.provenance.label()})")
        elif cmd == "fuse":
            bench = ctx.benchmark()
            for seed in config.seeds:
                for a, b in _loo_pairs(bench):
                    ds = ctx.stage2(a, b, seed)
                    print(f"seed {seed} pair ({a},{b}): {len(ds)} images")
        elif cmd == "distill":
            bench = ctx.benchmark()
            wanted = [m for m in ("dekan", "multi_di") if m in config.methods]
            for seed in config.seeds:
                for dom in bench.domains:
                    for method in wanted:
                        ctx._distilled(method, dom.domain_id, seed)
                        print(f"seed {seed} target {dom.name}: {method} student ready")
        elif cmd in ("evaluate", "run-all"):
            if cmd == "run-all":
                bundle = run_all(config, out_dir=args.out, resume=args.resume)
                results = bundle["results"]
                out = bundle["out"]
            else:
                bench = ctx.benchmark()
                results = [run_protocol(bench, m, config.seeds, ctx.runner())
                           for m in config.methods]
                write_reports(ctx, results)
                out = ctx.out
            from .evaluation import aggregate_table
            print(aggregate_table(results).render_text(), end="")
            print(f"reports written under {out / 'results'}")
        elif cmd == "report":
            from . import tensorio
            from .evaluation import ExperimentResult, aggregate_table
            summary = tensorio.read_json(ctx.out / "results" / "summary.json")
            results = [ExperimentResult(
                method=r["method"], domain_names=r["domain_names"],
                per_target=r["per_target"], average=r["average"],
                seeds=r["seeds"], flags=r.get("flags", {}),
                records=r.get("records", []),
            ) for r in summary["results"]]
            print(aggregate_table(results).render_text(), end="")
        return 0
    except StageError as e:
        print(f"error in stage '{e.stage}': {e}", file=sys.stderr)
        return 1
    except DekanError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
