"""``memwalker`` command-line entry point.

Exit codes: 0 success (including a "no answer" navigation), 2 bad arguments,
3 file errors, 4 endpoint errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backend import TraceLog, backend_from_arg
from .baselines import METHODS
from .builder import build_tree
from .config import TASKS, Config, task_config
from .core import MemoryTree, save_tree
from .errors import CacheMismatch, ConfigError, EndpointError, InvalidInput, MalformedRecord
from .harness import TreeCache, evaluate, load_dataset, sweep_csv, sweep_tree_configs
from .navigator import NO_ANSWER, navigate, read_trajectory, render_transcript, write_trajectory

EXIT_USAGE, EXIT_IO, EXIT_ENDPOINT = 2, 3, 4


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flat keys of Config)")
    common.add_argument("--task", choices=TASKS, help="start from a shipped per-task preset")
    common.add_argument("--backend", default="http", help="'http' or 'scripted:<jsonl file>'")
    common.add_argument("--trace-log", help="append every completion to this JSONL file")
    common.add_argument("--no-reasoning", action="store_true", help="drop the reasoning instruction")
    common.add_argument(
        "--faithful-prompts", action=argparse.BooleanOptionalAction, default=None,
        help="keep the original prompt wording verbatim, typo included (default on)",
    )
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="memwalker", description="Navigate long texts through a tree of summaries.")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", parents=[common], help="build and cache a memory tree")
    b.add_argument("document")
    b.add_argument("--out", required=True)

    a = sub.add_parser("ask", parents=[common], help="answer a query by navigating a tree")
    a.add_argument("source", help="cached tree (.json) or a plain-text document")
    a.add_argument("--query", required=True)
    a.add_argument("--options", help="comma-separated choices, labelled A, B, C, ...")
    a.add_argument("--trajectory", help="trajectory output (default: <source>.trajectory.jsonl)")

    e = sub.add_parser("eval", parents=[common], help="evaluate a method on a JSONL dataset")
    e.add_argument("dataset")
    e.add_argument("--method", default="memwalker")
    e.add_argument("--long-only", action="store_true")
    e.add_argument("--cache-dir", help="directory for cached trees")
    e.add_argument("--report", help="write the machine-readable report here")

    s = sub.add_parser("sweep", parents=[common], help="accuracy grid over segment sizes and fanouts")
    s.add_argument("dataset")
    s.add_argument("--sizes", required=True, help="comma-separated segment sizes")
    s.add_argument("--fanouts", required=True, help="comma-separated max fanouts")
    s.add_argument("--out", help="write the grid as CSV here (default: stdout)")

    t = sub.add_parser("trace", help="print a transcript of a trajectory file")
    t.add_argument("trajectory")
    return p


def _config(args) -> Config:
    cfg = task_config(args.task) if args.task else Config()
    if args.config:
        # file keys override the preset, flags override the file
        raw = json.loads(Path(args.config).read_text("utf-8"))
        cfg = Config.from_dict({**cfg.to_dict(), **raw})
    overrides = {"seed": args.seed}
    if args.no_reasoning:
        overrides["reasoning_enabled"] = False
    if args.faithful_prompts is not None:
        overrides["faithful_prompts"] = args.faithful_prompts
    return cfg.with_overrides(**overrides)


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _load_source(path: str, cfg: Config, backend) -> MemoryTree:
    text = Path(path).read_text("utf-8")
    if path.endswith(".json"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError:
            data = None
        if isinstance(data, dict) and "root_id" in data:
            return MemoryTree.from_dict(data)
    return build_tree(text, cfg, backend)


def _run(args) -> int:
    if args.command == "trace":
        sys.stdout.write(render_transcript(read_trajectory(args.trajectory)))
        return 0

    if args.command == "eval" and args.method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    cfg = _config(args)
    trace = TraceLog(args.trace_log) if args.trace_log else None
    backend = backend_from_arg(args.backend, cfg, trace)

    if args.command == "build":
        document = Path(args.document).read_text("utf-8")
        tree = build_tree(document, cfg, backend, checkpoint=args.out + ".partial")
        save_tree(tree, args.out)
        Path(args.out + ".partial").unlink(missing_ok=True)
        print(f"{args.out}: {len(tree.segments)} segments, {len(tree.nodes)} nodes, height {tree.height}")
        return 0

    if args.command == "ask":
        tree = _load_source(args.source, cfg, backend)
        if tree.config_snapshot and not (args.config or args.task):
            # a cached tree carries the config it was built with
            cfg = tree.config.with_overrides(
                seed=args.seed,
                reasoning_enabled=False if args.no_reasoning else None,
                faithful_prompts=args.faithful_prompts,
            )
        options = [o.strip() for o in args.options.split(",")] if args.options else None
        result = navigate(tree, args.query, backend, cfg, options)
        out = args.trajectory or args.source + ".trajectory.jsonl"
        write_trajectory(out, result.trajectory)
        print(result.answer if result.answered else NO_ANSWER)
        m = result.metrics
        print(
            f"steps={m.steps} strayed={str(m.strayed).lower()} tokens_processed={m.tokens_processed} "
            f"fraction_read={m.fraction_of_original:.3f}"
            + ("" if result.answered else f" reason={result.reason}")
        )
        return 0

    if args.command == "eval":
        dataset = load_dataset(args.dataset, cfg.tokenizer)
        if args.long_only:
            dataset = [ex for ex in dataset if ex.context_tokens > cfg.long_threshold]
        report = evaluate(args.method, dataset, backend, cfg, TreeCache(args.cache_dir))
        if args.report:
            Path(args.report).write_text(report.to_json(), "utf-8")
        sys.stdout.write(report.table())
        return 0

    if args.command == "sweep":
        dataset = load_dataset(args.dataset, cfg.tokenizer)
        cells = sweep_tree_configs(dataset, _ints(args.sizes), _ints(args.fanouts), backend, cfg)
        text = sweep_csv(cells)
        if args.out:
            Path(args.out).write_text(text, "utf-8")
        else:
            sys.stdout.write(text)
        return 0
    raise UsageError(f"unknown command {args.command}")


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _run(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"memwalker: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, MalformedRecord, CacheMismatch) as exc:
        print(f"memwalker: file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EndpointError as exc:
        print(f"memwalker: endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except InvalidInput as exc:
        print(f"memwalker: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def run_cli(argv: list[str] | None = None) -> int:
    """Like :func:`main` but returns argparse's exit status instead of raising."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
