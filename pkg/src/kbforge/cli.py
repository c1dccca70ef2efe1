"""Command line entry point: one subcommand per stage, plus compare and synth."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .categorize import CategorizeError
from .config import ConfigError, WorkspaceConfig, load_config
from .corpus import CorpusError
from .discovery import DiscoveryError
from .evalharness import EvalError
from .gateway import GatewayError
from .pipeline import STAGES, StageError, run_compare, run_stage
from .prompts import ParseError, PromptError
from .rag import RagError
from .synthesis import SynthesisError
from .synthetic import make_bundle

_STAGE_FAILURES = (
    StageError,
    GatewayError,
    ParseError,
    PromptError,
    CorpusError,
    DiscoveryError,
    CategorizeError,
    SynthesisError,
    RagError,
    EvalError,
    OSError,
    ValueError,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kbforge",
        description="Build compact knowledge bases from support tickets and evaluate them.",
    )
    parser.add_argument("--config", help="path to the JSON config file")
    parser.add_argument("--workspace", help="workspace directory (overrides the config)")
    parser.add_argument("--force", action="store_true", help="re-run stages even when cached")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, help=f"run the {stage} stage")

    compare = sub.add_parser("compare", help="run every stage and print the report")
    compare.add_argument(
        "--methods",
        help="comma-separated subset of raw,per_ticket,cluster,multi_agent,multi_level",
    )

    synth = sub.add_parser("synth", help="write the bundled synthetic corpus and mock script")
    synth.add_argument("--out", help="output directory (default: <workspace>/data)")
    synth.add_argument(
        "--topic-sizes", help="comma-separated ticket count per topic (default: 20 x 6)"
    )
    return parser


def _resolve_config(args: argparse.Namespace) -> WorkspaceConfig:
    if not args.config:
        raise ConfigError("a config file is required: pass --config <path>")
    config = load_config(args.config)
    if args.workspace:
        config = replace(config, workspace_dir=args.workspace)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _write_bundle_config(out_dir: Path, seed: int) -> Path:
    """A ready-to-run config next to the generated data, paths relative."""
    import json

    path = out_dir / "config.json"
    payload = {
        "backend": "mock",
        "data_path": "tickets.jsonl",
        "mock_script": "mock_rules.json",
        "seed": seed,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out) if args.out else Path(args.workspace or "workspace") / "data"
    sizes = None
    if args.topic_sizes:
        try:
            sizes = tuple(int(part) for part in args.topic_sizes.split(","))
        except ValueError:
            raise ConfigError(f"bad --topic-sizes value: {args.topic_sizes!r}")
    seed = args.seed if args.seed is not None else 0
    paths = make_bundle(out, seed=seed, topic_sizes=sizes)
    config_path = _write_bundle_config(out, seed)
    print(f"tickets: {paths['tickets']}")
    print(f"mock script: {paths['mock_script']}")
    print(f"config: {config_path}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    methods = None
    if args.methods:
        methods = tuple(part.strip() for part in args.methods.split(",") if part.strip())
    result = run_compare(config, methods=methods, force=args.force)
    for stage in result.stages:
        print(f"{stage.stage}: {stage.status}")
    print(f"report: {result.report_path}")
    report_md = result.report_path.with_suffix(".md")
    if report_md.is_file():
        print()
        print(report_md.read_text(encoding="utf-8"))
    return 0


def _cmd_stage(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    result = run_stage(args.command, config, force=args.force)
    print(f"{result.stage}: {result.status}")
    for rel in result.outputs:
        print(f"  {rel}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "compare":
            return _cmd_compare(args)
        return _cmd_stage(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _STAGE_FAILURES as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
