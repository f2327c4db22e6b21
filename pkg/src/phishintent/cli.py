"""Command-line entry point.

Exit codes: 0 success, 1 fatal or usage error, 2 partial failure (some samples
failed, or the knowledge base has violations).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .config import ConfigError, build_backend, pipeline_config, printable, resolve
from .core import PhishIntentError
from .dataset import load_manifest, summarize
from .evaluation import MissingPredictions, UnknownSampleIds, evaluate, write_report
from .importer import import_table
from .kb import load_kb, read_kb, validate_kb
from .pipeline import read_results, run_batch
from .profiling import combination_frequencies, records_from_manifest, records_from_results, sector_matrix

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which would collide with the partial-failure code
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _shared() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--show-config", action="store_true", help="print the effective configuration and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _runtime() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("backend")
    g.add_argument("--backend", choices=["remote", "mock"], dest="kind")
    g.add_argument("--script", help="mock backend script (JSON)")
    g.add_argument("--model", dest="model_name")
    g.add_argument("--base-url")
    g.add_argument("--parallel", type=int, dest="parallel_limit")
    g.add_argument("--max-retries", type=int)
    g.add_argument("--timeout-ms", type=int)
    g = p.add_argument_group("pipeline")
    g.add_argument("--threshold", type=float, dest="confidence_threshold")
    g.add_argument("--top-k", type=int, dest="top_k_max")
    g.add_argument("--feedback-rounds", type=int, dest="feedback_max_rounds")
    g.add_argument("--prompts-dir", dest="prompt_dir")
    g.add_argument("--sequential-specialists", action="store_const", const=False, dest="specialist_parallel")
    return p


BACKEND_FLAGS = ("kind", "script", "model_name", "base_url", "parallel_limit", "max_retries", "timeout_ms")
PIPELINE_FLAGS = ("confidence_threshold", "top_k_max", "feedback_max_rounds", "prompt_dir", "specialist_parallel")
PATH_FLAGS = ("input", "kb", "out")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="phishintent", description="Phishing intention analysis and evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    shared, runtime = _shared(), _runtime()

    p = sub.add_parser("classify", parents=[shared, runtime], help="run the agent pipeline over a manifest")
    # not marked required so that they may come from --config instead
    p.add_argument("--input", help="manifest JSONL")
    p.add_argument("--kb", help="knowledge base JSON")
    p.add_argument("--out", help="results JSONL (appended to; existing ids are skipped)")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", parents=[shared], help="score predictions against ground truth")
    p.add_argument("--truth", required=True, help="labeled manifest JSONL")
    p.add_argument("--pred", required=True, help="results JSONL from classify")
    p.add_argument("--report", required=True, help="metrics report JSON to write")
    p.add_argument("--csv", help="also write per-class rows to this CSV file")
    p.add_argument("--allow-missing", action="store_true",
                   help="score what is available and list samples without a prediction")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("profile", parents=[shared], help="sector by intention and combination frequencies")
    p.add_argument("--input", required=True, help="results JSONL (pred) or labeled manifest (truth)")
    p.add_argument("--source", required=True, choices=["pred", "truth"])
    p.add_argument("--manifest", help="manifest supplying sectors when --source pred")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("kb-validate", parents=[shared], help="check a knowledge base file")
    p.add_argument("--kb", required=True)
    p.set_defaults(func=cmd_kb_validate)

    p = sub.add_parser("summarize", parents=[shared], help="label distribution of a manifest")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("import", parents=[shared], help="convert a CSV/JSON label table into a manifest")
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--id-column", default="id")
    p.add_argument("--screenshot-column", default="screenshot")
    p.add_argument("--sector-column", default="sector")
    p.add_argument("--labels-column", default="labels",
                   help="column holding all labels; pass '' to read one flag column per category")
    p.add_argument("--screenshot-root")
    p.set_defaults(func=cmd_import)
    return parser


def effective_config(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    flags = {
        "backend": {k: getattr(args, k, None) for k in BACKEND_FLAGS},
        "pipeline": {k: getattr(args, k, None) for k in PIPELINE_FLAGS},
        "paths": {k: getattr(args, k, None) for k in PATH_FLAGS} if args.command == "classify" else {},
    }
    return resolve(args.config, flags)


def _print_json(data: Any) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def cmd_classify(args: argparse.Namespace) -> int:
    config = effective_config(args)
    if args.show_config:
        _print_json(printable(config))
        return EXIT_OK
    paths = config["paths"]
    missing = [f"--{key}" for key in PATH_FLAGS if not paths[key]]
    if missing:
        raise UsageError(f"classify: missing required option(s): {', '.join(missing)}")
    manifest = load_manifest(paths["input"])
    kb = load_kb(paths["kb"])
    backend = build_backend(config)
    summary = run_batch(manifest, kb, backend, pipeline_config(config), paths["out"])
    _print_json(summary.to_dict())
    return EXIT_PARTIAL if summary.failed else EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    if args.show_config:
        _print_json(printable(effective_config(args)))
        return EXIT_OK
    truth = load_manifest(args.truth)
    try:
        report = evaluate(truth, read_results(args.pred), allow_missing=args.allow_missing)
    except (MissingPredictions, UnknownSampleIds) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    write_report(report, args.report, {"generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds")})
    if args.csv:
        Path(args.csv).write_text(report.per_class_csv(), encoding="utf-8")
    _print_json({"n_pairs": report.n_pairs, "micro": report.micro,
                 "overall_accuracy_comp": report.overall_accuracy_comp})
    return EXIT_OK


def cmd_profile(args: argparse.Namespace) -> int:
    if args.show_config:
        _print_json(printable(effective_config(args)))
        return EXIT_OK
    if args.source == "truth":
        records = records_from_manifest(load_manifest(args.input))
    else:
        sectors = {}
        if args.manifest:
            sectors = {s.id: s.sector for s in load_manifest(args.manifest)}
        records = records_from_results(read_results(args.input), sectors)
    matrix = sector_matrix(records)
    combos = combination_frequencies(records)
    matrix_path = Path(f"{args.out}_matrix.csv")
    combos_path = Path(f"{args.out}_combinations.json")
    matrix_path.parent.mkdir(parents=True, exist_ok=True)
    matrix_path.write_text(matrix.to_csv(), encoding="utf-8")
    combos_path.write_text(json.dumps([c.to_dict() for c in combos], indent=2) + "\n", encoding="utf-8")
    _print_json({"records": len(records), "matrix": str(matrix_path), "combinations": str(combos_path)})
    return EXIT_OK


def cmd_kb_validate(args: argparse.Namespace) -> int:
    if args.show_config:
        _print_json(printable(effective_config(args)))
        return EXIT_OK
    try:
        kb = read_kb(args.kb)
    except OSError as exc:
        print(f"error: cannot read {args.kb}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_FATAL
    except PhishIntentError as exc:
        print(f"SchemaError: {exc}")
        return EXIT_PARTIAL
    violations = validate_kb(kb)
    for v in violations:
        print(v)
    if violations:
        return EXIT_PARTIAL
    print(f"ok: {sum(1 for _ in kb.entries())} entries, version {kb.version!r}")
    return EXIT_OK


def cmd_summarize(args: argparse.Namespace) -> int:
    _print_json(summarize(load_manifest(args.input)).to_dict())
    return EXIT_OK


def cmd_import(args: argparse.Namespace) -> int:
    manifest = import_table(
        args.table,
        args.out,
        id_column=args.id_column,
        screenshot_column=args.screenshot_column or None,
        sector_column=args.sector_column or None,
        labels_column=args.labels_column or None,
        screenshot_root=args.screenshot_root,
    )
    _print_json({"samples": len(manifest), "labeled": len(manifest.labeled), "out": args.out})
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_FATAL
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_FATAL
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except (PhishIntentError, ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


def run() -> None:
    sys.exit(main())
