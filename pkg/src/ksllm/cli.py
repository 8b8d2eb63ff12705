"""Command-line entry point: ``ksllm <command> --config FILE [--set key=value ...]``.

Exit codes: 0 success, 1 usage or configuration error, 2 run failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .cache import JsonCache, load_stats, record_stats
from .config import ConfigError, build_run_config, effective_settings, format_settings
from .datasets import generate_evidence, load_jsonl, save_jsonl
from .errors import KsLlmError
from .evaluation import Runtime, emit_report, load_records_jsonl, run_method, score_predictions, sweep_k, sweep_length
from .llm import MethodId

logger = logging.getLogger("ksllm")

EXIT_OK, EXIT_USAGE, EXIT_RUN = 0, 1, 2
DEFAULT_KS = "1,2,3,4,5,6"
DEFAULT_BUDGETS = "300,500,1000,2000"
SUFFIX = {"csv": ".csv", "markdown": ".md", "jsonl": ".jsonl"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--strict", dest="strict", action="store_true", default=None,
                        help="abort on malformed dataset lines (default)")
    common.add_argument("--lenient", dest="strict", action="store_false",
                        help="skip malformed dataset lines with a warning")
    common.add_argument("-v", "--verbose", action="store_true")

    report = _Parser(add_help=False)
    report.add_argument("--format", choices=["csv", "markdown", "jsonl"], action="append",
                        help="report format (repeatable; default csv and jsonl)")

    parser = _Parser(prog="ksllm", description="Knowledge-selection QA evaluation harness.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("run", parents=[common, report], help="run one method over a dataset")
    p = sub.add_parser("sweep-k", parents=[common, report], help="ks_llm over several k")
    p.add_argument("--ks", type=_int_list, default=_int_list(DEFAULT_KS))
    p = sub.add_parser("sweep-length", parents=[common, report], help="standard_doc over several budgets")
    p.add_argument("--budgets", type=_int_list, default=_int_list(DEFAULT_BUDGETS))
    p = sub.add_parser("gen-evidence", parents=[common], help="write generated evidence for records lacking it")
    p.add_argument("--out", required=True, help="output JSONL path")
    p = sub.add_parser("score", parents=[common], help="re-score a predictions JSONL against the dataset")
    p.add_argument("--predictions", required=True)
    sub.add_parser("cache-stats", parents=[common], help="print cache hit/miss counts")
    return parser


def _settings(args):
    overrides = list(args.overrides)
    if args.strict is not None:
        overrides.append(f"dataset.strict={'true' if args.strict else 'false'}")
    return effective_settings(args.config, overrides)


def _records(config):
    if not config.dataset_path:
        raise ConfigError("dataset.path is not set")
    return load_jsonl(config.dataset_path, strict=config.strict)


def _emit(reports, formats, config, stem, out):
    for fmt in formats or ["csv", "jsonl"]:
        path = emit_report(reports, fmt, Path(config.output_path) / f"{stem}{SUFFIX[fmt]}")
        print(f"wrote {path}", file=out)
    for r in sorted(reports, key=lambda r: r.sort_key()):
        k = f" k={r.k}" if r.k is not None else ""
        tok = f" max_tokens={r.max_tokens}" if r.max_tokens is not None else ""
        print(f"{r.method.value}{k}{tok}: EM {r.em_percent} (n={r.n}, failed={r.n_failed})", file=out)
    dead = [r for r in reports if r.n and r.n_failed == r.n]
    if dead:
        print(f"run failed: every record failed in {len(dead)} run(s); see the jsonl diagnostics", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def _execute(args, out) -> int:
    settings = _settings(args)
    print(format_settings(settings), file=out)
    config = build_run_config(settings)

    if args.command == "cache-stats":
        stats = load_stats(config.cache_dir) if config.cache_dir else {}
        for ns in ("llm", "emb"):
            entries = JsonCache(config.cache_dir, ns).entry_count() if config.cache_dir else 0
            s = stats.get(ns, {})
            print(
                f"{ns}: entries={entries} hits={s.get('hits', 0)} misses={s.get('misses', 0)} "
                f"writes={s.get('writes', 0)} corrupt={s.get('corrupt', 0)}",
                file=out,
            )
        return EXIT_OK

    records = _records(config)
    if args.command == "score":
        rows = score_predictions(load_records_jsonl(args.predictions), records)
        print("method,k,max_tokens,n,n_failed,n_unknown,em_percent", file=out)
        for r in rows:
            cells = [r.method or "", r.k if r.k is not None else "", r.max_tokens if r.max_tokens is not None else "",
                     r.n, r.n_failed, r.n_unknown, r.em_percent]
            print(",".join(str(c) for c in cells), file=out)
        return EXIT_OK

    runtime = Runtime.from_config(config)
    try:
        if args.command == "gen-evidence":
            augmented = [
                generate_evidence(r, runtime.client, runtime.llm_cache) if r.evidence_source == "absent" else r
                for r in records
            ]
            save_jsonl(augmented, args.out)
            n = sum(r.evidence_source == "generated" for r in augmented)
            print(f"wrote {args.out} ({n} generated, {len(augmented) - n} unchanged)", file=out)
        elif args.command == "run":
            return _emit([run_method(config, records, runtime)], args.format, config,
                         f"{config.dataset}_{config.method.value}", out)
        elif args.command == "sweep-k":
            return _emit(sweep_k(config, args.ks, records, runtime), args.format, config,
                         f"{config.dataset}_sweep_k", out)
        elif args.command == "sweep-length":
            method = config.method if config.method.uses_document else MethodId.STANDARD_DOC
            reports = sweep_length(replace(config, method=method), args.budgets, records, runtime)
            return _emit(reports, args.format, config, f"{config.dataset}_sweep_length", out)
    finally:
        if config.cache_dir:
            record_stats(config.cache_dir, [runtime.llm_cache, runtime.emb_cache])
    return EXIT_OK


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _execute(args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KsLlmError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
