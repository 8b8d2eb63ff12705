"""Per-method pipelines, exact-match scoring, ablation sweeps and report files."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Sequence

from .cache import JsonCache
from .config import RunConfig
from .datasets import QARecord
from .embedding import Embedder
from .errors import InputError, KsLlmError
from .llm import ChatClient, MethodId, build_prompt, construct_triples, generate_answer
from .selection import SelectionQuery, select_evidence
from .text import TokenBudget, normalize_answer, split_sentences

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["method", "dataset", "model", "k", "max_tokens", "n", "n_failed", "em_percent", "wall_time_ms"]
RECORD_KEYS = [
    "id", "method", "prediction", "em", "selected_indices", "distances",
    "triple_count", "timings_ms", "failed", "diagnostics",
]


def exact_match(prediction: str, answers: Sequence[str]) -> int:
    """1 if the normalized prediction equals any normalized acceptable answer."""
    if not answers:
        raise InputError("exact_match needs at least one acceptable answer")
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(a) for a in answers))


@dataclass
class Runtime:
    """The shared, thread-safe collaborators of a run: model client, embedder and caches."""

    client: ChatClient
    embedder: Embedder
    llm_cache: JsonCache
    emb_cache: JsonCache

    @classmethod
    def from_config(cls, config: RunConfig, client: ChatClient | None = None, embedder: Embedder | None = None) -> "Runtime":
        return cls(
            client=client if client is not None else config.llm.build(),
            embedder=embedder if embedder is not None else config.embedder.build(),
            llm_cache=JsonCache(config.cache_dir, "llm"),
            emb_cache=JsonCache(config.cache_dir, "emb"),
        )


@dataclass
class RecordResult:
    id: str
    method: str
    prediction: str | None
    em: int
    selected_indices: list[int]
    distances: list[float]
    triple_count: int | None
    timings_ms: dict[str, float]
    failed: bool
    diagnostics: list[str]

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in RECORD_KEYS}


@dataclass
class RunReport:
    method: MethodId
    dataset: str
    model: str
    k: int | None
    max_tokens: int | None
    wall_time_s: float
    per_record: list[RecordResult] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.per_record)

    @property
    def n_failed(self) -> int:
        return sum(r.failed for r in self.per_record)

    @property
    def em(self) -> float:
        scored = [r.em for r in self.per_record if not r.failed]
        return sum(scored) / len(scored) if scored else 0.0

    @property
    def em_percent(self) -> str:
        return f"{100 * self.em:.2f}"

    @property
    def wall_time_ms(self) -> int:
        return int(round(self.wall_time_s * 1000))

    def row(self) -> dict:
        return {
            "method": self.method.value,
            "dataset": self.dataset,
            "model": self.model,
            "k": "" if self.k is None else self.k,
            "max_tokens": "" if self.max_tokens is None else self.max_tokens,
            "n": self.n,
            "n_failed": self.n_failed,
            "em_percent": self.em_percent,
            "wall_time_ms": self.wall_time_ms,
        }

    def sort_key(self):
        return (self.dataset, self.method.order, self.k or 0, self.max_tokens or 0)


def _run_record(config: RunConfig, rec: QARecord, rt: Runtime, clock) -> RecordResult:
    method = config.method
    diagnostics: list[str] = []
    timings: dict[str, float] = {}
    triples = None
    selection = None
    prediction = None
    failed = False

    def lap(stage, start):
        timings[stage] = round((clock() - start) * 1000, 3)

    t_all = clock()
    try:
        if method.needs_evidence and rec.evidence is None:
            raise InputError("record has no evidence document")
        if method.uses_triples:
            t0 = clock()
            triples = construct_triples(rec.question, rt.client, rt.llm_cache, diagnostics)
            lap("triples", t0)
        if method.uses_selection:
            t0 = clock()
            if method is MethodId.KS_Q:
                query = SelectionQuery.from_question(rec.question)
            elif triples:
                query = SelectionQuery.from_triples(triples)
            else:
                diagnostics.append("no triples to select with; selected by question instead")
                query = SelectionQuery.from_question(rec.question)
            selection = select_evidence(
                query, split_sentences(rec.evidence), config.k, rt.embedder, rt.emb_cache, pooling=config.pooling
            )
            lap("selection", t0)
        prompt = build_prompt(
            method,
            rec.question,
            document=rec.evidence,
            triples=triples,
            sentences=None if selection is None else list(selection.sentences),
            budget=config.max_tokens,
            answer_instruction=config.llm.answer_instruction,
        )
        t0 = clock()
        prediction = generate_answer(prompt, rt.client, rt.llm_cache)
        lap("answer", t0)
    except KsLlmError as exc:
        failed = True
        diagnostics.append(f"failed: {type(exc).__name__}: {exc}")
        logger.warning("record %s failed under %s: %s", rec.id, method.value, exc)
    lap("total", t_all)
    return RecordResult(
        id=rec.id,
        method=method.value,
        prediction=prediction,
        em=0 if failed else exact_match(prediction, rec.answers),
        selected_indices=[] if selection is None else list(selection.indices),
        distances=[] if selection is None else list(selection.distances),
        triple_count=None if triples is None else len(triples),
        timings_ms=timings,
        failed=failed,
        diagnostics=diagnostics,
    )


def _frozen_clock() -> float:
    return 0.0


def run_method(config: RunConfig, records: Sequence[QARecord], runtime: Runtime | None = None) -> RunReport:
    """Run ``config.method`` over every record and aggregate exact match.

    Records are processed concurrently up to ``config.concurrency``; failed
    records stay in the report but are left out of the EM denominator.
    """
    rt = runtime or Runtime.from_config(config)
    clock = time.perf_counter if config.record_timings else _frozen_clock
    start = clock()
    if config.concurrency > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            results = list(pool.map(lambda r: _run_record(config, r, rt, clock), records))
    else:
        results = [_run_record(config, r, rt, clock) for r in records]
    wall = clock() - start
    method = config.method
    return RunReport(
        method=method,
        dataset=config.dataset,
        model=rt.client.model,
        k=config.k if method.uses_selection else None,
        max_tokens=config.max_tokens.max_tokens if method.uses_document else None,
        wall_time_s=wall,
        per_record=results,
    )


def sweep_k(config: RunConfig, ks: Iterable[int], records: Sequence[QARecord], runtime: Runtime | None = None) -> list[RunReport]:
    """One KS-LLM run per k; triples and embeddings come from the shared caches."""
    ks = list(ks)
    if not ks or any(isinstance(k, bool) or not isinstance(k, int) or k < 1 for k in ks):
        raise InputError(f"ks must be a non-empty list of positive integers, got {ks!r}")
    rt = runtime or Runtime.from_config(config)
    return [run_method(replace(config, method=MethodId.KS_LLM, k=k), records, rt) for k in ks]


def sweep_length(
    config: RunConfig, budgets: Iterable[TokenBudget | int], records: Sequence[QARecord], runtime: Runtime | None = None
) -> list[RunReport]:
    """One document-method run per truncation budget."""
    budgets = [b if isinstance(b, TokenBudget) else TokenBudget(b) for b in budgets]
    if not budgets:
        raise InputError("budgets must be non-empty")
    if not config.method.uses_document:
        raise InputError(f"sweep_length needs a document method, not {config.method.value}")
    rt = runtime or Runtime.from_config(config)
    return [run_method(replace(config, max_tokens=b), records, rt) for b in budgets]


Format = Literal["csv", "markdown", "jsonl"]


def _sorted(reports: Sequence[RunReport]) -> list[RunReport]:
    return sorted(reports, key=RunReport.sort_key)


def render_report(reports: Sequence[RunReport], fmt: Format) -> str:
    if not reports:
        raise InputError("no reports to emit")
    reports = _sorted(reports)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in reports:
            writer.writerow(r.row())
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(CSV_COLUMNS) + " |", "|" + "---|" * len(CSV_COLUMNS)]
        for r in reports:
            row = r.row()
            lines.append("| " + " | ".join(str(row[c]) for c in CSV_COLUMNS) + " |")
        return "\n".join(lines) + "\n"
    if fmt == "jsonl":
        out = []
        for r in reports:
            for rec in r.per_record:
                obj = rec.to_json()
                obj.update(dataset=r.dataset, model=r.model, k=r.k, max_tokens=r.max_tokens)
                out.append(json.dumps(obj, ensure_ascii=False))
        return "\n".join(out) + "\n"
    raise InputError(f"unknown report format {fmt!r}")


def emit_report(reports: Sequence[RunReport], fmt: Format, path: str | os.PathLike) -> Path:
    text = render_report(reports, fmt)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise KsLlmError(f"cannot write report {path}: {exc}") from exc
    return path


def load_records_jsonl(path: str | os.PathLike) -> list[dict]:
    """Read per-record lines written by the jsonl report format."""
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class ScoreRow:
    method: str | None
    k: int | None
    max_tokens: int | None
    n: int
    n_failed: int
    n_unknown: int
    em: float

    @property
    def em_percent(self) -> str:
        return f"{100 * self.em:.2f}"


def score_predictions(predictions: Sequence[dict], records: Sequence[QARecord]) -> list[ScoreRow]:
    """Re-score prediction lines (``id``, ``prediction``, optional ``failed``) offline.

    Lines are grouped by (method, k, max_tokens) when those keys are present,
    so a report's own jsonl reproduces its EM values.
    """
    answers = {r.id: r.answers for r in records}
    groups: dict[tuple, list[dict]] = {}
    for p in predictions:
        groups.setdefault((p.get("method"), p.get("k"), p.get("max_tokens")), []).append(p)
    rows = []
    for (method, k, max_tokens), items in groups.items():
        bits, failed, unknown = [], 0, 0
        for p in items:
            if p.get("failed"):
                failed += 1
            elif p.get("id") not in answers:
                unknown += 1
            else:
                bits.append(exact_match(p.get("prediction") or "", answers[p["id"]]))
        em = sum(bits) / len(bits) if bits else 0.0
        rows.append(ScoreRow(method, k, max_tokens, len(items), failed, unknown, em))
    order = {m.value: m.order for m in MethodId}
    rows.sort(key=lambda r: (order.get(r.method, len(order)), r.k or 0, r.max_tokens or 0))
    return rows
