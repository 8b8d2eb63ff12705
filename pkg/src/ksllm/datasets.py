"""QA records, JSONL ingestion and LLM-generated evidence documents.

All datasets share one JSONL schema, one object per line::

    {"id": str, "question": str, "answers": [str, ...], "evidence": str (optional)}

Field mappings from the native releases:

* TriviaQA (verified web/wikipedia dev): ``QuestionId`` -> id, ``Question`` ->
  question, ``Answer.NormalizedAliases`` (or ``Aliases``) -> answers, the text
  of the verified evidence file(s) -> evidence.
* WebQuestions: a stable id such as ``webq-<line>`` -> id, ``utterance`` ->
  question, ``targetValue`` parsed from ``(list (description X) ...)`` ->
  answers; no evidence (generate it).
* Natural Questions open: ``nq-<line>`` -> id, ``question`` -> question,
  ``answer`` list -> answers; no evidence (generate it).
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal

from .cache import JsonCache
from .errors import DatasetError, InputError
from .llm import ChatClient, build_evidence_prompt, complete_cached

logger = logging.getLogger(__name__)

EvidenceSource = Literal["provided", "generated", "absent"]


@dataclass(frozen=True)
class QARecord:
    id: str
    question: str
    answers: tuple[str, ...]
    evidence: str | None = None
    evidence_source: EvidenceSource = "absent"

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise InputError("record id must be a non-empty string")
        if not isinstance(self.question, str) or not self.question.strip():
            raise InputError(f"record {self.id}: question must be non-empty")
        answers = tuple(self.answers) if isinstance(self.answers, (list, tuple)) else None
        if not answers:
            raise InputError(f"record {self.id}: answers must be a non-empty list")
        if not all(isinstance(a, str) and a.strip() for a in answers):
            raise InputError(f"record {self.id}: every answer must be a non-empty string")
        object.__setattr__(self, "answers", answers)
        if self.evidence is not None and not isinstance(self.evidence, str):
            raise InputError(f"record {self.id}: evidence must be a string")
        if (self.evidence_source == "absent") != (self.evidence is None):
            raise InputError(f"record {self.id}: evidence_source {self.evidence_source!r} disagrees with evidence")

    @classmethod
    def from_json(cls, obj: dict) -> "QARecord":
        evidence = obj.get("evidence")
        return cls(
            id=obj["id"],
            question=obj["question"],
            answers=obj["answers"],
            evidence=evidence,
            evidence_source="absent" if evidence is None else "provided",
        )

    def to_json(self) -> dict:
        out = {"id": self.id, "question": self.question, "answers": list(self.answers)}
        if self.evidence is not None:
            out["evidence"] = self.evidence
        return out


@dataclass
class LoadReport:
    records: list[QARecord]
    skipped: list[tuple[int, str]] = field(default_factory=list)


def read_jsonl(path: str | os.PathLike, *, strict: bool = True) -> LoadReport:
    """Load records in file order.

    In lenient mode lines that are not valid JSON objects with the required
    keys are skipped and reported; empty answer lists and duplicate ids are
    always fatal.
    """
    report = LoadReport([])
    seen: dict[str, int] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot open dataset {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("line is not a JSON object")
                missing = [k for k in ("id", "question", "answers") if k not in obj]
                if missing:
                    raise ValueError(f"missing key(s) {', '.join(missing)}")
            except ValueError as exc:
                if strict:
                    raise DatasetError(str(exc), line=lineno) from exc
                logger.warning("%s:%d skipped: %s", path, lineno, exc)
                report.skipped.append((lineno, str(exc)))
                continue
            try:
                rec = QARecord.from_json(obj)
            except InputError as exc:
                raise DatasetError(str(exc), line=lineno) from exc
            if rec.id in seen:
                raise DatasetError(f"duplicate id {rec.id!r} (first seen on line {seen[rec.id]})", line=lineno)
            seen[rec.id] = lineno
            report.records.append(rec)
    return report


def load_jsonl(path: str | os.PathLike, *, strict: bool = True) -> list[QARecord]:
    return read_jsonl(path, strict=strict).records


def save_jsonl(records: Iterable[QARecord], path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")


def generate_evidence(record: QARecord, client: ChatClient, cache: JsonCache | None = None) -> QARecord:
    """Have the model write a background document for a record that has none."""
    if record.evidence_source != "absent":
        raise InputError(f"record {record.id} already has evidence ({record.evidence_source})")
    text = complete_cached(build_evidence_prompt(record.question), client, cache).strip()
    if not text:
        raise InputError(f"record {record.id}: generated evidence is empty")
    return replace(record, evidence=text, evidence_source="generated")
