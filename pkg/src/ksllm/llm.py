"""LLM access: prompt templates for every method, clients, and the response cache."""
from __future__ import annotations

import enum
import json
import re
import threading
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import httpx

from .cache import JsonCache, digest
from .errors import InputError, MockMissError, ProtocolError
from .http import BACKOFF_BASE, RETRIES, bearer_headers, post_json
from .text import Sentence, TokenBudget, truncate_tokens
from .triples import Triple, parse_triples_with_stats, render_triples


class MethodId(str, enum.Enum):
    STANDARD = "standard"
    STANDARD_DOC = "standard_doc"
    COT_DOC = "cot_doc"
    KS_Q = "ks_q"
    KS_T = "ks_t"
    KS_S = "ks_s"
    KS_LLM = "ks_llm"

    @property
    def order(self) -> int:
        return list(MethodId).index(self)

    @property
    def uses_document(self) -> bool:
        return self in (MethodId.STANDARD_DOC, MethodId.COT_DOC)

    @property
    def uses_triples(self) -> bool:
        return self in (MethodId.KS_T, MethodId.KS_S, MethodId.KS_LLM)

    @property
    def uses_selection(self) -> bool:
        return self in (MethodId.KS_Q, MethodId.KS_S, MethodId.KS_LLM)

    @property
    def needs_evidence(self) -> bool:
        return self.uses_document or self.uses_selection


SYSTEM_MESSAGE = "You are a knowledgeable assistant that answers factual questions."
ANSWER_INSTRUCTION = "Answer with a single entity only."
COT_INSTRUCTION = (
    "Let's think step by step, then write the final answer on its own last line "
    'in the form "Answer: <answer>".'
)
TRIPLE_PROMPT_MARKER = "knowledge triples with the subject entity as the head"
EVIDENCE_PROMPT_MARKER = "background document"

ANSWER_MAX_TOKENS = 64
COT_MAX_TOKENS = 512
TRIPLE_MAX_TOKENS = 256
EVIDENCE_MAX_TOKENS = 512


@dataclass(frozen=True)
class Prompt:
    """A chat prompt. ``method`` is None for auxiliary calls (triples, evidence)."""

    method: MethodId | None
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_output_tokens: int = ANSWER_MAX_TOKENS

    def __post_init__(self):
        if not any(role == "user" for role, _ in self.messages):
            raise InputError("prompt needs at least one user message")
        for role, content in self.messages:
            if role not in ("system", "user"):
                raise InputError(f"unsupported message role {role!r}")
            if not content:
                raise InputError("prompt message content must be non-empty")
        if self.temperature < 0:
            raise InputError("temperature must be >= 0")

    @property
    def text(self) -> str:
        """All message contents joined; what mock matchers search."""
        return "\n\n".join(content for _, content in self.messages)

    def params(self) -> dict:
        return {"temperature": self.temperature, "max_tokens": self.max_output_tokens}

    def wire_messages(self) -> list[dict]:
        return [{"role": r, "content": c} for r, c in self.messages]

    def digest(self, model: str) -> str:
        body = json.dumps({"messages": self.wire_messages(), **self.params()}, sort_keys=True, ensure_ascii=False)
        return digest(model, body)


def _chat(method: MethodId | None, user: str, max_tokens: int) -> Prompt:
    return Prompt(method, (("system", SYSTEM_MESSAGE), ("user", user)), 0.0, max_tokens)


def _sentence_block(sentences: Sequence[Sentence]) -> str:
    ordered = sorted(sentences, key=lambda s: s.index)
    return "\n".join(s.text for s in ordered) if ordered else "(none)"


def _triple_block(triples: Sequence[Triple]) -> str:
    return render_triples(triples, "prompt") if triples else "(none)"


def build_prompt(
    method: MethodId | str,
    question: str,
    document: str | None = None,
    triples: Sequence[Triple] | None = None,
    sentences: Sequence[Sentence] | None = None,
    budget: TokenBudget | int = 300,
    answer_instruction: str = ANSWER_INSTRUCTION,
) -> Prompt:
    """Build the answer-generation prompt for one method.

    Ingredients a method does not use are ignored, so e.g. a standard prompt
    never carries evidence. Selected sentences are emitted in document order.
    """
    method = MethodId(method)
    if not question or not question.strip():
        raise InputError(f"{method.value} prompt needs a question")
    if not isinstance(budget, TokenBudget):
        budget = TokenBudget(budget)

    def need(value, part):
        if value is None:
            raise InputError(f"{method.value} prompt needs {part}")
        return value

    question_line = f"Question: {question.strip()}"
    parts: list[str]
    max_tokens = ANSWER_MAX_TOKENS
    if method is MethodId.STANDARD:
        parts = ["Answer the following question.", question_line]
    elif method.uses_document:
        doc = truncate_tokens(need(document, "a document"), budget)
        parts = ["Answer the following question using the document below.", f"Document:\n{doc}", question_line]
        if method is MethodId.COT_DOC:
            parts.append(COT_INSTRUCTION)
            max_tokens = COT_MAX_TOKENS
    elif method in (MethodId.KS_Q, MethodId.KS_S):
        block = _sentence_block(need(sentences, "evidence sentences"))
        parts = [
            "Answer the following question using the evidence sentences below.",
            f"Evidence sentences:\n{block}",
            question_line,
        ]
    elif method is MethodId.KS_T:
        parts = [
            "Answer the following question using the knowledge triples below.",
            f"Knowledge triples:\n{_triple_block(need(triples, 'triples'))}",
            question_line,
        ]
    else:
        triple_block = _triple_block(need(triples, "triples"))
        sentence_block = _sentence_block(need(sentences, "evidence sentences"))
        parts = [
            "Answer the following question using the knowledge triples and evidence sentences below.",
            f"Knowledge triples:\n{triple_block}",
            f"Evidence sentences:\n{sentence_block}",
            question_line,
        ]
    user = "\n\n".join(parts) + "\n\n" + answer_instruction
    return _chat(method, user, max_tokens)


def build_triple_prompt(question: str) -> Prompt:
    if not question or not question.strip():
        raise InputError("triple construction needs a question")
    user = (
        "Identify the subject entity of the question below: the person, place, organization "
        "or other entity that reflects the core topic of the question. Then write 3 to 5 "
        f"{TRIPLE_PROMPT_MARKER} entity, covering facts that help answer the question.\n"
        "Write one triple per line in the form (head, relation, tail). "
        "Do not put commas or parentheses inside a head, relation or tail.\n\n"
        f"Question: {question.strip()}\n\nTriples:"
    )
    return _chat(None, user, TRIPLE_MAX_TOKENS)


def build_evidence_prompt(question: str) -> Prompt:
    user = (
        f"Write a short {EVIDENCE_PROMPT_MARKER} of about 100 to 300 words containing facts "
        "relevant to the question below. Write plain prose and do not restate the question.\n\n"
        f"Question: {question.strip()}\n\nDocument:"
    )
    return _chat(None, user, EVIDENCE_MAX_TOKENS)


class ChatClient(Protocol):
    model: str

    def complete(self, prompt: Prompt) -> str: ...


class HttpChatClient:
    """Client for an OpenAI-style chat completions endpoint.

    ``base_url`` may be the API root (``.../v1``) or the full
    ``.../chat/completions`` URL. At most ``max_in_flight`` requests run at once.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_key_env: str | None = None,
        timeout: float = 120.0,
        max_in_flight: int = 4,
        retries: int = RETRIES,
        backoff: float = BACKOFF_BASE,
        transport: httpx.BaseTransport | None = None,
    ):
        if not base_url or not model:
            raise InputError("HTTP chat client needs base_url and model")
        url = base_url.rstrip("/")
        self.url = url if url.endswith("/chat/completions") else url + "/chat/completions"
        self.model = model
        self.api_key_env = api_key_env
        self.retries = retries
        self.backoff = backoff
        self._gate = threading.BoundedSemaphore(max_in_flight)
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._lock = threading.Lock()
        self.calls = 0

    def close(self):
        self._client.close()

    def complete(self, prompt: Prompt) -> str:
        with self._lock:
            self.calls += 1
        payload = {"model": self.model, "messages": prompt.wire_messages(), **prompt.params()}
        with self._gate:
            body = post_json(
                self._client,
                self.url,
                payload,
                bearer_headers(self.api_key_env),
                retries=self.retries,
                backoff=self.backoff,
            )
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"chat response lacks choices[0].message.content: {exc!r}") from exc
        if not isinstance(content, str):
            raise ProtocolError("chat response content is not a string")
        return content


class ScriptedMockClient:
    """Test double: answers with the first script entry whose pattern occurs in the prompt.

    ``script`` is a mapping or a sequence of (substring, response) pairs and
    is tried in order. Prompts matching nothing get ``default``, or raise
    MockMissError when no default is set. Every prompt is recorded.
    """

    def __init__(self, script: Mapping[str, str] | Sequence[tuple[str, str]] = (), default: str | None = None, model: str | None = None):
        items = list(script.items()) if isinstance(script, Mapping) else [tuple(x) for x in script]
        self.script: list[tuple[str, str]] = items
        self.default = default
        fingerprint = digest(json.dumps([items, default], ensure_ascii=False))[:12]
        self.model = model or f"mock-{fingerprint}"
        self.prompts: list[Prompt] = []
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        with self._lock:
            return len(self.prompts)

    def complete(self, prompt: Prompt) -> str:
        with self._lock:
            self.prompts.append(prompt)
        text = prompt.text
        for pattern, response in self.script:
            if pattern in text:
                return response
        if self.default is not None:
            return self.default
        raise MockMissError(f"no script entry matches prompt: {text[:120]!r}")


def scripted_mock_client(script=(), default: str | None = None) -> ScriptedMockClient:
    return ScriptedMockClient(script, default)


def _valid_response(key: str):
    def check(entry: dict) -> bool:
        return entry.get("prompt_digest") == key and isinstance(entry.get("response"), str)

    return check


def complete_cached(prompt: Prompt, client: ChatClient, cache: JsonCache | None) -> str:
    """Raw completion, served from the response cache when possible."""
    if cache is None:
        return client.complete(prompt)
    key = prompt.digest(client.model)
    entry = cache.get(key, validate=_valid_response(key))
    if entry is not None:
        return entry["response"]
    response = client.complete(prompt)
    cache.put(key, {"prompt_digest": key, "model": client.model, "params": prompt.params(), "response": response})
    return response


_LABEL_RE = re.compile(r"^\s*(?:answer\s*:|the answer is\s*:?)\s*", re.IGNORECASE)
_FINAL_LINE_RE = re.compile(r"^\s*answer\s*:\s*(.+?)\s*$", re.IGNORECASE | re.MULTILINE)


def clean_answer(raw: str, method: MethodId | None = None) -> str:
    """Strip whitespace and a leading "Answer:" / "The answer is" label.

    Chain-of-thought output keeps only the last "Answer: ..." line when present.
    """
    if method is MethodId.COT_DOC:
        finals = _FINAL_LINE_RE.findall(raw)
        if finals:
            return finals[-1].strip()
    return _LABEL_RE.sub("", raw.strip(), count=1).strip()


def generate_answer(prompt: Prompt, client: ChatClient, cache: JsonCache | None = None) -> str:
    return clean_answer(complete_cached(prompt, client, cache), prompt.method)


def construct_triples(
    question: str,
    client: ChatClient,
    cache: JsonCache | None = None,
    diagnostics: list[str] | None = None,
) -> list[Triple]:
    """Ask the model for triples about the question's subject entity and parse them."""
    raw = complete_cached(build_triple_prompt(question), client, cache)
    triples, malformed = parse_triples_with_stats(raw)
    if diagnostics is not None:
        if malformed:
            diagnostics.append(f"skipped {malformed} malformed triple group(s)")
        if not triples:
            diagnostics.append("triple construction produced no well-formed triples")
    return triples
