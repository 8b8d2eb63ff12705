"""Sentence segmentation, approximate token counting and answer normalization.

Everything here is a pure function of its input.
"""
from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from typing import Iterator

_BLOCK_BREAK_RE = re.compile(r"\n[^\S\n]*\n\s*")
_CANDIDATE_RE = re.compile(r"[.!?]+[\"'”’)\]]*(?=\s+(\S))")
_SENTENCE_OPENERS = "\"'“‘(["
_CHUNK_RE = re.compile(r"\S+")

ABBREVIATIONS = frozenset(
    """
    dr. mr. mrs. ms. st. no. u.s. u.k. u.n. d.c. jr. sr. prof. gen. col. lt. sgt.
    capt. rev. hon. gov. sen. rep. mt. ft. vs. etc. e.g. i.e. inc. ltd. co. corp.
    vol. fig. ch. art. pp. p.m. a.m. approx. dept. est. jan. feb. mar. apr. jun.
    jul. aug. sep. sept. oct. nov. dec.
    """.split()
)

_OPEN_CLOSE = {"(": ")", "[": "]", "{": "}", "“": "”"}


@dataclass(frozen=True)
class Sentence:
    index: int
    text: str
    char_span: tuple[int, int]


@dataclass(frozen=True)
class TokenBudget:
    max_tokens: int

    def __post_init__(self):
        if isinstance(self.max_tokens, bool) or not isinstance(self.max_tokens, int):
            raise TypeError(f"max_tokens must be an int, got {self.max_tokens!r}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")


def _protected_spans(text: str) -> list[tuple[int, int]]:
    """Matched bracket and quote pairs as (open, close) character positions."""
    spans = []
    stack: list[tuple[str, int]] = []
    closers = {v: k for k, v in _OPEN_CLOSE.items()}
    straight_open = None
    for i, ch in enumerate(text):
        if ch in _OPEN_CLOSE:
            stack.append((ch, i))
        elif ch in closers:
            # pop back to the nearest matching opener; strays are ignored
            for depth in range(len(stack) - 1, -1, -1):
                if stack[depth][0] == closers[ch]:
                    spans.append((stack[depth][1], i))
                    del stack[depth:]
                    break
        elif ch == '"':
            if straight_open is None:
                straight_open = i
            else:
                spans.append((straight_open, i))
                straight_open = None
    return spans


def _is_abbreviation(block: str, run_start: int, run: str) -> bool:
    if run != ".":
        return False
    word_start = run_start
    while word_start > 0 and not block[word_start - 1].isspace():
        word_start -= 1
    word = block[word_start : run_start + 1].lstrip("\"'“‘([{")
    if re.fullmatch(r"[^\W\d_]\.", word):
        return True  # single initial such as "J."
    return word.lower() in ABBREVIATIONS


def _split_block(block: str, offset: int) -> Iterator[tuple[int, int]]:
    spans = _protected_spans(block)
    start = 0
    for m in _CANDIDATE_RE.finditer(block):
        nxt = m.group(1)
        if not (nxt.isupper() or nxt.isdigit() or nxt in _SENTENCE_OPENERS):
            continue
        end = m.end()
        last = end - 1
        if any(o < last < c for o, c in spans):
            continue
        run = re.match(r"[.!?]+", m.group()).group()
        if _is_abbreviation(block, m.start(), run):
            continue
        yield offset + start, offset + end
        start = end
    yield offset + start, offset + len(block)


def split_sentences(document: str) -> list[Sentence]:
    """Split a document into sentences with character spans.

    Boundaries are terminal punctuation (optionally followed by closing
    quotes/brackets) before whitespace and an uppercase letter, digit, quote
    or opening bracket. Known abbreviations, single initials and positions
    inside matched brackets/quotes never split. Blank lines always split.
    """
    out: list[Sentence] = []
    pos = 0
    blocks = []
    for m in _BLOCK_BREAK_RE.finditer(document):
        blocks.append((pos, m.start()))
        pos = m.end()
    blocks.append((pos, len(document)))

    for b_start, b_end in blocks:
        for s, e in _split_block(document[b_start:b_end], b_start):
            piece = document[s:e]
            stripped = piece.strip()
            if not stripped:
                continue
            lead = len(piece) - len(piece.lstrip())
            s2 = s + lead
            out.append(Sentence(len(out), stripped, (s2, s2 + len(stripped))))
    return out


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "PS"


def token_spans(text: str) -> list[tuple[int, int]]:
    """Character spans of tokens: whitespace chunks with leading and trailing
    punctuation runs split off as their own tokens."""
    spans = []
    for m in _CHUNK_RE.finditer(text):
        s, e = m.span()
        i, j = s, e
        while i < e and _is_punct(text[i]):
            i += 1
        if i == e:
            spans.append((s, e))
            continue
        while _is_punct(text[j - 1]):
            j -= 1
        if i > s:
            spans.append((s, i))
        spans.append((i, j))
        if j < e:
            spans.append((j, e))
    return spans


def count_tokens(text: str) -> int:
    return len(token_spans(text))


def truncate_tokens(text: str, budget: TokenBudget | int) -> str:
    """Longest character prefix of `text` holding at most `budget` tokens,
    cut right after a token (never inside one)."""
    if not isinstance(budget, TokenBudget):
        budget = TokenBudget(budget)
    spans = token_spans(text)
    if len(spans) <= budget.max_tokens:
        return text
    return text[: spans[budget.max_tokens - 1][1]]


_ARTICLES = frozenset({"a", "an", "the"})


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation, drop the articles a/an/the, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if not _is_punct(ch))
    return " ".join(tok for tok in text.split() if tok not in _ARTICLES)
