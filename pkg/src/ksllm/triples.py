"""Knowledge triples: parsing from model output and rendering back to text."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal

from .errors import InputError


def _balanced(s: str) -> bool:
    depth = 0
    for ch in s:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                return False
    return depth == 0


@dataclass(frozen=True)
class Triple:
    head: str
    relation: str
    tail: str

    def __post_init__(self):
        for name in ("head", "relation", "tail"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise InputError(f"triple {name} must be a non-empty string")
            if not _balanced(value):
                raise InputError(f"triple {name} has unbalanced parentheses: {value!r}")
            object.__setattr__(self, name, value.strip())

    def render(self) -> str:
        return f"({self.head}, {self.relation}, {self.tail})"


def _top_level_groups(text: str) -> Iterable[str]:
    """Yield the inside of every outermost (...) group, in order."""
    depth = 0
    start = 0
    for i, ch in enumerate(text):
        if ch == "(":
            if depth == 0:
                start = i + 1
            depth += 1
        elif ch == ")" and depth > 0:
            depth -= 1
            if depth == 0:
                yield text[start:i]


def _split_top_level_commas(group: str) -> list[str]:
    parts, depth, start = [], 0, 0
    for i, ch in enumerate(group):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append(group[start:i])
            start = i + 1
    parts.append(group[start:])
    return parts


def parse_triples_with_stats(llm_text: str) -> tuple[list[Triple], int]:
    """Parse triples and also count parenthesized groups that were rejected.

    A group is accepted only when it has exactly two top-level commas and all
    three trimmed fields are non-empty. Everything else counts as malformed.
    """
    triples: list[Triple] = []
    malformed = 0
    for group in _top_level_groups(llm_text):
        parts = [p.strip() for p in _split_top_level_commas(group)]
        if len(parts) != 3 or not all(parts):
            malformed += 1
            continue
        triples.append(Triple(*parts))
    return triples, malformed


def parse_triples(llm_text: str) -> list[Triple]:
    return parse_triples_with_stats(llm_text)[0]


def render_triples(triples: Iterable[Triple], style: Literal["query", "prompt"] = "query") -> str:
    """Serialize triples on one line (embedding query) or one per line (prompt)."""
    if style == "query":
        sep = ", "
    elif style == "prompt":
        sep = "\n"
    else:
        raise InputError(f"unknown render style {style!r}")
    return sep.join(t.render() for t in triples)
