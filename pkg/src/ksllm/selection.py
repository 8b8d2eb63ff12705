"""Pick the k document sentences closest to a query in embedding space."""
from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, localcontext
from fractions import Fraction
from typing import Literal, Sequence

import numpy as np

from .cache import JsonCache
from .embedding import Embedder, EmbeddingVector, cached_embed, euclidean_distance
from .errors import InputError
from .text import Sentence
from .triples import Triple, render_triples


@dataclass(frozen=True)
class SelectionQuery:
    mode: Literal["triples", "question"]
    text: str
    parts: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in ("triples", "question"):
            raise InputError(f"unknown selection mode {self.mode!r}")
        if not self.text or not self.text.strip():
            raise InputError("selection query text must be non-empty")

    @classmethod
    def from_triples(cls, triples: Sequence[Triple]) -> "SelectionQuery":
        return cls("triples", render_triples(triples, "query"), tuple(t.render() for t in triples))

    @classmethod
    def from_question(cls, question: str) -> "SelectionQuery":
        return cls("question", question)


@dataclass(frozen=True)
class SelectionResult:
    indices: tuple[int, ...]
    distances: tuple[float, ...]
    sentences: tuple[Sentence, ...]
    k_requested: int


# Float distances this close may be an exact tie or a rounding inversion;
# such groups are re-ranked with exact arithmetic.
_NEAR_TIE_REL = 1e-12


def _exact_sq_distances(vecs: Sequence[EmbeddingVector], q: EmbeddingVector) -> list[Fraction]:
    """Exact squared distances of several vectors to ``q``.

    Finite floats are integers over powers of two, so everything is scaled to
    one common denominator and summed in integer arithmetic.
    """
    ratios = [[x.as_integer_ratio() for x in v.values] for v in (q, *vecs)]
    denom = max(d for r in ratios for _, d in r)
    scaled = [[n * (denom // d) for n, d in r] for r in ratios]
    qs = scaled[0]
    out = []
    for vs in scaled[1:]:
        out.append(Fraction(sum((a - b) * (a - b) for a, b in zip(vs, qs)), denom * denom))
    return out


def _rounded_sqrt(value: Fraction) -> float:
    with localcontext() as ctx:
        ctx.prec = 60
        return float((Decimal(value.numerator) / Decimal(value.denominator)).sqrt())


def _rank(dists: list[float], vecs: list[EmbeddingVector], q: EmbeddingVector, k: int) -> list[tuple[int, float]]:
    """The first ``k`` sentence positions by (exact distance, position).

    Returns (position, distance) pairs; distances inside re-ranked groups are
    the correctly rounded exact values, so the sequence stays non-decreasing.
    """
    order = sorted(range(len(dists)), key=lambda i: (dists[i], i))
    ranked: list[tuple[int, float]] = []
    start = 0
    while start < len(order) and len(ranked) < k:
        end = start + 1
        while end < len(order):
            lo, hi = dists[order[end - 1]], dists[order[end]]
            if hi - lo > _NEAR_TIE_REL * max(hi, 1e-300):
                break
            end += 1
        group = order[start:end]
        if len(group) == 1:
            ranked.append((group[0], dists[group[0]]))
        else:
            exact = dict(zip(group, _exact_sq_distances([vecs[i] for i in group], q)))
            for i in sorted(group, key=lambda i: (exact[i], i)):
                ranked.append((i, _rounded_sqrt(exact[i])))
        start = end
    return ranked[:k]


def _query_vector(query: SelectionQuery, embedder: Embedder, cache: JsonCache | None, pooling: str) -> EmbeddingVector:
    if pooling == "joint" or not query.parts:
        return cached_embed(cache, embedder, [query.text])[0]
    if pooling == "mean":
        vecs = cached_embed(cache, embedder, list(query.parts))
        return EmbeddingVector(tuple(np.mean([v.array for v in vecs], axis=0)))
    raise InputError(f"unknown query pooling {pooling!r}")


def select_evidence(
    query: SelectionQuery,
    sentences: Sequence[Sentence],
    k: int,
    embedder: Embedder,
    cache: JsonCache | None = None,
    *,
    pooling: Literal["joint", "mean"] = "joint",
) -> SelectionResult:
    """Return the ``min(k, n)`` sentences nearest to the query, nearest first.

    The query is embedded once as a whole (``pooling="mean"`` averages the
    per-triple embeddings instead). Exactly equal distances go to the lower
    index, even when floating-point rounding makes them differ in the last bit.
    """
    if isinstance(k, bool) or not isinstance(k, int) or k < 1:
        raise InputError(f"k must be a positive integer, got {k!r}")
    if not sentences:
        return SelectionResult((), (), (), k)
    q = _query_vector(query, embedder, cache, pooling)
    vecs = cached_embed(cache, embedder, [s.text for s in sentences])
    dists = [euclidean_distance(v, q) for v in vecs]
    ranked = _rank(dists, vecs, q, k)
    return SelectionResult(
        indices=tuple(sentences[i].index for i, _ in ranked),
        distances=tuple(d for _, d in ranked),
        sentences=tuple(sentences[i] for i, _ in ranked),
        k_requested=k,
    )
