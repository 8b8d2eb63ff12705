"""Embedding vectors, embedder backends, Euclidean distance and the embedding cache.

The offline backend is a signed feature-hashing embedder. Its hash is pinned
so vectors are identical across processes and platforms:

* features: lowercased ``\\w+`` word unigrams plus adjacent-word bigrams
  (joined by one space), UTF-8 encoded
* hash: 64-bit FNV-1a (offset basis 0xcbf29ce484222325, prime 0x100000001b3)
* bucket: ``hash % dim``; sign: -1 when bit 63 of the hash is set, else +1
* the accumulated vector is L2-normalized; an all-zero vector becomes e_0
"""
from __future__ import annotations

import functools
import math
import re
import threading
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import httpx
import numpy as np

from .cache import JsonCache, digest
from .errors import InputError, ProtocolError
from .http import BACKOFF_BASE, RETRIES, bearer_headers, post_json

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_WORD_RE = re.compile(r"\w+")


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    def __post_init__(self):
        try:
            arr = np.array(self.values, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise InputError(f"embedding vector must be a flat sequence of numbers: {exc}") from None
        if arr.ndim != 1 or arr.size == 0:
            raise InputError("embedding vector must be one-dimensional with dim > 0")
        if not np.isfinite(arr).all():
            raise InputError("embedding vector has non-finite components")
        arr.setflags(write=False)
        object.__setattr__(self, "values", tuple(arr.tolist()))
        self.__dict__["array"] = arr

    @property
    def dim(self) -> int:
        return len(self.values)

    @functools.cached_property
    def array(self) -> np.ndarray:
        arr = np.asarray(self.values, dtype=np.float64)
        arr.setflags(write=False)
        return arr


def euclidean_distance(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dim != b.dim:
        raise InputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.array - b.array
    return float(np.sqrt(diff @ diff))


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@functools.lru_cache(maxsize=1 << 16)
def _feature_slot(feature: str, dim: int) -> tuple[int, float]:
    h = fnv1a_64(feature.encode("utf-8"))
    return h % dim, (-1.0 if h >> 63 else 1.0)


def hash_features(text: str) -> list[str]:
    words = _WORD_RE.findall(text.lower())
    return words + [f"{a} {b}" for a, b in zip(words, words[1:])]


def hash_embed(text: str, dim: int) -> EmbeddingVector:
    if dim < 8:
        raise InputError(f"hash embedding dim must be >= 8, got {dim}")
    acc = [0.0] * dim
    for feat in hash_features(text):
        bucket, sign = _feature_slot(feat, dim)
        acc[bucket] += sign
    norm = math.sqrt(sum(v * v for v in acc))
    if norm == 0.0:
        acc[0] = 1.0
        return EmbeddingVector(tuple(acc))
    return EmbeddingVector(tuple(v / norm for v in acc))


class Embedder(Protocol):
    identity: str

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


class _CountingMixin:
    """Thread-safe invocation counters, used by tests and run diagnostics."""

    def _init_counters(self):
        self._count_lock = threading.Lock()
        self.calls = 0
        self.texts_embedded = 0

    def _count(self, n: int):
        with self._count_lock:
            self.calls += 1
            self.texts_embedded += n


class HashEmbedder(_CountingMixin):
    def __init__(self, dim: int = 256):
        if dim < 8:
            raise InputError(f"hash embedding dim must be >= 8, got {dim}")
        self.dim = dim
        self.identity = f"hash:fnv1a64:uni+bi:dim={dim}"
        self._init_counters()

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        self._count(len(texts))
        return [hash_embed(t, self.dim) for t in texts]


class TableEmbedder(_CountingMixin):
    """Looks texts up in a fixed table; unknown texts fall back to ``fallback`` if given."""

    def __init__(self, table: Mapping[str, Sequence[float]], name: str = "table", fallback: Embedder | None = None):
        self.table = {k: EmbeddingVector(tuple(v)) for k, v in table.items()}
        self.fallback = fallback
        self.identity = f"table:{name}"
        self._init_counters()

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        self._count(len(texts))
        out = []
        for t in texts:
            if t in self.table:
                out.append(self.table[t])
            elif self.fallback is not None:
                out.extend(self.fallback.embed([t]))
            else:
                raise InputError(f"no table embedding for {t[:60]!r}")
        return out


class RemoteEmbedder(_CountingMixin):
    """Client for an OpenAI-style ``{"model", "input"}`` embedding endpoint."""

    def __init__(
        self,
        endpoint_url: str,
        model_name: str,
        *,
        timeout: float = 60.0,
        max_batch: int = 64,
        api_key_env: str | None = None,
        retries: int = RETRIES,
        backoff: float = BACKOFF_BASE,
        transport: httpx.BaseTransport | None = None,
    ):
        if not endpoint_url or not model_name:
            raise InputError("remote embedder requires endpoint_url and model_name")
        if max_batch < 1:
            raise InputError("max_batch must be >= 1")
        self.endpoint_url = endpoint_url
        self.model_name = model_name
        self.max_batch = max_batch
        self.api_key_env = api_key_env
        self.retries = retries
        self.backoff = backoff
        self.identity = f"remote:{endpoint_url}:{model_name}"
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._init_counters()

    def close(self):
        self._client.close()

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        self._count(len(texts))
        out: list[EmbeddingVector] = []
        for start in range(0, len(texts), self.max_batch):
            out.extend(self._embed_batch(list(texts[start : start + self.max_batch])))
        return out

    def _embed_batch(self, batch: list[str]) -> list[EmbeddingVector]:
        body = post_json(
            self._client,
            self.endpoint_url,
            {"model": self.model_name, "input": batch},
            bearer_headers(self.api_key_env),
            retries=self.retries,
            backoff=self.backoff,
        )
        data = body.get("data")
        if not isinstance(data, list) or len(data) != len(batch):
            got = len(data) if isinstance(data, list) else "no"
            raise ProtocolError(f"expected {len(batch)} embeddings, got {got}")
        try:
            rows = sorted(data, key=lambda d: int(d["index"]))
            if [int(r["index"]) for r in rows] != list(range(len(batch))):
                raise ProtocolError("embedding indices are not 0..n-1")
            return [EmbeddingVector(tuple(r["embedding"])) for r in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed embedding response: {exc}") from exc


def embed(embedder: Embedder, texts: Sequence[str]) -> list[EmbeddingVector]:
    """Embed ``texts`` with order, count and dimension checks."""
    if not texts:
        raise InputError("embed() needs at least one text")
    for t in texts:
        if not isinstance(t, str) or not t:
            raise InputError("cannot embed an empty text")
    vectors = embedder.embed(list(texts))
    if len(vectors) != len(texts):
        raise ProtocolError(f"embedder returned {len(vectors)} vectors for {len(texts)} texts")
    dims = {v.dim for v in vectors}
    if len(dims) != 1:
        raise ProtocolError(f"embedder returned mixed dimensions {sorted(dims)}")
    return vectors


def _valid_entry(identity: str):
    def check(entry: dict) -> bool:
        values = entry.get("values")
        return (
            entry.get("embedder") == identity
            and isinstance(values, list)
            and len(values) == entry.get("dim")
            and len(values) > 0
            and all(isinstance(v, (int, float)) and math.isfinite(v) for v in values)
        )

    return check


def cached_embed(cache: JsonCache | None, embedder: Embedder, texts: Sequence[str]) -> list[EmbeddingVector]:
    """Like :func:`embed`, but reuse vectors stored under (embedder identity, text)."""
    if cache is None:
        return embed(embedder, texts)
    if not texts:
        raise InputError("embed() needs at least one text")
    check = _valid_entry(embedder.identity)
    keys = [digest(embedder.identity, t) for t in texts]
    found: dict[str, EmbeddingVector] = {}
    missing: dict[str, str] = {}
    for key, text in zip(keys, texts):
        if key in found or key in missing:
            continue
        entry = cache.get(key, validate=check)
        if entry is None:
            missing[key] = text
        else:
            found[key] = EmbeddingVector(tuple(entry["values"]))
    if missing:
        fresh = embed(embedder, list(missing.values()))
        for key, vec in zip(missing, fresh):
            cache.put(key, {"dim": vec.dim, "values": list(vec.values), "embedder": embedder.identity})
            found[key] = vec
    return [found[k] for k in keys]


@dataclass
class EmbedderConfig:
    kind: str = "hash"
    dim: int = 256
    endpoint_url: str | None = None
    model_name: str | None = None
    api_key_env: str | None = None
    timeout: float = 60.0
    max_batch: int = 64

    def __post_init__(self):
        if self.kind == "remote":
            if not self.endpoint_url or not self.model_name:
                raise InputError("embedder.kind=remote requires endpoint_url and model_name")
        elif self.kind == "hash":
            if not isinstance(self.dim, int) or self.dim < 8:
                raise InputError("embedder.kind=hash requires dim >= 8")
        else:
            raise InputError(f"unknown embedder kind {self.kind!r}")

    def build(self) -> Embedder:
        if self.kind == "hash":
            return HashEmbedder(self.dim)
        return RemoteEmbedder(
            self.endpoint_url,
            self.model_name,
            timeout=self.timeout,
            max_batch=self.max_batch,
            api_key_env=self.api_key_env,
        )
