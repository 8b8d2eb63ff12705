"""Content-addressed JSON cache shared by the embedding and LLM layers.

Entries live at ``<root>/<namespace>/<2-hex-prefix>/<digest>.json``. Values
are deterministic, so concurrent writers of one key may race: the last
atomic rename wins and every reader sees a complete file.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

STATS_FILE = "stats.json"


def digest(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    writes: int = 0
    corrupt: int = 0


class JsonCache:
    """One namespace of the on-disk cache; ``root=None`` keeps entries in memory."""

    def __init__(self, root: str | os.PathLike | None, namespace: str):
        self.namespace = namespace
        self.root = Path(root) if root is not None else None
        self._memory: dict[str, dict] = {}
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        self.stats = CacheStats()

    def path_for(self, key: str) -> Path:
        assert self.root is not None
        return self.root / self.namespace / key[:2] / f"{key}.json"

    def _bump(self, field: str) -> None:
        with self._lock:
            setattr(self.stats, field, getattr(self.stats, field) + 1)

    def _key_lock(self, key: str) -> threading.Lock:
        with self._lock:
            return self._key_locks.setdefault(key, threading.Lock())

    def get(self, key: str, validate=None) -> dict | None:
        """Return the stored payload, or None on a miss.

        Unreadable entries, and entries rejected by ``validate``, are deleted
        and reported as a miss plus a ``corrupt`` count.
        """
        if self.root is None:
            with self._lock:
                payload = self._memory.get(key)
        else:
            path = self.path_for(key)
            try:
                payload = json.loads(path.read_text(encoding="utf-8"))
            except FileNotFoundError:
                payload = None
            except (OSError, ValueError):
                payload = self._discard(key, "unreadable")
            if payload is not None and not isinstance(payload, dict):
                payload = self._discard(key, "not an object")
        if payload is not None and validate is not None and not validate(payload):
            payload = self._discard(key, "failed validation")
        self._bump("hits" if payload is not None else "misses")
        return payload

    def _discard(self, key: str, why: str) -> None:
        logger.warning("discarding corrupt %s cache entry %s (%s)", self.namespace, key, why)
        self._bump("corrupt")
        if self.root is None:
            with self._lock:
                self._memory.pop(key, None)
        else:
            try:
                self.path_for(key).unlink()
            except FileNotFoundError:
                pass
        return None

    def put(self, key: str, payload: dict) -> None:
        self._bump("writes")
        if self.root is None:
            with self._lock:
                self._memory[key] = payload
            return
        path = self.path_for(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = json.dumps(payload, ensure_ascii=False, sort_keys=True)
        with self._key_lock(key):
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    fh.write(data)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise

    def entry_count(self) -> int:
        if self.root is None:
            return len(self._memory)
        base = self.root / self.namespace
        if not base.exists():
            return 0
        return sum(1 for _ in base.glob("*/*.json"))


def record_stats(root: str | os.PathLike | None, caches: list[JsonCache]) -> dict:
    """Add this process's counters to the cumulative totals in ``<root>/stats.json``."""
    totals = load_stats(root)
    for c in caches:
        bucket = totals.setdefault(c.namespace, asdict(CacheStats()))
        for k, v in asdict(c.stats).items():
            bucket[k] = bucket.get(k, 0) + v
    if root is not None:
        path = Path(root) / STATS_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(totals, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return totals


def load_stats(root: str | os.PathLike | None) -> dict:
    if root is None:
        return {}
    path = Path(root) / STATS_FILE
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except ValueError:
        logger.warning("ignoring unreadable %s", path)
        return {}
