"""Run configuration: YAML files with dotted keys, plus ``key=value`` overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import yaml

from .embedding import EmbedderConfig
from .errors import InputError
from .llm import ANSWER_INSTRUCTION, MethodId
from .text import TokenBudget


class ConfigError(InputError):
    """Bad config file, unknown key, or a value of the wrong type."""


@dataclass
class LlmConfig:
    kind: str = "http"
    base_url: str | None = None
    model: str | None = None
    api_key_env: str | None = None
    timeout: float = 120.0
    max_in_flight: int = 4
    answer_instruction: str = ANSWER_INSTRUCTION
    mock_script: list | dict | None = None
    mock_default: str | None = None

    def build(self):
        from .llm import HttpChatClient, ScriptedMockClient

        if self.kind == "mock":
            script = self.mock_script or []
            if isinstance(script, list):
                script = [tuple(pair) for pair in script]
            return ScriptedMockClient(script, self.mock_default)
        if self.kind == "http":
            if not self.base_url or not self.model:
                raise ConfigError("llm.kind=http requires llm.base_url and llm.model")
            return HttpChatClient(
                self.base_url,
                self.model,
                api_key_env=self.api_key_env,
                timeout=self.timeout,
                max_in_flight=self.max_in_flight,
            )
        raise ConfigError(f"unknown llm.kind {self.kind!r} (expected http or mock)")


@dataclass
class RunConfig:
    method: MethodId = MethodId.KS_LLM
    k: int = 2
    max_tokens: TokenBudget = field(default_factory=lambda: TokenBudget(300))
    dataset_path: str | None = None
    dataset_name: str | None = None
    strict: bool = True
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    cache_dir: str | None = None
    concurrency: int = 1
    output_path: str = "reports"
    pooling: str = "joint"
    record_timings: bool = True

    def __post_init__(self):
        self.method = MethodId(self.method)
        if isinstance(self.max_tokens, int):
            self.max_tokens = TokenBudget(self.max_tokens)
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 1:
            raise ConfigError(f"k must be a positive integer, got {self.k!r}")
        if isinstance(self.concurrency, bool) or not isinstance(self.concurrency, int) or self.concurrency < 1:
            raise ConfigError(f"concurrency must be a positive integer, got {self.concurrency!r}")
        if self.pooling not in ("joint", "mean"):
            raise ConfigError(f"selection.pooling must be joint or mean, got {self.pooling!r}")

    @property
    def dataset(self) -> str:
        if self.dataset_name:
            return self.dataset_name
        if self.dataset_path:
            return Path(self.dataset_path).stem
        return "dataset"


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError("expected an integer")
    return v


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError("expected a number")
    return float(v)


def _bool(v):
    if not isinstance(v, bool):
        raise ValueError("expected true or false")
    return v


def _str(v):
    if v is None:
        return None
    if isinstance(v, (dict, list)):
        raise ValueError("expected a string")
    return str(v)


def _any(v):
    return v


# dotted key -> (parser, is_path)
KEYS: dict[str, tuple[Callable[[Any], Any], bool]] = {
    "method": (_str, False),
    "concurrency": (_int, False),
    "selection.k": (_int, False),
    "selection.pooling": (_str, False),
    "truncation.max_tokens": (_int, False),
    "dataset.path": (_str, True),
    "dataset.name": (_str, False),
    "dataset.strict": (_bool, False),
    "cache.dir": (_str, True),
    "output.path": (_str, True),
    "output.timings": (_bool, False),
    "embedder.kind": (_str, False),
    "embedder.dim": (_int, False),
    "embedder.endpoint_url": (_str, False),
    "embedder.model_name": (_str, False),
    "embedder.api_key_env": (_str, False),
    "embedder.timeout": (_float, False),
    "embedder.max_batch": (_int, False),
    "llm.kind": (_str, False),
    "llm.base_url": (_str, False),
    "llm.model": (_str, False),
    "llm.api_key_env": (_str, False),
    "llm.timeout": (_float, False),
    "llm.max_in_flight": (_int, False),
    "llm.answer_instruction": (_str, False),
    "llm.mock_script": (_any, True),
    "llm.mock_default": (_str, False),
}

DEFAULTS: dict[str, Any] = {
    "method": "ks_llm",
    "concurrency": 1,
    "selection.k": 2,
    "selection.pooling": "joint",
    "truncation.max_tokens": 300,
    "dataset.path": None,
    "dataset.name": None,
    "dataset.strict": True,
    "cache.dir": None,
    "output.path": "reports",
    "output.timings": True,
    "embedder.kind": "hash",
    "embedder.dim": 256,
    "embedder.endpoint_url": None,
    "embedder.model_name": None,
    "embedder.api_key_env": None,
    "embedder.timeout": 60.0,
    "embedder.max_batch": 64,
    "llm.kind": "http",
    "llm.base_url": None,
    "llm.model": None,
    "llm.api_key_env": None,
    "llm.timeout": 120.0,
    "llm.max_in_flight": 4,
    "llm.answer_instruction": ANSWER_INSTRUCTION,
    "llm.mock_script": None,
    "llm.mock_default": None,
}


def flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    """``{"llm": {"model": "x"}}`` -> ``{"llm.model": "x"}``; dotted keys pass through."""
    flat: dict[str, Any] = {}
    for key, value in tree.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict) and full not in KEYS:
            flat.update(flatten(value, full + "."))
        else:
            flat[full] = value
    return flat


def _resolve(value, base: Path | None):
    if base is None or not isinstance(value, str) or os.path.isabs(value):
        return value
    return os.path.normpath(base / value)


def _check(key: str, value):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    parser, _ = KEYS[key]
    if value is None:
        return None
    try:
        return parser(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}, got {value!r}") from None


def load_config_file(path: str | os.PathLike) -> dict[str, Any]:
    """Read a YAML config into dotted keys, resolving paths against its directory."""
    path = Path(path)
    try:
        tree = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(tree, dict):
        raise ConfigError(f"config {path} must be a mapping")
    flat = flatten(tree)
    out = {}
    for key, value in flat.items():
        value = _check(key, value)
        if KEYS[key][1]:
            value = _resolve(value, path.parent)
        out[key] = value
    return out


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError:
        value = raw
    if KEYS.get(key, (None,))[0] is _str and value is not None and not isinstance(value, str):
        value = raw.strip()
    return key, _check(key, value)


def effective_settings(config_path=None, overrides=()) -> dict[str, Any]:
    settings = dict(DEFAULTS)
    if config_path is not None:
        settings.update(load_config_file(config_path))
    for item in overrides:
        key, value = parse_override(item)
        settings[key] = value
    return settings


def build_run_config(settings: dict[str, Any]) -> RunConfig:
    s = settings
    script = s["llm.mock_script"]
    if isinstance(script, str):
        try:
            script = yaml.safe_load(Path(script).read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read llm.mock_script {script}: {exc}") from exc
    try:
        return RunConfig(
            method=MethodId(s["method"]),
            k=s["selection.k"],
            max_tokens=TokenBudget(s["truncation.max_tokens"]),
            dataset_path=s["dataset.path"],
            dataset_name=s["dataset.name"],
            strict=s["dataset.strict"],
            embedder=EmbedderConfig(
                kind=s["embedder.kind"],
                dim=s["embedder.dim"],
                endpoint_url=s["embedder.endpoint_url"],
                model_name=s["embedder.model_name"],
                api_key_env=s["embedder.api_key_env"],
                timeout=s["embedder.timeout"],
                max_batch=s["embedder.max_batch"],
            ),
            llm=LlmConfig(
                kind=s["llm.kind"],
                base_url=s["llm.base_url"],
                model=s["llm.model"],
                api_key_env=s["llm.api_key_env"],
                timeout=s["llm.timeout"],
                max_in_flight=s["llm.max_in_flight"],
                answer_instruction=s["llm.answer_instruction"],
                mock_script=script,
                mock_default=s["llm.mock_default"],
            ),
            cache_dir=s["cache.dir"],
            concurrency=s["concurrency"],
            output_path=s["output.path"],
            pooling=s["selection.pooling"],
            record_timings=s["output.timings"],
        )
    except ConfigError:
        raise
    except (InputError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def format_settings(settings: dict[str, Any]) -> str:
    lines = ["# effective config"]
    for key in sorted(settings):
        value = settings[key]
        if key == "llm.mock_script" and isinstance(value, (list, dict)):
            value = f"<{len(value)} entries>"
        lines.append(f"{key} = {value!r}" if isinstance(value, str) else f"{key} = {value}")
    return "\n".join(lines)
