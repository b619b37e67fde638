"""Application configuration: one TOML or JSON file capturing every knob.

All relative paths inside the file resolve against the file's directory,
so a config travels with its fixtures. Exactly one chat provider and one
embedding provider are active per run; command-line flags override
individual fields.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .gateway import (
    ChatParams,
    EchoOracleChatProvider,
    HashingEmbedder,
    HttpChatProvider,
    HttpEmbedder,
    LlmGateway,
    ScriptedChatProvider,
)
from .lifecycle import LifecycleConfig
from .memory import LogicalClock
from .pipeline import PipelineConfig
from .prompting import PromptKind

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class AppConfig:
    base_dir: Path
    catalog_path: Path
    catalog_format: str = "simplified-json"
    catalog_version: str | None = None
    memory_path: Path = Path("memory.jsonl")
    dataset_path: Path | None = None
    eval_dataset_path: Path | None = None
    chat: dict = field(default_factory=dict)
    embedding: dict = field(default_factory=dict)
    lifecycle: LifecycleConfig = field(default_factory=LifecycleConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    worker_limit: int = 4
    context_budget: int = 48000
    log_path: Path | None = None

    def is_mock_chat(self) -> bool:
        return self.chat.get("provider", "mock") == "mock"

    def to_echo_dict(self) -> dict:
        return {
            "catalog_path": str(self.catalog_path),
            "catalog_format": self.catalog_format,
            "catalog_version": self.catalog_version or "unknown",
            "memory_path": str(self.memory_path),
            "chat_provider": self.chat.get("provider", "mock"),
            "chat_model": self.chat.get("model", "default"),
            "embedding_provider": self.embedding.get("provider", "hashing"),
            "embedding_dim": self.embedding.get("dim", 256),
            "k_state": self.pipeline.k_state,
            "k_action": self.pipeline.k_action,
            "allow_empty": self.pipeline.allow_empty,
            "similar_k": self.lifecycle.similar_k,
            "merge_threshold": self.lifecycle.merge_threshold,
            "min_uses": self.lifecycle.min_uses,
            "utility_threshold": self.lifecycle.utility_threshold,
            "worker_limit": self.worker_limit,
        }


def _read_config_file(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".json":
            return json.loads(path.read_text(encoding="utf-8"))
        with path.open("rb") as handle:
            return tomllib.load(handle)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc


def load_config(path: str | Path) -> AppConfig:
    source = Path(path).resolve()
    raw = _read_config_file(source)
    base_dir = source.parent

    def resolve(value: str | None) -> Path | None:
        if value is None:
            return None
        candidate = Path(value)
        return candidate if candidate.is_absolute() else base_dir / candidate

    catalog_section = raw.get("catalog", {})
    if "path" not in catalog_section:
        raise ConfigError("config is missing catalog.path")
    try:
        lifecycle = LifecycleConfig(**raw.get("lifecycle", {}))
        pipeline = PipelineConfig(**raw.get("pipeline", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid lifecycle/pipeline settings: {exc}") from exc

    chat = dict(raw.get("chat", {"provider": "mock"}))
    embedding = dict(raw.get("embedding", {"provider": "hashing", "dim": 256}))
    if chat.get("provider") not in ("mock", "http"):
        raise ConfigError(f"chat.provider must be 'mock' or 'http', got {chat.get('provider')!r}")
    if embedding.get("provider") not in ("hashing", "http"):
        raise ConfigError(f"embedding.provider must be 'hashing' or 'http', got {embedding.get('provider')!r}")

    return AppConfig(
        base_dir=base_dir,
        catalog_path=resolve(catalog_section["path"]),
        catalog_format=catalog_section.get("format", "simplified-json"),
        catalog_version=catalog_section.get("version"),
        memory_path=resolve(raw.get("memory_path", "memory.jsonl")),
        dataset_path=resolve(raw.get("dataset_path")),
        eval_dataset_path=resolve(raw.get("eval_dataset_path")),
        chat=chat,
        embedding=embedding,
        lifecycle=lifecycle,
        pipeline=pipeline,
        worker_limit=int(raw.get("worker_limit", 4)),
        context_budget=int(raw.get("context_budget", 48000)),
        log_path=resolve(raw.get("log_path")),
    )


def _build_mock_chat(config: AppConfig, mock_script: Path):
    try:
        script = json.loads(Path(mock_script).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read mock script {mock_script}: {exc}") from exc
    mode = script.get("mode", "script")
    if mode == "echo":
        dataset = script.get("dataset")
        if dataset is None:
            raise ConfigError("echo mock script needs a 'dataset' path")
        dataset_path = Path(dataset)
        if not dataset_path.is_absolute():
            dataset_path = Path(mock_script).parent / dataset_path
        if not dataset_path.is_file():
            raise ConfigError(f"echo mock dataset not found: {dataset_path}")
        return EchoOracleChatProvider.from_jsonl(str(dataset_path))
    if mode == "script":
        by_kind = {}
        for kind_name, responses in script.get("by_kind", {}).items():
            try:
                by_kind[PromptKind(kind_name)] = list(responses)
            except ValueError as exc:
                raise ConfigError(f"unknown prompt kind in mock script: {kind_name!r}") from exc
        return ScriptedChatProvider(
            responses=script.get("responses", []),
            by_kind=by_kind,
            by_fingerprint=script.get("by_fingerprint", {}),
            fail_times=int(script.get("fail_times", 0)),
        )
    raise ConfigError(f"unknown mock script mode: {mode!r}")


def build_gateway(config: AppConfig, mock_script_override: str | None = None) -> LlmGateway:
    chat_section = config.chat
    if config.is_mock_chat():
        script = mock_script_override or chat_section.get("mock_script")
        if script is None:
            raise ConfigError("mock chat provider needs chat.mock_script or --mock-script")
        script_path = Path(script)
        if not script_path.is_absolute():
            script_path = config.base_dir / script_path
        chat = _build_mock_chat(config, script_path)
    else:
        for key in ("endpoint", "model"):
            if key not in chat_section:
                raise ConfigError(f"http chat provider needs chat.{key}")
        chat = HttpChatProvider(
            endpoint=chat_section["endpoint"],
            model=chat_section["model"],
            path=chat_section.get("path", "/v1/chat/completions"),
            auth_env=chat_section.get("auth_env", "SKRX_API_KEY"),
        )

    embedding_section = config.embedding
    if embedding_section.get("provider", "hashing") == "hashing":
        embedder = HashingEmbedder(dim=int(embedding_section.get("dim", 256)))
    else:
        for key in ("endpoint", "model", "dim"):
            if key not in embedding_section:
                raise ConfigError(f"http embedding provider needs embedding.{key}")
        embedder = HttpEmbedder(
            endpoint=embedding_section["endpoint"],
            model=embedding_section["model"],
            dim=int(embedding_section["dim"]),
            path=embedding_section.get("path", "/v1/embeddings"),
            auth_env=embedding_section.get("auth_env", "SKRX_API_KEY"),
            timeout=float(embedding_section.get("timeout", 60.0)),
        )

    params = ChatParams(
        model_name=chat_section.get("model", "default"),
        temperature=float(chat_section.get("temperature", 0.0)),
        max_output_tokens=int(chat_section.get("max_output_tokens", 1024)),
        request_timeout=float(chat_section.get("timeout", 60.0)),
        max_retries=int(chat_section.get("max_retries", 2)),
    )
    return LlmGateway(
        chat=chat,
        embedder=embedder,
        params=params,
        context_budget=config.context_budget,
        max_concurrency=config.worker_limit,
    )


def build_clock(config: AppConfig, resume_from: float = 0.0):
    """Logical clock under mock chat so memory files are byte-reproducible."""
    if config.is_mock_chat():
        return LogicalClock(start=resume_from)
    return None
