"""Model access: chat completion and text embedding behind provider contracts.

Remote providers speak the common HTTP chat-completions and embeddings
shapes. The offline providers (feature-hashing embedder, scripted chat,
echo oracle) are deterministic, so the whole pipeline is reproducible in
tests without a network. Under any mock backend, equal inputs give equal
outputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import requests

from .errors import (
    ContextOverflowError,
    EmbeddingError,
    SkrFormatError,
    StructuredOutputError,
    TransportError,
)
from .prompting import PromptKind
from .skr import skr_from_mapping

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChatParams:
    model_name: str = "default"
    temperature: float = 0.0
    max_output_tokens: int = 1024
    request_timeout: float = 60.0
    max_retries: int = 2

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass(frozen=True)
class StructuredClassification:
    techniques: tuple[str, ...]
    rationale: str


# ---------------------------------------------------------------------------
# chat providers


class HttpChatProvider:
    """Chat-completions client: POST {model, messages, temperature, max_tokens}."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        path: str = "/v1/chat/completions",
        auth_env: str = "SKRX_API_KEY",
        session: requests.Session | None = None,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.path = path if path.startswith("/") else "/" + path
        self.auth_env = auth_env
        self._session = session or requests.Session()

    def send(self, kind: PromptKind, prompt: str, params: ChatParams) -> str:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.auth_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        body = {
            "model": self.model or params.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        }
        try:
            response = self._session.post(
                self.endpoint + self.path, json=body, headers=headers, timeout=params.request_timeout
            )
        except requests.RequestException as exc:
            raise TransportError(f"chat request failed: {exc}", transient=True) from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise TransportError(f"chat endpoint returned {response.status_code}", transient=True)
        if response.status_code >= 400:
            raise TransportError(f"chat endpoint returned {response.status_code}: {response.text[:500]}")
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed chat response: {exc}") from exc


class ScriptedChatProvider:
    """Mock chat backend replaying canned responses.

    Lookup order: exact request fingerprint, then the per-kind queue, then
    the global queue. Fingerprint-mapped responses are reusable and make
    the mock a pure function of the request; queued responses are consumed
    FIFO. ``fail_times`` injects transient transport failures before the
    first successful call, for retry tests. Thread-safe; every request is
    recorded for assertions.
    """

    def __init__(
        self,
        responses: Sequence[str] | None = None,
        by_kind: Mapping[PromptKind, Sequence[str]] | None = None,
        by_fingerprint: Mapping[str, str] | None = None,
        fail_times: int = 0,
    ) -> None:
        self._responses = list(responses or [])
        self._by_kind = {kind: list(queue) for kind, queue in (by_kind or {}).items()}
        self._by_fingerprint = dict(by_fingerprint or {})
        self._fail_remaining = fail_times
        self._lock = threading.Lock()
        self.requests: list[tuple[PromptKind, str]] = []

    @staticmethod
    def fingerprint(kind: PromptKind, prompt: str) -> str:
        digest = hashlib.sha256(f"{kind.value}\n{prompt}".encode("utf-8")).hexdigest()
        return digest[:16]

    def send(self, kind: PromptKind, prompt: str, params: ChatParams) -> str:
        with self._lock:
            self.requests.append((kind, prompt))
            if self._fail_remaining > 0:
                self._fail_remaining -= 1
                raise TransportError("scripted transport failure", transient=True)
            scripted = self._by_fingerprint.get(self.fingerprint(kind, prompt))
            if scripted is not None:
                return scripted
            queue = self._by_kind.get(kind)
            if queue:
                return queue.pop(0)
            if self._responses:
                return self._responses.pop(0)
        raise TransportError(f"mock script exhausted for kind {kind.value}")


_TARGET_SENTENCE_RE = re.compile(r"Target sentence:\n(.+?)(?:\n\n|\Z)", re.DOTALL)
_INPUT_SENTENCE_RE = re.compile(r"Input sentence:\n(.+?)(?:\n\n|\Z)", re.DOTALL)
_COVER_LINE_RE = re.compile(r"Techniques to cover: (.+)")
_EVIDENCE_RE = re.compile(r"New evidence:\n(.+?)(?:\n\n|\Z)", re.DOTALL)


class EchoOracleChatProvider:
    """Mock backend that answers with the gold labels of fixture sentences.

    It reads the same prompt the model would: the delimited target or input
    sentence is looked up in the labeled fixture, and the response echoes
    that sentence's gold labels (or deterministic knowledge built from
    them). A pure function of the prompt, hence safe under concurrency.
    """

    def __init__(self, labels_by_text: Mapping[str, Sequence[str]]) -> None:
        self._labels_by_text = {text: tuple(sorted(labels)) for text, labels in labels_by_text.items()}

    @classmethod
    def from_jsonl(cls, path: str) -> "EchoOracleChatProvider":
        labels_by_text: dict[str, tuple[str, ...]] = {}
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                record = json.loads(line)
                labels_by_text[record["text"]] = tuple(record["labels"])
        return cls(labels_by_text)

    def _lookup(self, sentence: str) -> tuple[str, ...]:
        labels = self._labels_by_text.get(sentence)
        if labels is not None:
            return labels
        # Fall back to containment for prompts that wrap the sentence.
        matches = [text for text in self._labels_by_text if text in sentence]
        if matches:
            longest = max(matches, key=len)
            return self._labels_by_text[longest]
        raise TransportError(f"echo oracle: sentence not in fixture: {sentence[:120]!r}")

    def send(self, kind: PromptKind, prompt: str, params: ChatParams) -> str:
        if kind is PromptKind.GENERATE_SKR:
            match = _TARGET_SENTENCE_RE.search(prompt)
            if match is None:
                raise TransportError("echo oracle: no target sentence block in prompt")
            sentence = match.group(1).strip()
            labels = self._lookup(sentence)
            actions = {label: f"Evidence of {label}: {sentence}" for label in labels}
            return json.dumps({"state": sentence, "action": actions})
        if kind in (PromptKind.STAGE1_CLASSIFY, PromptKind.STAGE2_VERIFY):
            match = _INPUT_SENTENCE_RE.search(prompt)
            if match is None:
                raise TransportError("echo oracle: no input sentence block in prompt")
            labels = self._lookup(match.group(1).strip())
            return json.dumps({"techniques": list(labels), "rationale": "echo oracle"})
        if kind is PromptKind.OPTIMIZE_ACTIONS:
            cover = _COVER_LINE_RE.search(prompt)
            if cover is None:
                raise TransportError("echo oracle: no cover line in prompt")
            targets = [token.strip() for token in cover.group(1).split(",") if token.strip()]
            evidence_match = _EVIDENCE_RE.search(prompt)
            evidence = evidence_match.group(1).strip() if evidence_match else ""
            actions = {target: f"Updated evidence of {target}: {evidence}" for target in targets}
            return json.dumps({"action": actions})
        raise TransportError(f"echo oracle: unsupported prompt kind {kind.value}")


# ---------------------------------------------------------------------------
# embedding providers


class HashingEmbedder:
    """Deterministic feature-hashing embedder for offline runs and CI.

    Token uni- and bi-grams are hashed into ``dim`` signed buckets and the
    result is L2-normalized. No model, no network, stable across platforms.
    """

    def __init__(self, dim: int = 256) -> None:
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim

    @property
    def fingerprint(self) -> str:
        return f"feature-hash-v1:d{self.dim}"

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self._embed_one(text) for text in texts]

    def _embed_one(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EmbeddingError("cannot embed empty text")
        tokens = re.findall(r"[a-z0-9]+", text.lower())
        if not tokens:
            raise EmbeddingError(f"no tokens to embed in {text!r}")
        features = tokens + [f"{first} {second}" for first, second in zip(tokens, tokens[1:])]
        vector = np.zeros(self.dim, dtype=np.float64)
        for feature in features:
            digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
            value = int.from_bytes(digest, "big")
            sign = 1.0 if value & 1 else -1.0
            vector[(value >> 1) % self.dim] += sign
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise EmbeddingError(f"feature signs cancelled for {text!r}")
        return vector / norm


class HttpEmbedder:
    """Embeddings client: POST {model, input}; response vectors in input order."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        dim: int,
        path: str = "/v1/embeddings",
        auth_env: str = "SKRX_API_KEY",
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.dim = dim
        self.path = path if path.startswith("/") else "/" + path
        self.auth_env = auth_env
        self.timeout = timeout
        self._session = session or requests.Session()

    @property
    def fingerprint(self) -> str:
        return f"http:{self.model}:d{self.dim}"

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.auth_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            response = self._session.post(
                self.endpoint + self.path,
                json={"model": self.model, "input": list(texts)},
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"embedding request failed: {exc}", transient=True) from exc
        if response.status_code >= 400:
            raise TransportError(f"embedding endpoint returned {response.status_code}")
        try:
            rows = response.json()["data"]
            vectors = [np.asarray(row["embedding"], dtype=np.float64) for row in rows]
        except (ValueError, KeyError, TypeError) as exc:
            raise TransportError(f"malformed embedding response: {exc}") from exc
        if len(vectors) != len(texts):
            raise TransportError(f"embedding count mismatch: {len(vectors)} != {len(texts)}")
        return vectors


# ---------------------------------------------------------------------------
# structured output parsing


def _first_json_object(raw: str) -> dict | None:
    """First balanced, parseable JSON object in ``raw``; tolerates fences and prose."""
    depth = 0
    start = None
    in_string = False
    escaped = False
    for index, char in enumerate(raw):
        if in_string:
            if escaped:
                escaped = False
            elif char == "\\":
                escaped = True
            elif char == '"':
                in_string = False
            continue
        if char == '"':
            in_string = True
        elif char == "{":
            if depth == 0:
                start = index
            depth += 1
        elif char == "}":
            if depth > 0:
                depth -= 1
                if depth == 0 and start is not None:
                    candidate = raw[start : index + 1]
                    try:
                        parsed = json.loads(candidate)
                    except json.JSONDecodeError:
                        start = None
                        continue
                    if isinstance(parsed, dict):
                        return parsed
                    start = None
    return None


def parse_structured(kind: PromptKind, raw: str):
    """Parse model output for ``kind``; failures carry the raw text for audit.

    Returns an SkrInstance for generation, a map of technique id to
    candidate manifestation texts for optimization, and a
    StructuredClassification for the two extraction stages.
    """
    payload = _first_json_object(raw)
    if payload is None:
        raise StructuredOutputError("no JSON object found in model output", raw=raw)
    if kind is PromptKind.GENERATE_SKR:
        try:
            return skr_from_mapping(payload)
        except SkrFormatError as exc:
            raise StructuredOutputError(f"invalid knowledge instance: {exc}", raw=raw) from exc
    if kind is PromptKind.OPTIMIZE_ACTIONS:
        actions = payload.get("action")
        if not isinstance(actions, dict) or not actions:
            raise StructuredOutputError("expected a non-empty 'action' object", raw=raw)
        normalized: dict[str, tuple[str, ...]] = {}
        for key, value in actions.items():
            if isinstance(value, str):
                normalized[str(key)] = (value,)
            elif isinstance(value, list) and value and all(isinstance(item, str) for item in value):
                normalized[str(key)] = tuple(value)
            else:
                raise StructuredOutputError(f"action[{key!r}] must be a string or list of strings", raw=raw)
        return normalized
    if kind in (PromptKind.STAGE1_CLASSIFY, PromptKind.STAGE2_VERIFY):
        techniques = payload.get("techniques")
        if not isinstance(techniques, list) or not all(isinstance(item, str) for item in techniques):
            raise StructuredOutputError("expected 'techniques' as a list of strings", raw=raw)
        rationale = payload.get("rationale", "")
        if not isinstance(rationale, str):
            rationale = str(rationale)
        return StructuredClassification(techniques=tuple(techniques), rationale=rationale)
    raise StructuredOutputError(f"no schema for kind {kind!r}", raw=raw)


# ---------------------------------------------------------------------------
# gateway


class LlmGateway:
    """Front door for all model traffic: budget check, retries, concurrency cap.

    ``complete`` retries transient transport failures with exponential
    backoff; parse failures are never retried here. ``request_structured``
    adds the one-re-ask policy: a parse failure triggers a single re-ask
    with a JSON-only reminder, then surfaces a typed error.
    """

    def __init__(
        self,
        chat,
        embedder,
        params: ChatParams | None = None,
        context_budget: int = 48000,
        max_concurrency: int = 4,
        sleep: Callable[[float], None] = time.sleep,
        backoff_base: float = 0.5,
    ) -> None:
        self.chat = chat
        self.embedder = embedder
        self.params = params or ChatParams()
        self.context_budget = context_budget
        self._semaphore = threading.BoundedSemaphore(max_concurrency)
        self._sleep = sleep
        self._backoff_base = backoff_base

    @property
    def dim(self) -> int:
        return self.embedder.dim

    @property
    def embedder_fingerprint(self) -> str:
        return self.embedder.fingerprint

    def complete(self, kind: PromptKind, rendered_prompt: str, params: ChatParams | None = None) -> str:
        if not rendered_prompt:
            raise ValueError("prompt is empty")
        if len(rendered_prompt) > self.context_budget:
            raise ContextOverflowError(
                f"prompt of {len(rendered_prompt)} characters exceeds budget {self.context_budget}"
            )
        effective = params or self.params
        attempt = 0
        while True:
            try:
                with self._semaphore:
                    return self.chat.send(kind, rendered_prompt, effective)
            except TransportError as exc:
                if not exc.transient or attempt >= effective.max_retries:
                    raise
                delay = self._backoff_base * (2**attempt)
                logger.warning("transient chat failure (attempt %d): %s; retrying in %.1fs", attempt + 1, exc, delay)
                self._sleep(delay)
                attempt += 1

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        texts = list(texts)
        for text in texts:
            if not text or not text.strip():
                raise EmbeddingError("cannot embed empty text")
        if not texts:
            return []
        with self._semaphore:
            vectors = self.embedder.embed(texts)
        normalized = []
        for text, vector in zip(texts, vectors):
            if vector.shape != (self.dim,):
                raise EmbeddingError(f"embedding for {text[:60]!r} has shape {vector.shape}, expected ({self.dim},)")
            norm = float(np.linalg.norm(vector))
            if norm == 0.0:
                raise EmbeddingError(f"zero embedding for {text[:60]!r}")
            normalized.append(vector / norm)
        return normalized

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed([text])[0]

    def request_structured(self, kind: PromptKind, rendered_prompt: str, params: ChatParams | None = None):
        try:
            raw = self.complete(kind, rendered_prompt, params)
            return parse_structured(kind, raw)
        except StructuredOutputError as first_error:
            logger.warning("unparseable %s response; re-asking once (raw: %.120s)", kind.value, first_error.raw)
            reminder = (
                rendered_prompt
                + "\n\nYour previous response could not be parsed. Respond with a single valid JSON object only."
            )
            raw = self.complete(kind, reminder, params)
            return parse_structured(kind, raw)
