"""Evolvable memory store: embedding-indexed knowledge entries with usage stats.

Retrieval is an exhaustive cosine scan. At the scale this store targets
(thousands of entries) that is exact, fast enough, and trivially
reproducible; an approximate index would be an extension point behind the
same contract. All retrieval is deterministic: ties break on ascending
entry id, then technique id.

The persisted form is line-delimited JSON with a version header, entries
sorted by id. Embeddings are stored in the file rather than recomputed on
load, so a memory built with one embedding provider stays self-consistent;
the header records the provider fingerprint and dimension.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ActionKeyCollisionError,
    DuplicateEntryError,
    EmptyStoreError,
    InvalidEntryError,
    MemoryFileError,
    NoCoverageError,
    UnknownEntryError,
)
from .skr import SkrInstance, skr_from_mapping, skr_to_mapping

MEMORY_FORMAT = "skr-memory"
MEMORY_VERSION = 1

NORM_TOLERANCE = 1e-6


class LogicalClock:
    """Deterministic stand-in for time.time; each call advances by one."""

    def __init__(self, start: float = 0.0) -> None:
        self._next = float(start)

    def __call__(self) -> float:
        value = self._next
        self._next += 1.0
        return value


@dataclass(frozen=True)
class UsageStats:
    uses: int = 0
    hits: int = 0


@dataclass(frozen=True)
class SourceSentenceRef:
    dataset_id: str
    sentence_id: str
    text: str
    labels: frozenset[str]


@dataclass(frozen=True)
class MemoryEntry:
    id: str
    skr: SkrInstance
    state_embedding: np.ndarray
    action_embeddings: dict[str, np.ndarray]
    provenance: tuple[SourceSentenceRef, ...]
    stats: UsageStats = field(default_factory=UsageStats)
    created_at: float = 0.0
    updated_at: float = 0.0


def _as_unit_vector(values: Sequence[float] | np.ndarray, dim: int, what: str) -> np.ndarray:
    vector = np.asarray(values, dtype=np.float64)
    if vector.shape != (dim,):
        raise InvalidEntryError(f"{what} has shape {vector.shape}, expected ({dim},)")
    norm = float(np.linalg.norm(vector))
    if abs(norm - 1.0) > NORM_TOLERANCE:
        raise InvalidEntryError(f"{what} is not unit-norm (|v| = {norm:.8f})")
    vector = vector.copy()
    vector.setflags(write=False)
    return vector


def _cosine(query: np.ndarray, candidate: np.ndarray) -> float:
    # Both sides are unit vectors; cosine reduces to the dot product.
    return float(np.dot(query, candidate))


class MemoryStore:
    """Single-writer, many-reader store of immutable entry snapshots.

    Retrieval never mutates; lifecycle operations (insert, add_actions,
    record_outcome, forget_pass) assume exclusive access, which the CLI
    enforces with an advisory file lock across processes.
    """

    def __init__(
        self,
        dim: int,
        embedder_fingerprint: str,
        clock: Callable[[], float] | None = None,
    ) -> None:
        self.dim = dim
        self.embedder_fingerprint = embedder_fingerprint
        self._clock = clock if clock is not None else time.time
        self._entries: dict[str, MemoryEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self._entries

    def entries(self) -> list[MemoryEntry]:
        """Entries in id order."""
        return [self._entries[entry_id] for entry_id in sorted(self._entries)]

    def get(self, entry_id: str) -> MemoryEntry:
        entry = self._entries.get(entry_id)
        if entry is None:
            raise UnknownEntryError(f"no entry with id {entry_id!r}")
        return entry

    def max_timestamp(self) -> float:
        if not self._entries:
            return 0.0
        return max(max(e.created_at, e.updated_at) for e in self._entries.values())

    def now(self) -> float:
        return self._clock()

    def set_clock(self, clock: Callable[[], float]) -> None:
        self._clock = clock

    # -- lifecycle operations (exclusive access) --

    def insert(self, entry: MemoryEntry) -> str:
        if entry.id in self._entries:
            raise DuplicateEntryError(f"entry id {entry.id!r} already present")
        self._entries[entry.id] = self._checked(entry)
        return entry.id

    def _checked(self, entry: MemoryEntry) -> MemoryEntry:
        if not entry.id:
            raise InvalidEntryError("entry id is empty")
        if not entry.provenance:
            raise InvalidEntryError(f"entry {entry.id}: provenance is empty")
        for ref in entry.provenance:
            if not ref.text or not ref.labels:
                raise InvalidEntryError(f"entry {entry.id}: provenance ref {ref.sentence_id} incomplete")
        if entry.stats.uses < 0 or not (0 <= entry.stats.hits <= entry.stats.uses):
            raise InvalidEntryError(f"entry {entry.id}: stats out of range {entry.stats}")
        if set(entry.action_embeddings) != set(entry.skr.actions):
            raise InvalidEntryError(f"entry {entry.id}: action embeddings out of sync with actions")
        state_embedding = _as_unit_vector(entry.state_embedding, self.dim, f"entry {entry.id} state embedding")
        action_embeddings = {
            technique_id: _as_unit_vector(vec, self.dim, f"entry {entry.id} action {technique_id} embedding")
            for technique_id, vec in entry.action_embeddings.items()
        }
        return replace(entry, state_embedding=state_embedding, action_embeddings=action_embeddings)

    def add_actions(
        self,
        entry_id: str,
        new_actions: dict[str, str],
        new_embeddings: dict[str, np.ndarray],
        new_provenance: Iterable[SourceSentenceRef] = (),
    ) -> MemoryEntry:
        """Append-only extension: existing state and actions stay byte-identical."""
        entry = self.get(entry_id)
        collisions = sorted(set(new_actions) & set(entry.skr.actions))
        if collisions:
            raise ActionKeyCollisionError(
                f"entry {entry_id} already carries action(s) {', '.join(collisions)};"
                " conflicting manifestations must go through conflict resolution"
            )
        if set(new_actions) != set(new_embeddings):
            raise InvalidEntryError("new action texts and embeddings must carry the same keys")
        merged_actions = dict(entry.skr.actions)
        merged_actions.update(new_actions)
        duplicate_texts = [
            text for text in new_actions.values() if list(merged_actions.values()).count(text) > 1
        ]
        if duplicate_texts:
            raise InvalidEntryError(
                f"entry {entry_id}: appended manifestation duplicates existing text: {duplicate_texts[0]!r}"
            )
        merged_embeddings = dict(entry.action_embeddings)
        for technique_id, vec in new_embeddings.items():
            merged_embeddings[technique_id] = _as_unit_vector(
                vec, self.dim, f"entry {entry_id} action {technique_id} embedding"
            )
        seen = {(ref.dataset_id, ref.sentence_id) for ref in entry.provenance}
        merged_provenance = list(entry.provenance)
        for ref in new_provenance:
            key = (ref.dataset_id, ref.sentence_id)
            if key not in seen:
                merged_provenance.append(ref)
                seen.add(key)
        updated = replace(
            entry,
            skr=SkrInstance(state=entry.skr.state, actions=merged_actions, examples=entry.skr.examples),
            action_embeddings=merged_embeddings,
            provenance=tuple(merged_provenance),
            updated_at=self._clock(),
        )
        self._entries[entry_id] = updated
        return updated

    def record_outcome(self, entry_ids: Iterable[str], correct: bool) -> None:
        ids = list(entry_ids)
        missing = [entry_id for entry_id in ids if entry_id not in self._entries]
        if missing:
            raise UnknownEntryError(f"no entry with id(s) {', '.join(sorted(missing))}")
        for entry_id in ids:
            entry = self._entries[entry_id]
            stats = UsageStats(uses=entry.stats.uses + 1, hits=entry.stats.hits + (1 if correct else 0))
            self._entries[entry_id] = replace(entry, stats=stats)

    def forget_pass(self, min_uses: int, utility_threshold: float) -> list[str]:
        """Prune entries with enough evidence and smoothed utility below threshold.

        Utility is Laplace-smoothed, (hits + 1) / (uses + 2), so entries are
        never pruned on a handful of outcomes.
        """
        pruned = sorted(
            entry_id
            for entry_id, entry in self._entries.items()
            if entry.stats.uses >= min_uses and utility(entry.stats) < utility_threshold
        )
        for entry_id in pruned:
            del self._entries[entry_id]
        return pruned

    # -- retrieval (read-only) --

    def retrieve_by_state(self, query_embedding: np.ndarray, k: int) -> list[tuple[MemoryEntry, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self._entries:
            raise EmptyStoreError("cannot retrieve from an empty store")
        query = _as_unit_vector(query_embedding, self.dim, "query embedding")
        scored = [
            (entry, _cosine(query, entry.state_embedding)) for entry in self._entries.values()
        ]
        scored.sort(key=lambda pair: (-pair[1], pair[0].id))
        return scored[:k]

    def retrieve_by_action(
        self,
        query_embedding: np.ndarray,
        focus_ids: Iterable[str],
        k: int,
    ) -> list[tuple[MemoryEntry, str, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        focus = set(focus_ids)
        if not focus:
            raise ValueError("focus_ids must be non-empty")
        query = _as_unit_vector(query_embedding, self.dim, "query embedding")
        scored = [
            (entry, technique_id, _cosine(query, embedding))
            for entry in self._entries.values()
            for technique_id, embedding in entry.action_embeddings.items()
            if technique_id in focus
        ]
        if not scored:
            raise NoCoverageError(
                f"no stored entry carries any of: {', '.join(sorted(focus))}"
            )
        scored.sort(key=lambda triple: (-triple[2], triple[0].id, triple[1]))
        return scored[:k]

    # -- persistence --

    def persist(self, path: str | Path) -> None:
        """Write the store atomically; output is deterministic for equal stores."""
        target = Path(path)
        header = {
            "format": MEMORY_FORMAT,
            "version": MEMORY_VERSION,
            "dim": self.dim,
            "embedder": self.embedder_fingerprint,
        }
        lines = [json.dumps(header, ensure_ascii=False)]
        for entry in self.entries():
            lines.append(json.dumps(_entry_to_mapping(entry), ensure_ascii=False))
        payload = "\n".join(lines) + "\n"
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_text(payload, encoding="utf-8")
        os.replace(tmp, target)

    @classmethod
    def load(cls, path: str | Path, clock: Callable[[], float] | None = None) -> "MemoryStore":
        source = Path(path)
        try:
            raw_lines = source.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise MemoryFileError(f"cannot read memory file {source}: {exc}") from exc
        if not raw_lines:
            raise MemoryFileError(f"memory file {source} is empty")
        try:
            header = json.loads(raw_lines[0])
        except json.JSONDecodeError as exc:
            raise MemoryFileError(f"memory file {source} has no valid header line") from exc
        if not isinstance(header, dict) or header.get("format") != MEMORY_FORMAT:
            raise MemoryFileError(f"memory file {source} is not in {MEMORY_FORMAT} format")
        if header.get("version") != MEMORY_VERSION:
            raise MemoryFileError(
                f"memory file {source} has version {header.get('version')!r}, expected {MEMORY_VERSION}"
            )
        store = cls(dim=int(header["dim"]), embedder_fingerprint=str(header["embedder"]), clock=clock)
        for line_number, line in enumerate(raw_lines[1:], start=2):
            if not line.strip():
                continue
            try:
                mapping = json.loads(line)
                entry = _entry_from_mapping(mapping)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MemoryFileError(f"{source}:{line_number}: malformed entry: {exc}") from exc
            store.insert(entry)
        return store


def utility(stats: UsageStats) -> float:
    return (stats.hits + 1) / (stats.uses + 2)


def _entry_to_mapping(entry: MemoryEntry) -> dict[str, object]:
    return {
        "id": entry.id,
        "created_at": entry.created_at,
        "updated_at": entry.updated_at,
        "skr": skr_to_mapping(entry.skr),
        "state_embedding": [float(v) for v in entry.state_embedding],
        "action_embeddings": {
            technique_id: [float(v) for v in entry.action_embeddings[technique_id]]
            for technique_id in sorted(entry.action_embeddings)
        },
        "provenance": [
            {
                "dataset_id": ref.dataset_id,
                "sentence_id": ref.sentence_id,
                "text": ref.text,
                "labels": sorted(ref.labels),
            }
            for ref in entry.provenance
        ],
        "stats": {"uses": entry.stats.uses, "hits": entry.stats.hits},
    }


def _entry_from_mapping(mapping: dict) -> MemoryEntry:
    return MemoryEntry(
        id=str(mapping["id"]),
        skr=skr_from_mapping(mapping["skr"]),
        state_embedding=np.asarray(mapping["state_embedding"], dtype=np.float64),
        action_embeddings={
            technique_id: np.asarray(values, dtype=np.float64)
            for technique_id, values in mapping["action_embeddings"].items()
        },
        provenance=tuple(
            SourceSentenceRef(
                dataset_id=str(ref["dataset_id"]),
                sentence_id=str(ref["sentence_id"]),
                text=str(ref["text"]),
                labels=frozenset(ref["labels"]),
            )
            for ref in mapping["provenance"]
        ),
        stats=UsageStats(uses=int(mapping["stats"]["uses"]), hits=int(mapping["stats"]["hits"])),
        created_at=float(mapping["created_at"]),
        updated_at=float(mapping["updated_at"]),
    )
