"""Memory lifecycle: initial generation, append-only optimization, forgetting.

Initialization draws contextually similar sentences from the whole labeled
dataset; updates draw them from the provenance sentences already recorded
in the store. New knowledge merges into an existing entry when the states
embed close enough (merge threshold), otherwise it becomes a new entry.
Established states and manifestations are never rewritten: optimization
only appends.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .catalog import Catalog, is_subtechnique, normalize_id, resolve_parent
from .errors import (
    DatasetError,
    GatewayError,
    GenerationError,
    LifecycleError,
    SkrxError,
    TechniqueIdError,
    UnknownTechniqueError,
)
from .gateway import LlmGateway
from .memory import MemoryEntry, MemoryStore, SourceSentenceRef, UsageStats
from .prompting import (
    GenerateSkrPayload,
    OptimizeActionsPayload,
    PromptKind,
    SimilarSentence,
    TechniqueDefinition,
    render_prompt,
)
from .skr import SkrInstance, instance_violations

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledSentence:
    id: str
    text: str
    labels: frozenset[str]


@dataclass(frozen=True)
class LifecycleConfig:
    similar_k: int = 5
    merge_threshold: float = 0.95
    min_uses: int = 5
    utility_threshold: float = 0.3
    strict_labels: bool = False

    def __post_init__(self) -> None:
        if self.similar_k < 0:
            raise ValueError("similar_k must be >= 0")
        if not 0.0 <= self.merge_threshold <= 1.0:
            raise ValueError("merge_threshold must be within [0, 1]")
        if self.min_uses < 0:
            raise ValueError("min_uses must be >= 0")
        if not 0.0 <= self.utility_threshold <= 1.0:
            raise ValueError("utility_threshold must be within [0, 1]")


@dataclass
class InitReport:
    dataset_id: str
    total_sentences: int = 0
    created_entries: int = 0
    merged_sentences: int = 0
    skipped_sentences: int = 0
    failures: list[dict[str, str]] = field(default_factory=list)
    label_resolutions: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "total_sentences": self.total_sentences,
            "created_entries": self.created_entries,
            "merged_sentences": self.merged_sentences,
            "skipped_sentences": self.skipped_sentences,
            "failures": self.failures,
            "label_resolutions": self.label_resolutions,
            "warnings": self.warnings,
        }


@dataclass
class UpdateReport:
    sentence_id: str
    path: str  # merged | new_entry | already_covered
    entry_id: str
    reason: str
    added_actions: list[str] = field(default_factory=list)
    label_resolutions: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "sentence_id": self.sentence_id,
            "path": self.path,
            "entry_id": self.entry_id,
            "reason": self.reason,
            "added_actions": self.added_actions,
            "label_resolutions": self.label_resolutions,
            "warnings": self.warnings,
        }


@dataclass
class ForgettingReport:
    pruned: list[dict] = field(default_factory=list)
    survivors: int = 0
    min_uses: int = 0
    utility_threshold: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "pruned": self.pruned,
            "survivors": self.survivors,
            "min_uses": self.min_uses,
            "utility_threshold": self.utility_threshold,
        }


# ---------------------------------------------------------------------------
# dataset and checkpoint files


def load_labeled_jsonl(path: str | Path) -> list[LabeledSentence]:
    """Line-delimited JSON: {"id", "text", "labels": [...]}, unique ids."""
    source = Path(path)
    if not source.is_file():
        raise DatasetError(f"dataset file not found: {source}")
    sentences: list[LabeledSentence] = []
    seen_ids: set[str] = set()
    with source.open(encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{source}:{line_number}: invalid JSON: {exc}", line_number) from exc
            try:
                sentence_id = str(record["id"])
                text = str(record["text"])
                raw_labels = record["labels"]
            except (KeyError, TypeError) as exc:
                raise DatasetError(f"{source}:{line_number}: missing field {exc}", line_number) from exc
            if not text.strip():
                raise DatasetError(f"{source}:{line_number}: empty text", line_number)
            if not isinstance(raw_labels, list) or not raw_labels:
                raise DatasetError(f"{source}:{line_number}: labels must be a non-empty list", line_number)
            try:
                labels = frozenset(normalize_id(str(label)) for label in raw_labels)
            except TechniqueIdError as exc:
                raise DatasetError(f"{source}:{line_number}: {exc}", line_number) from exc
            if sentence_id in seen_ids:
                raise DatasetError(f"{source}:{line_number}: duplicate id {sentence_id!r}", line_number)
            seen_ids.add(sentence_id)
            sentences.append(LabeledSentence(id=sentence_id, text=text, labels=labels))
    return sentences


def read_checkpoint(path: str | Path | None) -> set[str]:
    if path is None or not Path(path).is_file():
        return set()
    return {line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()}


def append_checkpoint(path: str | Path | None, sentence_id: str) -> None:
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as handle:
        handle.write(sentence_id + "\n")


# ---------------------------------------------------------------------------
# label handling


def resolve_labels_for_catalog(
    labels: Iterable[str], catalog: Catalog, strict: bool
) -> tuple[frozenset[str], list[str]]:
    """Keep labels the catalog knows; fall back to the parent technique otherwise.

    Strict mode refuses any label absent from the catalog.
    """
    resolved: set[str] = set()
    notes: list[str] = []
    for label in sorted(labels):
        if label in catalog:
            resolved.add(label)
        elif strict:
            raise UnknownTechniqueError(f"label {label} not in catalog (strict mode)")
        elif is_subtechnique(label) and resolve_parent(label) in catalog:
            parent = resolve_parent(label)
            resolved.add(parent)
            notes.append(f"label {label} resolved to parent {parent} (sub-technique not in catalog)")
        else:
            raise UnknownTechniqueError(f"label {label} not in catalog and has no known parent")
    return frozenset(resolved), notes


def _definitions_for(labels: Iterable[str], catalog: Catalog) -> tuple[TechniqueDefinition, ...]:
    definitions = []
    for label in sorted(set(labels)):
        record = catalog.get(label)
        if record is None:
            continue
        definitions.append(TechniqueDefinition(id=record.id, name=record.name, description=record.description))
    return tuple(definitions)


# ---------------------------------------------------------------------------
# generation


def generate_entry(
    target: LabeledSentence,
    similar: Sequence[LabeledSentence],
    catalog: Catalog,
    gateway: LlmGateway,
) -> SkrInstance:
    """One knowledge instance for ``target``, guided by similar labeled sentences.

    The instance must cover every target label. A rejected instance triggers
    exactly one re-ask with the rejection reasons appended, then a typed
    failure naming the sentence for manual triage.
    """
    similar_payload = tuple(
        SimilarSentence(text=sentence.text, labels=tuple(sorted(sentence.labels))) for sentence in similar
    )
    definition_ids = set(target.labels)
    for sentence in similar:
        for label in sentence.labels:
            if label in catalog:
                definition_ids.add(label)
            elif is_subtechnique(label) and resolve_parent(label) in catalog:
                definition_ids.add(resolve_parent(label))
    payload = GenerateSkrPayload(
        target_sentence=target.text,
        target_labels=tuple(sorted(target.labels)),
        definitions=_definitions_for(definition_ids, catalog),
        similar_sentences=similar_payload,
    )
    prompt = render_prompt(PromptKind.GENERATE_SKR, payload, context_budget=gateway.context_budget)

    instance = gateway.request_structured(PromptKind.GENERATE_SKR, prompt)
    instance, problems = _sanitize_generated(instance, target, catalog)
    if not problems:
        return instance

    retry_prompt = (
        prompt
        + "\n\nThe previous answer was rejected: "
        + "; ".join(problems)
        + ". Respond again with a corrected JSON object only."
    )
    instance = gateway.request_structured(PromptKind.GENERATE_SKR, retry_prompt)
    instance, problems = _sanitize_generated(instance, target, catalog)
    if problems:
        raise GenerationError(
            f"generated instance rejected after re-ask for sentence {target.id}: {'; '.join(problems)}",
            sentence_id=target.id,
            reasons=problems,
        )
    return instance


def _sanitize_generated(
    instance: SkrInstance, target: LabeledSentence, catalog: Catalog
) -> tuple[SkrInstance, list[str]]:
    """Drop action keys the catalog does not know, then check invariants and coverage."""
    known = {key: text for key, text in instance.actions.items() if key in catalog}
    dropped = sorted(set(instance.actions) - set(known))
    if dropped:
        logger.warning("dropping action keys not in catalog: %s", ", ".join(dropped))
        instance = SkrInstance(state=instance.state, actions=known, examples=instance.examples)
    problems = instance_violations(instance)
    missing = sorted(target.labels - set(instance.actions))
    if missing:
        problems.append(f"actions do not cover target label(s) {', '.join(missing)}")
    return instance, problems


def _next_entry_id(store: MemoryStore) -> str:
    highest = 0
    for entry in store.entries():
        if entry.id.startswith("m") and entry.id[1:].isdigit():
            highest = max(highest, int(entry.id[1:]))
    return f"m{highest + 1:05d}"


def _sentence_ref(sentence: LabeledSentence, dataset_id: str) -> SourceSentenceRef:
    return SourceSentenceRef(
        dataset_id=dataset_id, sentence_id=sentence.id, text=sentence.text, labels=sentence.labels
    )


def _nearest_state(store: MemoryStore, embedding: np.ndarray) -> tuple[MemoryEntry | None, float]:
    best: MemoryEntry | None = None
    best_score = -2.0
    for entry in store.entries():
        score = float(np.dot(embedding, entry.state_embedding))
        if score > best_score:
            best, best_score = entry, score
    return best, best_score


def _merge_instance_into_entry(
    store: MemoryStore,
    entry: MemoryEntry,
    instance: SkrInstance,
    provenance: Sequence[SourceSentenceRef],
    gateway: LlmGateway,
) -> tuple[list[str], list[str]]:
    """Append the instance's novel actions to ``entry``; existing text always wins."""
    warnings: list[str] = []
    new_actions: dict[str, str] = {}
    existing_texts = set(entry.skr.actions.values())
    for technique_id, text in sorted(instance.actions.items()):
        if technique_id in entry.skr.actions:
            if entry.skr.actions[technique_id] != text:
                warnings.append(
                    f"kept existing manifestation for {technique_id} on entry {entry.id}"
                )
            continue
        if text in existing_texts:
            text = f"{text} (distinctly {technique_id})"
        new_actions[technique_id] = text
        existing_texts.add(text)
    if new_actions:
        embeddings = dict(zip(sorted(new_actions), gateway.embed([new_actions[k] for k in sorted(new_actions)])))
        store.add_actions(entry.id, new_actions, embeddings, provenance)
    else:
        # Provenance still grows: the sentence contributed to this entry.
        store.add_actions(entry.id, {}, {}, provenance)
    return sorted(new_actions), warnings


def initialize_memory(
    dataset: Sequence[LabeledSentence],
    config: LifecycleConfig,
    catalog: Catalog,
    gateway: LlmGateway,
    dataset_id: str = "dataset",
    store: MemoryStore | None = None,
    checkpoint_path: str | Path | None = None,
    clock: Callable[[], float] | None = None,
    persist_path: str | Path | None = None,
) -> tuple[MemoryStore, InitReport]:
    """Build the memory from a labeled dataset, in dataset order.

    Similar sentences come from the whole dataset (excluding the target
    itself). Near-duplicate states (cosine at or above the merge threshold)
    fold into the existing entry instead of creating a duplicate. Failures
    are aggregated per sentence.

    With ``persist_path`` set, the store is persisted before each
    checkpoint append, so the checkpoint never runs ahead of the durable
    store and an interrupted build resumes from the last finished sentence.
    """
    if not dataset:
        raise LifecycleError("dataset is empty")
    if store is None:
        store = MemoryStore(dim=gateway.dim, embedder_fingerprint=gateway.embedder_fingerprint, clock=clock)
    report = InitReport(dataset_id=dataset_id, total_sentences=len(dataset))
    processed = read_checkpoint(checkpoint_path)

    text_embeddings = gateway.embed([sentence.text for sentence in dataset])
    matrix = np.stack(text_embeddings)

    for index, target in enumerate(dataset):
        if target.id in processed:
            report.skipped_sentences += 1
            continue
        try:
            resolved_labels, notes = resolve_labels_for_catalog(target.labels, catalog, config.strict_labels)
            report.label_resolutions.extend(f"{target.id}: {note}" for note in notes)
            resolved_target = LabeledSentence(id=target.id, text=target.text, labels=resolved_labels)

            similar = _similar_from_dataset(dataset, matrix, index, config.similar_k)
            instance = generate_entry(resolved_target, similar, catalog, gateway)
            state_embedding = gateway.embed_one(instance.state)

            provenance = _dedupe_refs(
                [_sentence_ref(resolved_target, dataset_id)]
                + [_sentence_ref(sentence, dataset_id) for sentence in similar]
            )
            nearest, score = (None, -2.0) if len(store) == 0 else _nearest_state(store, state_embedding)
            if nearest is not None and score >= config.merge_threshold:
                added, warnings = _merge_instance_into_entry(store, nearest, instance, provenance, gateway)
                report.warnings.extend(warnings)
                report.merged_sentences += 1
            else:
                action_keys = sorted(instance.actions)
                action_embeddings = dict(
                    zip(action_keys, gateway.embed([instance.actions[key] for key in action_keys]))
                )
                now = store.now()
                store.insert(
                    MemoryEntry(
                        id=_next_entry_id(store),
                        skr=instance,
                        state_embedding=state_embedding,
                        action_embeddings=action_embeddings,
                        provenance=provenance,
                        stats=UsageStats(),
                        created_at=now,
                        updated_at=now,
                    )
                )
                report.created_entries += 1
            if persist_path is not None:
                store.persist(persist_path)
            append_checkpoint(checkpoint_path, target.id)
        except SkrxError as exc:
            logger.error("sentence %s failed: %s", target.id, exc)
            report.failures.append({"sentence_id": target.id, "error": str(exc)})
    return store, report


def _similar_from_dataset(
    dataset: Sequence[LabeledSentence],
    matrix: np.ndarray,
    target_index: int,
    similar_k: int,
) -> list[LabeledSentence]:
    if similar_k == 0 or len(dataset) == 1:
        return []
    scores = matrix @ matrix[target_index]
    ranked = sorted(
        (candidate for candidate in range(len(dataset)) if candidate != target_index),
        key=lambda candidate: (-float(scores[candidate]), dataset[candidate].id),
    )
    return [dataset[candidate] for candidate in ranked[:similar_k]]


def _dedupe_refs(refs: Iterable[SourceSentenceRef]) -> tuple[SourceSentenceRef, ...]:
    seen: set[tuple[str, str]] = set()
    unique: list[SourceSentenceRef] = []
    for ref in refs:
        key = (ref.dataset_id, ref.sentence_id)
        if key not in seen:
            seen.add(key)
            unique.append(ref)
    return tuple(unique)


# ---------------------------------------------------------------------------
# update


def update_memory(
    store: MemoryStore,
    new_sentence: LabeledSentence,
    config: LifecycleConfig,
    catalog: Catalog,
    gateway: LlmGateway,
    dataset_id: str = "update",
) -> UpdateReport:
    """Fold one new labeled sentence into the store.

    Similar sentences come from the provenance already recorded in the
    store. When the nearest stored state is close enough, only the
    uncovered labels gain new appended actions; otherwise a full new entry
    is generated.
    """
    resolved_labels, notes = resolve_labels_for_catalog(new_sentence.labels, catalog, config.strict_labels)
    resolutions = [f"{new_sentence.id}: {note}" for note in notes]
    resolved = LabeledSentence(id=new_sentence.id, text=new_sentence.text, labels=resolved_labels)

    sentence_embedding = gateway.embed_one(resolved.text)
    nearest, score = (None, -2.0) if len(store) == 0 else _nearest_state(store, sentence_embedding)

    if nearest is not None and score >= config.merge_threshold:
        uncovered = sorted(resolved_labels - set(nearest.skr.actions))
        if not uncovered:
            return UpdateReport(
                sentence_id=resolved.id,
                path="already_covered",
                entry_id=nearest.id,
                reason=f"nearest state cosine {score:.4f} >= {config.merge_threshold}; labels already covered",
                label_resolutions=resolutions,
            )
        new_actions, warnings = _generate_new_actions(nearest, uncovered, resolved, catalog, gateway)
        embeddings = dict(zip(sorted(new_actions), gateway.embed([new_actions[k] for k in sorted(new_actions)])))
        store.add_actions(nearest.id, new_actions, embeddings, [_sentence_ref(resolved, dataset_id)])
        return UpdateReport(
            sentence_id=resolved.id,
            path="merged",
            entry_id=nearest.id,
            reason=f"nearest state cosine {score:.4f} >= {config.merge_threshold}",
            added_actions=sorted(new_actions),
            label_resolutions=resolutions,
            warnings=warnings,
        )

    similar = _similar_from_provenance(store, sentence_embedding, config.similar_k, gateway)
    instance = generate_entry(resolved, similar, catalog, gateway)
    state_embedding = gateway.embed_one(instance.state)
    action_keys = sorted(instance.actions)
    action_embeddings = dict(zip(action_keys, gateway.embed([instance.actions[key] for key in action_keys])))
    provenance = _dedupe_refs(
        [_sentence_ref(resolved, dataset_id)] + [_sentence_ref(sentence, dataset_id) for sentence in similar]
    )
    now = store.now()
    entry_id = store.insert(
        MemoryEntry(
            id=_next_entry_id(store),
            skr=instance,
            state_embedding=state_embedding,
            action_embeddings=action_embeddings,
            provenance=provenance,
            stats=UsageStats(),
            created_at=now,
            updated_at=now,
        )
    )
    reason = (
        "store was empty"
        if nearest is None
        else f"nearest state cosine {score:.4f} < {config.merge_threshold}"
    )
    return UpdateReport(
        sentence_id=resolved.id,
        path="new_entry",
        entry_id=entry_id,
        reason=reason,
        added_actions=action_keys,
        label_resolutions=resolutions,
    )


def _generate_new_actions(
    entry: MemoryEntry,
    uncovered: list[str],
    sentence: LabeledSentence,
    catalog: Catalog,
    gateway: LlmGateway,
) -> tuple[dict[str, str], list[str]]:
    payload = OptimizeActionsPayload(
        state=entry.skr.state,
        target_definitions=_definitions_for(uncovered, catalog),
        existing_actions=tuple(sorted(entry.skr.actions.items())),
        evidence_sentences=(sentence.text,),
    )
    prompt = render_prompt(PromptKind.OPTIMIZE_ACTIONS, payload, context_budget=gateway.context_budget)
    proposed = _normalize_action_keys(gateway.request_structured(PromptKind.OPTIMIZE_ACTIONS, prompt))

    missing = [technique_id for technique_id in uncovered if not proposed.get(technique_id)]
    if missing:
        retry = (
            prompt
            + f"\n\nThe previous answer was rejected: it did not cover {', '.join(missing)}."
            + " Respond again with a corrected JSON object only."
        )
        proposed = _normalize_action_keys(gateway.request_structured(PromptKind.OPTIMIZE_ACTIONS, retry))
        missing = [technique_id for technique_id in uncovered if not proposed.get(technique_id)]
        if missing:
            raise GenerationError(
                f"optimization did not cover {', '.join(missing)} for sentence {sentence.id}",
                sentence_id=sentence.id,
                reasons=[f"uncovered: {', '.join(missing)}"],
            )

    warnings: list[str] = []
    extra = sorted(set(proposed) - set(uncovered))
    if extra:
        warnings.append(f"ignored proposed actions outside the uncovered set: {', '.join(extra)}")

    existing_texts = set(entry.skr.actions.values())
    new_actions: dict[str, str] = {}
    for technique_id in uncovered:
        candidates = [text for text in proposed[technique_id] if text.strip()]
        if not candidates:
            raise GenerationError(
                f"empty manifestation proposed for {technique_id}",
                sentence_id=sentence.id,
                reasons=[f"empty manifestation for {technique_id}"],
            )
        if len(set(candidates)) > 1:
            text = resolve_action_conflict(entry.skr.state, technique_id, candidates, gateway, catalog)
            warnings.append(f"reconciled {len(set(candidates))} candidate manifestations for {technique_id}")
        else:
            text = candidates[0]
        if text in existing_texts or text in new_actions.values():
            text = f"{text} (distinctly {technique_id})"
        new_actions[technique_id] = text
        existing_texts.add(text)
    return new_actions, warnings


def _normalize_action_keys(proposed: dict[str, tuple[str, ...]]) -> dict[str, tuple[str, ...]]:
    normalized: dict[str, tuple[str, ...]] = {}
    for key, value in proposed.items():
        try:
            normalized[normalize_id(key)] = value
        except TechniqueIdError:
            logger.warning("dropping proposed action with invalid key %r", key)
    return normalized


def resolve_action_conflict(
    state: str,
    technique: str,
    candidates: Sequence[str],
    gateway: LlmGateway,
    catalog: Catalog | None = None,
) -> str:
    """Pick or synthesize one manifestation from competing candidates.

    Identical candidates short-circuit without a model call. A gateway
    failure falls back to the lexicographically smallest candidate, with an
    audit warning.
    """
    if len(candidates) < 2:
        raise ValueError("conflict resolution needs at least two candidates")
    unique = sorted(set(candidates))
    if len(unique) == 1:
        return unique[0]
    record = catalog.get(technique) if catalog is not None else None
    definition = TechniqueDefinition(
        id=technique,
        name=record.name if record else "unknown technique",
        description=record.description if record else "no definition available",
    )
    payload = OptimizeActionsPayload(
        state=state,
        target_definitions=(definition,),
        existing_actions=(),
        evidence_sentences=(),
        conflict_candidates=((technique, tuple(unique)),),
    )
    prompt = render_prompt(PromptKind.OPTIMIZE_ACTIONS, payload, context_budget=gateway.context_budget)
    try:
        proposed = _normalize_action_keys(gateway.request_structured(PromptKind.OPTIMIZE_ACTIONS, prompt))
        texts = proposed.get(technique, ())
        resolved = texts[0].strip() if texts else ""
        if resolved:
            return resolved
        logger.warning("conflict resolution returned nothing usable for %s; falling back", technique)
    except GatewayError as exc:
        logger.warning("conflict resolution failed for %s (%s); falling back to smallest candidate", technique, exc)
    return unique[0]


# ---------------------------------------------------------------------------
# forgetting


def run_forgetting(store: MemoryStore, config: LifecycleConfig) -> ForgettingReport:
    """Prune low-utility entries; the report lists each pruned id with its stats."""
    from .memory import utility as entry_utility

    candidates = {
        entry.id: {
            "id": entry.id,
            "uses": entry.stats.uses,
            "hits": entry.stats.hits,
            "utility": round(entry_utility(entry.stats), 6),
        }
        for entry in store.entries()
        if entry.stats.uses >= config.min_uses and entry_utility(entry.stats) < config.utility_threshold
    }
    pruned_ids = store.forget_pass(config.min_uses, config.utility_threshold)
    return ForgettingReport(
        pruned=[candidates[entry_id] for entry_id in pruned_ids],
        survivors=len(store),
        min_uses=config.min_uses,
        utility_threshold=config.utility_threshold,
    )


def _similar_from_provenance(
    store: MemoryStore,
    sentence_embedding: np.ndarray,
    similar_k: int,
    gateway: LlmGateway,
) -> list[LabeledSentence]:
    pool: dict[tuple[str, str], SourceSentenceRef] = {}
    for entry in store.entries():
        for ref in entry.provenance:
            pool.setdefault((ref.dataset_id, ref.sentence_id), ref)
    if not pool or similar_k == 0:
        return []
    refs = [pool[key] for key in sorted(pool)]
    embeddings = gateway.embed([ref.text for ref in refs])
    ranked = sorted(
        range(len(refs)),
        key=lambda index: (-float(np.dot(sentence_embedding, embeddings[index])), refs[index].sentence_id),
    )
    return [
        LabeledSentence(id=refs[index].sentence_id, text=refs[index].text, labels=refs[index].labels)
        for index in ranked[:similar_k]
    ]
