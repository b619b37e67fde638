"""Two-stage standard-driven technique extraction over the knowledge memory.

Stage 1 retrieves entries by situational-context similarity, narrows the
candidate set to the techniques those entries cover, and asks the model to
classify within that set. Stage 2 retrieves the per-technique
manifestations for the prior result plus the confusable techniques
co-located in the same entries, and asks the model to confirm or correct
the prior within that set. Stage 2 also standardizes classifications that
originate from external systems.

Only memory-grounded techniques can ever be emitted: model answers outside
the candidate set are dropped into warnings, never accepted. The pipeline
is read-only with respect to the store.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence, Union

from .catalog import Catalog, normalize_id, resolve_parent
from .errors import (
    ExternalIdsError,
    ExtractionError,
    GatewayError,
    NoCoverageError,
    SkrxError,
    TechniqueIdError,
)
from .gateway import LlmGateway, StructuredClassification
from .memory import MemoryEntry, MemoryStore
from .prompting import (
    ManifestationLine,
    PromptKind,
    RetrievedKnowledge,
    Stage1Payload,
    Stage2Payload,
    render_prompt,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    k_state: int = 5
    k_action: int = 5
    allow_empty: bool = True

    def __post_init__(self) -> None:
        if self.k_state < 1 or self.k_action < 1:
            raise ValueError("retrieval depths must be >= 1")


@dataclass(frozen=True)
class Classification:
    technique_ids: frozenset[str]
    rationale: str
    stage: str  # stage1 | stage2 | external
    candidates_considered: frozenset[str]
    retrieved_entry_ids: tuple[str, ...]
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExtractionFailure:
    stage: str
    error_type: str
    message: str
    retrieved_entry_ids: tuple[str, ...] = ()


PipelineResult = Union[Classification, ExtractionFailure]


def _filter_to_candidates(
    raw_ids: Sequence[str], candidates: frozenset[str]
) -> tuple[frozenset[str], list[str]]:
    """Normalize model answers and keep only memory-grounded candidates."""
    accepted: set[str] = set()
    warnings: list[str] = []
    for token in raw_ids:
        try:
            technique_id = normalize_id(token)
        except TechniqueIdError:
            warnings.append(f"dropped invalid technique token from model output: {token!r}")
            continue
        if technique_id not in candidates:
            warnings.append(f"dropped out-of-candidate technique from model output: {technique_id}")
            continue
        accepted.add(technique_id)
    return frozenset(accepted), warnings


class ExtractionPipeline:
    """Shared read-only view over one store snapshot; safe for concurrent use."""

    def __init__(
        self,
        store: MemoryStore,
        gateway: LlmGateway,
        catalog: Catalog,
        config: PipelineConfig | None = None,
    ) -> None:
        self.store = store
        self.gateway = gateway
        self.catalog = catalog
        self.config = config or PipelineConfig()

    def _knowledge_block(self, entry: MemoryEntry, restrict_to: set[str] | None = None) -> RetrievedKnowledge:
        lines = []
        for technique_id in sorted(entry.skr.actions):
            if restrict_to is not None and technique_id not in restrict_to:
                continue
            lines.append(
                ManifestationLine(
                    technique_id=technique_id,
                    name=self.catalog.name_of(technique_id),
                    text=entry.skr.actions[technique_id],
                    examples=entry.skr.examples.get(technique_id, ()),
                )
            )
        return RetrievedKnowledge(state=entry.skr.state, manifestations=tuple(lines))

    def stage1_classify(self, text: str) -> Classification:
        """Initial retrieval and classification against state-similar entries."""
        query = self.gateway.embed_one(text)
        retrieved = self.store.retrieve_by_state(query, self.config.k_state)
        entries = [entry for entry, _score in retrieved]
        trace = tuple(entry.id for entry in entries)
        candidates = frozenset().union(*(frozenset(entry.skr.actions) for entry in entries))
        payload = Stage1Payload(
            input_text=text,
            entries=tuple(self._knowledge_block(entry) for entry in entries),
            candidate_ids=tuple(sorted(candidates)),
        )
        prompt = render_prompt(PromptKind.STAGE1_CLASSIFY, payload)
        try:
            result: StructuredClassification = self.gateway.request_structured(
                PromptKind.STAGE1_CLASSIFY, prompt
            )
        except GatewayError as exc:
            raise ExtractionError(
                f"stage1 model call failed: {exc}", stage="stage1", retrieved_entry_ids=list(trace)
            ) from exc
        technique_ids, warnings = _filter_to_candidates(result.techniques, candidates)
        if not technique_ids and not self.config.allow_empty:
            raise ExtractionError(
                "stage1 produced an empty classification and empty answers are disabled",
                stage="stage1",
                retrieved_entry_ids=list(trace),
            )
        return Classification(
            technique_ids=technique_ids,
            rationale=result.rationale,
            stage="stage1",
            candidates_considered=candidates,
            retrieved_entry_ids=trace,
            warnings=tuple(warnings),
        )

    def stage2_verify(self, text: str, prior: Classification | Iterable[str]) -> Classification:
        """Contrastive refinement of a prior classification.

        The prior may come from stage 1 or from an external system. Its
        retrieval trace and warnings are carried forward, so the returned
        object holds the full audit trail.
        """
        prior_obj = self._as_prior(prior)
        prior_ids = set(prior_obj.technique_ids)
        if not prior_ids:
            return replace(
                prior_obj,
                warnings=prior_obj.warnings + ("stage2 skipped: empty prior, nothing to disambiguate",),
            )
        query = self.gateway.embed_one(text)
        try:
            pairs = self.store.retrieve_by_action(query, prior_ids, self.config.k_action)
        except NoCoverageError:
            return replace(
                prior_obj,
                warnings=prior_obj.warnings + ("stage2 skipped: no memory coverage for prior labels",),
            )
        entries: list[MemoryEntry] = []
        seen: set[str] = set()
        for entry, _technique_id, _score in pairs:
            if entry.id not in seen:
                seen.add(entry.id)
                entries.append(entry)
        stage_trace = tuple(entry.id for entry in entries)
        confusables = frozenset().union(*(frozenset(entry.skr.actions) for entry in entries))
        candidates = frozenset(prior_ids) | confusables
        payload = Stage2Payload(
            input_text=text,
            prior_ids=tuple(sorted(prior_ids)),
            entries=tuple(self._knowledge_block(entry) for entry in entries),
            candidate_ids=tuple(sorted(candidates)),
        )
        prompt = render_prompt(PromptKind.STAGE2_VERIFY, payload)
        try:
            result: StructuredClassification = self.gateway.request_structured(
                PromptKind.STAGE2_VERIFY, prompt
            )
        except GatewayError as exc:
            raise ExtractionError(
                f"stage2 model call failed: {exc}",
                stage="stage2",
                retrieved_entry_ids=list(prior_obj.retrieved_entry_ids + stage_trace),
            ) from exc
        technique_ids, warnings = _filter_to_candidates(result.techniques, candidates)
        return Classification(
            technique_ids=technique_ids,
            rationale=result.rationale,
            stage="stage2",
            candidates_considered=candidates,
            retrieved_entry_ids=prior_obj.retrieved_entry_ids + stage_trace,
            warnings=prior_obj.warnings + tuple(warnings),
        )

    def _as_prior(self, prior: Classification | Iterable[str]) -> Classification:
        if isinstance(prior, Classification):
            return prior
        ids = frozenset(normalize_id(token) for token in prior)
        return Classification(
            technique_ids=ids,
            rationale="external prior",
            stage="external",
            candidates_considered=ids,
            retrieved_entry_ids=(),
        )

    def extract(self, text: str) -> Classification:
        """Full two-stage extraction; the result carries both retrieval traces."""
        return self.stage2_verify(text, self.stage1_classify(text))

    def standardize_external(self, text: str, external_ids: Iterable[str]) -> Classification:
        """Re-evaluate an external system's technique set through stage 2.

        Validation is lenient: ids that fail the grammar or that the catalog
        does not know are moved to warnings and the remainder is processed.
        Sub-techniques unknown to the catalog fall back to their parent.
        """
        valid: set[str] = set()
        warnings: list[str] = []
        invalid: list[str] = []
        for token in external_ids:
            try:
                technique_id = normalize_id(token)
            except TechniqueIdError:
                invalid.append(str(token))
                warnings.append(f"dropped external technique id with invalid grammar: {token!r}")
                continue
            if technique_id in self.catalog:
                valid.add(technique_id)
            elif resolve_parent(technique_id) in self.catalog:
                valid.add(resolve_parent(technique_id))
                warnings.append(
                    f"external id {technique_id} resolved to parent {resolve_parent(technique_id)}"
                )
            else:
                invalid.append(technique_id)
                warnings.append(f"dropped external technique id unknown to the catalog: {technique_id}")
        if not valid:
            raise ExternalIdsError(
                f"all external technique ids invalid: {', '.join(invalid)}", invalid_ids=invalid
            )
        prior = Classification(
            technique_ids=frozenset(valid),
            rationale="external prior",
            stage="external",
            candidates_considered=frozenset(valid),
            retrieved_entry_ids=(),
            warnings=tuple(warnings),
        )
        return self.stage2_verify(text, prior)

    def batch_extract(self, texts: Sequence[str], worker_limit: int = 4) -> list[PipelineResult]:
        """Order-preserving bounded-concurrency batch; per-item failures stay in place."""
        return run_ordered(texts, self.extract, worker_limit)


def run_ordered(
    items: Sequence, fn: Callable, worker_limit: int = 4
) -> list[PipelineResult]:
    if worker_limit < 1:
        raise ValueError("worker_limit must be >= 1")
    results: list[PipelineResult | None] = [None] * len(items)
    if not items:
        return []
    with ThreadPoolExecutor(max_workers=worker_limit) as pool:
        futures = {pool.submit(fn, item): index for index, item in enumerate(items)}
        for future in as_completed(futures):
            index = futures[future]
            try:
                results[index] = future.result()
            except ExtractionError as exc:
                results[index] = ExtractionFailure(
                    stage=exc.stage,
                    error_type=type(exc).__name__,
                    message=str(exc),
                    retrieved_entry_ids=tuple(exc.retrieved_entry_ids),
                )
            except SkrxError as exc:
                results[index] = ExtractionFailure(
                    stage="unknown", error_type=type(exc).__name__, message=str(exc)
                )
            except Exception as exc:  # one bad item never aborts the batch
                logger.exception("unexpected failure for batch item %d", index)
                results[index] = ExtractionFailure(
                    stage="unknown", error_type=type(exc).__name__, message=str(exc)
                )
    return results  # type: ignore[return-value]


def classification_delta(before_ids: Iterable[str], after: Classification) -> dict[str, list[str]]:
    """Added and removed technique ids between an input set and a verified result."""
    before = set(before_ids)
    return {
        "added": sorted(after.technique_ids - before),
        "removed": sorted(before - after.technique_ids),
    }


def result_to_dict(item_id: str, result: PipelineResult) -> dict:
    """JSON-ready form used by batch output files."""
    if isinstance(result, Classification):
        return {
            "id": item_id,
            "status": "ok",
            "stage": result.stage,
            "techniques": sorted(result.technique_ids),
            "rationale": result.rationale,
            "candidates_considered": sorted(result.candidates_considered),
            "retrieved_entry_ids": list(result.retrieved_entry_ids),
            "warnings": list(result.warnings),
        }
    return {
        "id": item_id,
        "status": "error",
        "stage": result.stage,
        "error_type": result.error_type,
        "error": result.message,
        "retrieved_entry_ids": list(result.retrieved_entry_ids),
    }
