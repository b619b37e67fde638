"""Prompt templates and deterministic rendering.

Template texts live in versioned files under ``templates/`` so wording can
be swapped without code changes; rendering only assembles payload fields
into fixed-order blocks. Every candidate technique renders as
``ID — name: manifestation``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from importlib import resources
from string import Template

from .catalog import TECHNIQUE_ID_TOKEN_RE
from .errors import PromptPayloadError


class PromptKind(Enum):
    GENERATE_SKR = "generate_skr"
    OPTIMIZE_ACTIONS = "optimize_actions"
    STAGE1_CLASSIFY = "stage1_classify"
    STAGE2_VERIFY = "stage2_verify"


@dataclass(frozen=True)
class TechniqueDefinition:
    id: str
    name: str
    description: str


@dataclass(frozen=True)
class SimilarSentence:
    text: str
    labels: tuple[str, ...]


@dataclass(frozen=True)
class ManifestationLine:
    technique_id: str
    name: str
    text: str
    examples: tuple[str, ...] = ()


@dataclass(frozen=True)
class RetrievedKnowledge:
    state: str
    manifestations: tuple[ManifestationLine, ...]


@dataclass(frozen=True)
class GenerateSkrPayload:
    target_sentence: str
    target_labels: tuple[str, ...]
    definitions: tuple[TechniqueDefinition, ...]
    similar_sentences: tuple[SimilarSentence, ...]


@dataclass(frozen=True)
class Stage1Payload:
    input_text: str
    entries: tuple[RetrievedKnowledge, ...]
    candidate_ids: tuple[str, ...]


@dataclass(frozen=True)
class Stage2Payload:
    input_text: str
    prior_ids: tuple[str, ...]
    entries: tuple[RetrievedKnowledge, ...]
    candidate_ids: tuple[str, ...]


@dataclass(frozen=True)
class OptimizeActionsPayload:
    state: str
    target_definitions: tuple[TechniqueDefinition, ...]
    existing_actions: tuple[tuple[str, str], ...]
    evidence_sentences: tuple[str, ...]
    # technique id -> competing candidate texts, for conflict reconciliation
    conflict_candidates: tuple[tuple[str, tuple[str, ...]], ...] = ()


def _load_template(kind: PromptKind) -> Template:
    text = resources.files(__package__).joinpath(f"templates/{kind.value}.txt").read_text(encoding="utf-8")
    return Template(text)


def _manifestation_line(line: ManifestationLine) -> str:
    rendered = f"{line.technique_id} — {line.name}: {line.text}"
    if line.examples:
        quoted = "; ".join(f'"{example}"' for example in line.examples)
        rendered += f" (e.g. {quoted})"
    return rendered


def _entries_block(entries: tuple[RetrievedKnowledge, ...]) -> str:
    blocks = []
    for index, entry in enumerate(entries, start=1):
        lines = [f"Scenario {index}: {entry.state}"]
        lines.extend(f"  {_manifestation_line(line)}" for line in entry.manifestations)
        blocks.append("\n".join(lines))
    return "\n".join(blocks)


def _definitions_block(definitions: tuple[TechniqueDefinition, ...]) -> str:
    return "\n".join(
        f"{definition.id} — {definition.name}: {definition.description}" for definition in definitions
    )


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise PromptPayloadError(message)


def render_prompt(kind: PromptKind, payload: object, context_budget: int | None = None) -> str:
    """Render the template for ``kind``; deterministic for equal payloads.

    ``context_budget`` is a character budget. When the rendered prompt
    exceeds it, sections are dropped in fixed priority order: similar
    sentences first, then official description text. The target or input
    sentence is never cut. An audit note replaces whatever was dropped.
    """
    if kind is PromptKind.GENERATE_SKR:
        prompt = _render_generate(payload, full_similar=None, short_definitions=False)
        if context_budget is not None and len(prompt) > context_budget:
            for keep in range(len(payload.similar_sentences) - 1, -1, -1):
                prompt = _render_generate(payload, full_similar=keep, short_definitions=False)
                if len(prompt) <= context_budget:
                    break
            if len(prompt) > context_budget:
                prompt = _render_generate(payload, full_similar=0, short_definitions=True)
        return prompt
    if kind is PromptKind.STAGE1_CLASSIFY:
        return _render_stage1(payload)
    if kind is PromptKind.STAGE2_VERIFY:
        return _render_stage2(payload)
    if kind is PromptKind.OPTIMIZE_ACTIONS:
        prompt = _render_optimize(payload, short_definitions=False)
        if context_budget is not None and len(prompt) > context_budget:
            prompt = _render_optimize(payload, short_definitions=True)
        return prompt
    raise PromptPayloadError(f"no template for kind {kind!r}")


def _shorten(description: str, limit: int = 200) -> str:
    if len(description) <= limit:
        return description
    return description[:limit].rstrip() + " [truncated to fit context budget]"


def _render_generate(payload: GenerateSkrPayload, full_similar: int | None, short_definitions: bool) -> str:
    _require(bool(payload.target_sentence.strip()), "generate payload: target sentence is empty")
    _require(bool(payload.target_labels), "generate payload: target labels are empty")
    _require(bool(payload.definitions), "generate payload: definitions are empty")
    similar = payload.similar_sentences
    omitted = 0
    if full_similar is not None and full_similar < len(similar):
        omitted = len(similar) - full_similar
        similar = similar[:full_similar]
    if similar:
        similar_block = "\n".join(
            f"{index}. [{', '.join(sentence.labels)}] {sentence.text}"
            for index, sentence in enumerate(similar, start=1)
        )
    else:
        similar_block = "(none available)"
    if omitted:
        similar_block += f"\n[note: {omitted} similar sentence(s) omitted to fit the context budget]"
    definitions = payload.definitions
    if short_definitions:
        definitions = tuple(
            TechniqueDefinition(d.id, d.name, _shorten(d.description)) for d in definitions
        )
    return _load_template(PromptKind.GENERATE_SKR).substitute(
        target_sentence=payload.target_sentence,
        target_labels=", ".join(payload.target_labels),
        definitions_block=_definitions_block(definitions),
        similar_block=similar_block,
    )


def _render_stage1(payload: Stage1Payload) -> str:
    _require(bool(payload.input_text.strip()), "stage1 payload: input text is empty")
    _require(bool(payload.entries), "stage1 payload: no retrieved entries")
    _require(bool(payload.candidate_ids), "stage1 payload: candidate list is empty")
    return _load_template(PromptKind.STAGE1_CLASSIFY).substitute(
        input_text=payload.input_text,
        entries_block=_entries_block(payload.entries),
        candidate_ids=", ".join(payload.candidate_ids),
    )


def _render_stage2(payload: Stage2Payload) -> str:
    _require(bool(payload.input_text.strip()), "stage2 payload: input text is empty")
    _require(bool(payload.prior_ids), "stage2 payload: prior classification is empty")
    _require(bool(payload.entries), "stage2 payload: no retrieved entries")
    _require(bool(payload.candidate_ids), "stage2 payload: candidate list is empty")
    return _load_template(PromptKind.STAGE2_VERIFY).substitute(
        input_text=payload.input_text,
        prior_ids=", ".join(payload.prior_ids),
        entries_block=_entries_block(payload.entries),
        candidate_ids=", ".join(payload.candidate_ids),
    )


def _render_optimize(payload: OptimizeActionsPayload, short_definitions: bool) -> str:
    _require(bool(payload.state.strip()), "optimize payload: state is empty")
    _require(bool(payload.target_definitions), "optimize payload: no techniques to cover")
    existing_block = "\n".join(
        f"  {technique_id}: {text}" for technique_id, text in payload.existing_actions
    ) or "  (none)"
    definitions = payload.target_definitions
    if short_definitions:
        definitions = tuple(
            TechniqueDefinition(d.id, d.name, _shorten(d.description)) for d in definitions
        )
    evidence_block = "\n".join(payload.evidence_sentences) or "(no new sentence; reconcile the candidates below)"
    if payload.conflict_candidates:
        conflict_lines = ["Candidate descriptions to reconcile:"]
        for technique_id, candidates in payload.conflict_candidates:
            conflict_lines.append(f"  {technique_id}:")
            conflict_lines.extend(f'    - "{candidate}"' for candidate in candidates)
        conflict_block = "\n".join(conflict_lines) + "\n"
    else:
        conflict_block = ""
    return _load_template(PromptKind.OPTIMIZE_ACTIONS).substitute(
        state=payload.state,
        existing_block=existing_block,
        target_ids=", ".join(definition.id for definition in payload.target_definitions),
        definitions_block=_definitions_block(definitions),
        evidence_block=evidence_block,
        conflict_block=conflict_block,
    )


def find_id_tokens(text: str) -> list[str]:
    """All technique ID tokens occurring in ``text``, in order."""
    return TECHNIQUE_ID_TOKEN_RE.findall(text)
