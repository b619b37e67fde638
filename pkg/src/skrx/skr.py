"""Dual-layer situational knowledge instances and their serialized form.

An instance pairs a technique-agnostic "state" (the shared attack scenario,
used for retrieval) with an "action" map from technique ID to the concise
manifestation that discriminates that technique within the scenario. The
serialized object keeps the singular key name ``action`` so dumps
interoperate with other producers of the same format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .catalog import TECHNIQUE_ID_TOKEN_RE, Catalog, is_valid_id
from .errors import SkrFormatError


@dataclass(frozen=True)
class SkrInstance:
    """Construction does not validate; parse_skr raises, validate_skr reports."""

    state: str
    actions: dict[str, str]
    examples: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def technique_ids(self) -> set[str]:
        return set(self.actions)


def instance_violations(instance: SkrInstance) -> list[str]:
    violations: list[str] = []
    if not instance.state or not instance.state.strip():
        violations.append("state is empty")
    else:
        embedded = TECHNIQUE_ID_TOKEN_RE.findall(instance.state)
        if embedded:
            violations.append(f"state embeds technique ID token(s): {', '.join(sorted(set(embedded)))}")
    if not instance.actions:
        violations.append("actions map is empty")
    seen_texts: dict[str, str] = {}
    for technique_id, text in instance.actions.items():
        if not is_valid_id(technique_id):
            violations.append(f"invalid action key: {technique_id!r}")
        if not text or not text.strip():
            violations.append(f"empty manifestation for {technique_id}")
        elif text in seen_texts:
            violations.append(
                f"actions {seen_texts[text]} and {technique_id} share identical manifestation text"
            )
        else:
            seen_texts[text] = technique_id
    for technique_id, sentences in instance.examples.items():
        if technique_id not in instance.actions:
            violations.append(f"examples key {technique_id} has no matching action")
        if any(not sentence.strip() for sentence in sentences):
            violations.append(f"empty example sentence under {technique_id}")
    return violations


def parse_skr(raw: str) -> SkrInstance:
    """Parse the serialized object form; keys ``state`` and ``action``."""
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SkrFormatError(f"not valid JSON: {exc}") from exc
    return skr_from_mapping(payload)


def skr_from_mapping(payload: object) -> SkrInstance:
    """Build a validated instance from an already-decoded JSON object."""
    if not isinstance(payload, dict):
        raise SkrFormatError("serialized instance must be a JSON object")
    if "state" not in payload:
        raise SkrFormatError("missing key: state")
    if "action" not in payload:
        raise SkrFormatError("missing key: action")
    state = payload["state"]
    actions = payload["action"]
    if not isinstance(state, str):
        raise SkrFormatError("state must be a string")
    if not isinstance(actions, dict) or not all(
        isinstance(key, str) and isinstance(value, str) for key, value in actions.items()
    ):
        raise SkrFormatError("action must be an object mapping technique IDs to strings")
    examples_raw = payload.get("examples", {})
    if not isinstance(examples_raw, dict):
        raise SkrFormatError("examples must be an object")
    examples: dict[str, tuple[str, ...]] = {}
    for key, value in examples_raw.items():
        if not isinstance(value, list) or not all(isinstance(item, str) for item in value):
            raise SkrFormatError(f"examples[{key!r}] must be a list of strings")
        examples[key] = tuple(value)
    instance = SkrInstance(state=state, actions=dict(actions), examples=examples)
    violations = instance_violations(instance)
    if violations:
        raise SkrFormatError("; ".join(violations))
    return instance


def serialize_skr(instance: SkrInstance) -> str:
    """Deterministic serialization: fixed key order, action keys sorted, two-space indent."""
    document: dict[str, object] = {
        "state": instance.state,
        "action": {key: instance.actions[key] for key in sorted(instance.actions)},
    }
    if instance.examples:
        document["examples"] = {
            key: list(instance.examples[key]) for key in sorted(instance.examples)
        }
    return json.dumps(document, indent=2, ensure_ascii=False)


def skr_to_mapping(instance: SkrInstance) -> dict[str, object]:
    """Plain-dict form matching the serialized key layout (for embedding in files)."""
    return json.loads(serialize_skr(instance))


def validate_skr(instance: SkrInstance, catalog: Catalog | None = None, strict: bool = False) -> list[str]:
    """Return violations instead of raising; empty list means the instance is clean.

    In strict mode every action key must also exist in ``catalog``.
    """
    violations = instance_violations(instance)
    if strict:
        if catalog is None:
            raise ValueError("strict validation requires a catalog")
        for technique_id in sorted(instance.actions):
            if technique_id not in catalog:
                violations.append(f"action key {technique_id} not in catalog")
    return violations
