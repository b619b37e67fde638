"""MITRE ATT&CK technique catalog: ID grammar, loading, and parent resolution.

Two input formats are supported. The official STIX 2.1 bundle is consumed by
extracting ``attack-pattern`` objects through their ATT&CK external
references. A simplified JSON array ``[{"id", "name", "description"}, ...]``
covers fixture-driven use without the full bundle. Deprecated or revoked
techniques are loaded and flagged rather than dropped, so datasets labeled
against older releases still validate.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    CatalogIntegrityError,
    CatalogParseError,
    TechniqueIdError,
    UnknownTechniqueError,
)

TECHNIQUE_ID_RE = re.compile(r"^T\d{4}(?:\.\d{3})?$")

# Matches an ID token embedded in free text, e.g. for state-text screening.
TECHNIQUE_ID_TOKEN_RE = re.compile(r"(?<![A-Za-z0-9])T\d{4}(?:\.\d{3})?(?!\d)")

_ATTACK_SOURCE_NAMES = {"mitre-attack", "mitre-mobile-attack", "mitre-ics-attack"}


def normalize_id(raw: str) -> str:
    """Trim and uppercase ``raw``; raise if it does not match the grammar."""
    candidate = raw.strip().upper()
    if not TECHNIQUE_ID_RE.match(candidate):
        raise TechniqueIdError(f"not a technique ID: {raw!r}")
    return candidate


def is_valid_id(raw: str) -> bool:
    try:
        normalize_id(raw)
    except TechniqueIdError:
        return False
    return True


def is_subtechnique(technique_id: str) -> bool:
    return "." in technique_id


def resolve_parent(technique_id: str) -> str:
    """Strip the sub-technique suffix; identity for parent-level IDs.

    Idempotent and total on grammatically valid IDs.
    """
    normalized = normalize_id(technique_id)
    return normalized.split(".", 1)[0]


@dataclass(frozen=True)
class TechniqueRecord:
    """One catalog technique.

    ``parent`` is set exactly when the ID carries a sub-technique suffix and
    always equals the dot-stripped prefix.
    """

    id: str
    name: str
    description: str
    parent: str | None = None
    deprecated: bool = False

    def __post_init__(self) -> None:
        normalized = normalize_id(self.id)
        object.__setattr__(self, "id", normalized)
        expected_parent = resolve_parent(normalized) if is_subtechnique(normalized) else None
        if self.parent != expected_parent:
            object.__setattr__(self, "parent", expected_parent)
        if not self.deprecated and not self.description.strip():
            raise CatalogIntegrityError(
                f"non-deprecated technique {normalized} has an empty description",
                offending_ids=[normalized],
            )


class Catalog:
    """Immutable map of technique ID to record, plus the release label."""

    def __init__(self, records: dict[str, TechniqueRecord], version: str = "unknown") -> None:
        orphans = sorted(
            record.id
            for record in records.values()
            if record.parent is not None and record.parent not in records
        )
        if orphans:
            raise CatalogIntegrityError(
                f"sub-techniques without a parent record: {', '.join(orphans)}",
                offending_ids=orphans,
            )
        self._records = dict(sorted(records.items()))
        self.version = version

    def __contains__(self, technique_id: str) -> bool:
        return technique_id in self._records

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records.values())

    def get(self, technique_id: str) -> TechniqueRecord | None:
        return self._records.get(technique_id)

    def require(self, technique_id: str) -> TechniqueRecord:
        record = self._records.get(technique_id)
        if record is None:
            raise UnknownTechniqueError(f"technique {technique_id} not in catalog")
        return record

    def ids(self) -> list[str]:
        return list(self._records)

    def name_of(self, technique_id: str, default: str = "unknown technique") -> str:
        record = self._records.get(technique_id)
        return record.name if record is not None else default


def validate_id(raw: str, catalog: Catalog | None = None, strict: bool = False) -> str:
    """Normalize ``raw``; in strict mode additionally require catalog membership."""
    normalized = normalize_id(raw)
    if strict:
        if catalog is None:
            raise ValueError("strict validation requires a catalog")
        if normalized not in catalog:
            raise UnknownTechniqueError(f"technique {normalized} not in catalog")
    return normalized


def load_catalog(source: str | Path, format: str = "simplified-json", version: str | None = None) -> Catalog:
    """Load a catalog from ``source`` in the declared format.

    ``format`` is one of ``simplified-json`` or ``stix-bundle``. Integrity
    failures (orphan sub-techniques) report the offending IDs. Loading the
    same file twice yields structurally equal catalogs.
    """
    path = Path(source)
    if not path.is_file():
        raise CatalogParseError(f"catalog file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CatalogParseError(f"cannot parse catalog file {path}: {exc}") from exc

    if format == "simplified-json":
        records = _records_from_simplified(payload)
    elif format == "stix-bundle":
        records, stix_version = _records_from_stix(payload)
        if version is None and stix_version is not None:
            version = stix_version
    else:
        raise CatalogParseError(f"unknown catalog format: {format!r}")

    return Catalog(records, version=version or "unknown")


def _records_from_simplified(payload: object) -> dict[str, TechniqueRecord]:
    if not isinstance(payload, list):
        raise CatalogParseError("simplified catalog must be a top-level JSON array")
    records: dict[str, TechniqueRecord] = {}
    for position, item in enumerate(payload):
        if not isinstance(item, dict):
            raise CatalogParseError(f"catalog entry {position} is not an object")
        try:
            technique_id = normalize_id(str(item["id"]))
            record = TechniqueRecord(
                id=technique_id,
                name=str(item["name"]),
                description=str(item["description"]),
                deprecated=bool(item.get("deprecated", False)),
            )
        except KeyError as exc:
            raise CatalogParseError(f"catalog entry {position} missing key {exc}") from exc
        except TechniqueIdError as exc:
            raise CatalogParseError(f"catalog entry {position}: {exc}") from exc
        if record.id in records:
            raise CatalogParseError(f"duplicate technique ID {record.id}")
        records[record.id] = record
    return records


def _records_from_stix(payload: object) -> tuple[dict[str, TechniqueRecord], str | None]:
    if not isinstance(payload, dict) or "objects" not in payload:
        raise CatalogParseError("STIX bundle must be an object with an 'objects' array")
    records: dict[str, TechniqueRecord] = {}
    release = None
    for obj in payload["objects"]:
        if not isinstance(obj, dict):
            continue
        if obj.get("type") == "x-mitre-collection":
            release = obj.get("x_mitre_version") or release
        if obj.get("type") != "attack-pattern":
            continue
        technique_id = _attack_external_id(obj)
        if technique_id is None:
            continue
        deprecated = bool(obj.get("x_mitre_deprecated") or obj.get("revoked"))
        records[technique_id] = TechniqueRecord(
            id=technique_id,
            name=obj.get("name", ""),
            description=obj.get("description", ""),
            deprecated=deprecated,
        )
    return records, release


def _attack_external_id(obj: dict) -> str | None:
    for ref in obj.get("external_references", []):
        if ref.get("source_name") in _ATTACK_SOURCE_NAMES:
            external_id = ref.get("external_id", "")
            if TECHNIQUE_ID_RE.match(external_id):
                return external_id
    return None
