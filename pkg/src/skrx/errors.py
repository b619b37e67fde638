"""Exception types shared across the package."""

from __future__ import annotations


class SkrxError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SkrxError):
    """Configuration file missing, malformed, or referencing absent paths."""


class TechniqueIdError(SkrxError, ValueError):
    """A raw string does not match the technique ID grammar."""


class UnknownTechniqueError(SkrxError, LookupError):
    """A grammatically valid ID is absent from the loaded catalog."""


class CatalogError(SkrxError):
    pass


class CatalogParseError(CatalogError):
    """Catalog file could not be parsed in the declared format."""


class CatalogIntegrityError(CatalogError):
    """Loaded catalog violates structural invariants."""

    def __init__(self, message: str, offending_ids: list[str] | None = None) -> None:
        super().__init__(message)
        self.offending_ids = offending_ids or []


class SkrFormatError(SkrxError):
    """Raw text is not a valid serialized knowledge instance."""


class StoreError(SkrxError):
    pass


class DuplicateEntryError(StoreError):
    pass


class UnknownEntryError(StoreError):
    pass


class ActionKeyCollisionError(StoreError):
    """Attempt to append an action under a key the entry already carries."""


class InvalidEntryError(StoreError):
    """Entry violates memory invariants (dimension, norm, key sync, stats)."""


class EmptyStoreError(StoreError):
    pass


class NoCoverageError(StoreError):
    """No stored entry carries any of the requested focus techniques."""


class MemoryFileError(StoreError):
    """Memory file is unreadable or has an incompatible version header."""


class GatewayError(SkrxError):
    pass


class TransportError(GatewayError):
    """Remote provider call failed at the transport level."""

    def __init__(self, message: str, transient: bool = False) -> None:
        super().__init__(message)
        self.transient = transient


class ContextOverflowError(GatewayError):
    """Prompt exceeds the provider context budget; nothing was sent."""


class EmbeddingError(GatewayError):
    pass


class StructuredOutputError(GatewayError):
    """Model output could not be parsed into the expected structure.

    Carries the raw response text for audit.
    """

    def __init__(self, message: str, raw: str = "") -> None:
        super().__init__(message)
        self.raw = raw


class PromptPayloadError(GatewayError):
    """Prompt payload is incomplete for the requested template."""


class LifecycleError(SkrxError):
    pass


class GenerationError(LifecycleError):
    """Knowledge generation failed permanently for one sentence."""

    def __init__(self, message: str, sentence_id: str, reasons: list[str] | None = None) -> None:
        super().__init__(message)
        self.sentence_id = sentence_id
        self.reasons = reasons or []


class ExtractionError(SkrxError):
    """A pipeline stage failed; carries the retrieval trace for audit."""

    def __init__(self, message: str, stage: str, retrieved_entry_ids: list[str] | None = None) -> None:
        super().__init__(message)
        self.stage = stage
        self.retrieved_entry_ids = retrieved_entry_ids or []


class ExternalIdsError(ExtractionError):
    """Every supplied external technique ID was invalid."""

    def __init__(self, message: str, invalid_ids: list[str]) -> None:
        super().__init__(message, stage="external")
        self.invalid_ids = invalid_ids


class DatasetError(SkrxError):
    """Labeled dataset file is malformed."""

    def __init__(self, message: str, line_number: int | None = None) -> None:
        super().__init__(message)
        self.line_number = line_number


class UnknownSampleError(SkrxError):
    """Predictions reference a sample id absent from the dataset."""


class LockError(SkrxError):
    """Another process holds the memory store lock."""
