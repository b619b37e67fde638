"""Standard-driven ATT&CK technique extraction with an evolvable knowledge memory."""

from .catalog import Catalog, TechniqueRecord, load_catalog, normalize_id, resolve_parent, validate_id
from .evaluation import EvalReport, EvalSample, load_dataset, score
from .gateway import ChatParams, LlmGateway
from .lifecycle import LabeledSentence, LifecycleConfig, initialize_memory, update_memory
from .memory import MemoryEntry, MemoryStore, SourceSentenceRef, UsageStats
from .pipeline import Classification, ExtractionPipeline, PipelineConfig
from .skr import SkrInstance, parse_skr, serialize_skr, validate_skr

__version__ = "0.1.0"

__all__ = [
    "Catalog",
    "ChatParams",
    "Classification",
    "EvalReport",
    "EvalSample",
    "ExtractionPipeline",
    "LabeledSentence",
    "LifecycleConfig",
    "LlmGateway",
    "MemoryEntry",
    "MemoryStore",
    "PipelineConfig",
    "SkrInstance",
    "SourceSentenceRef",
    "TechniqueRecord",
    "UsageStats",
    "initialize_memory",
    "load_catalog",
    "load_dataset",
    "normalize_id",
    "parse_skr",
    "resolve_parent",
    "score",
    "serialize_skr",
    "update_memory",
    "validate_id",
    "validate_skr",
]
