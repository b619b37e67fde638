"""Multi-label scoring of technique extraction, plus memory feedback routing.

Metrics are example-based set metrics averaged over samples: per-sample
precision, recall, and F1 on the predicted vs. gold technique sets, and
hit@any accuracy (a sample counts as correct when prediction and gold
intersect). Micro-averaged variants are reported alongside for comparison
but are not the primary metrics. With parent resolution enabled, both
sides are mapped to parent techniques before comparison.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .catalog import is_valid_id, normalize_id, resolve_parent
from .errors import DatasetError, TechniqueIdError, UnknownSampleError
from .lifecycle import load_labeled_jsonl
from .memory import MemoryStore

logger = logging.getLogger(__name__)

METRIC_DEFINITION = (
    "example-based set metrics averaged over samples; "
    "precision=|pred∩gold|/|pred|, recall=|pred∩gold|/|gold|, f1=harmonic mean, "
    "accuracy=hit@any (pred∩gold non-empty); empty-vs-empty scores 1.0 for precision/recall"
)


@dataclass(frozen=True)
class EvalSample:
    id: str
    text: str
    gold: frozenset[str]


@dataclass(frozen=True)
class SampleScore:
    id: str
    pred: tuple[str, ...]
    gold: tuple[str, ...]
    precision: float
    recall: float
    f1: float
    hit: int


@dataclass
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    per_sample: list[SampleScore]
    config_echo: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "metric_definition": METRIC_DEFINITION,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "micro_precision": self.micro_precision,
            "micro_recall": self.micro_recall,
            "micro_f1": self.micro_f1,
            "config_echo": self.config_echo,
            "warnings": self.warnings,
            "per_sample": [
                {
                    "id": sample.id,
                    "pred": list(sample.pred),
                    "gold": list(sample.gold),
                    "precision": sample.precision,
                    "recall": sample.recall,
                    "f1": sample.f1,
                    "hit": sample.hit,
                }
                for sample in self.per_sample
            ],
        }


def load_dataset(path: str | Path) -> list[EvalSample]:
    """Labeled JSONL; validation and duplicate checks as for training data."""
    return [
        EvalSample(id=sentence.id, text=sentence.text, gold=sentence.labels)
        for sentence in load_labeled_jsonl(path)
    ]


def load_predictions(path: str | Path) -> tuple[dict[str, set[str]], list[str]]:
    """Line-delimited {"id", "techniques": [...]}; invalid ids dropped with warnings."""
    source = Path(path)
    if not source.is_file():
        raise DatasetError(f"predictions file not found: {source}")
    predictions: dict[str, set[str]] = {}
    warnings: list[str] = []
    with source.open(encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                sample_id = str(record["id"])
                techniques = record["techniques"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"{source}:{line_number}: {exc}", line_number) from exc
            if sample_id in predictions:
                raise DatasetError(f"{source}:{line_number}: duplicate id {sample_id!r}", line_number)
            cleaned: set[str] = set()
            for token in techniques:
                try:
                    cleaned.add(normalize_id(str(token)))
                except TechniqueIdError:
                    warnings.append(f"{sample_id}: dropped invalid technique id {token!r}")
            predictions[sample_id] = cleaned
    return predictions, warnings


def sample_metrics(pred: set[str], gold: set[str]) -> tuple[float, float, float, int]:
    """Set metrics for one sample under the stated empty-set conventions."""
    overlap = len(pred & gold)
    if not pred:
        precision = 1.0 if not gold else 0.0
    else:
        precision = overlap / len(pred)
    if not gold:
        recall = 1.0 if not pred else 0.0
    else:
        recall = overlap / len(gold)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    hit = 1 if overlap else 0
    return precision, recall, f1, hit


def _resolved(ids: Iterable[str]) -> set[str]:
    return {resolve_parent(technique_id) for technique_id in ids}


def score(
    preds: Mapping[str, Iterable[str]],
    samples: Sequence[EvalSample],
    parent_resolution: bool = False,
    config_echo: dict | None = None,
) -> EvalReport:
    """Score predictions against gold labels; order of samples is irrelevant."""
    known_ids = {sample.id for sample in samples}
    unknown = sorted(set(preds) - known_ids)
    if unknown:
        raise UnknownSampleError(f"predictions reference unknown sample id(s): {', '.join(unknown)}")

    warnings: list[str] = []
    per_sample: list[SampleScore] = []
    total_overlap = 0
    total_pred = 0
    total_gold = 0
    for sample in samples:
        if sample.id not in preds:
            warnings.append(f"no prediction for sample {sample.id}; treated as empty")
        raw_pred = set(preds.get(sample.id, ()))
        invalid = sorted(token for token in raw_pred if not is_valid_id(token))
        if invalid:
            warnings.append(f"{sample.id}: dropped invalid technique id(s) {', '.join(invalid)}")
            raw_pred -= set(invalid)
        gold = set(sample.gold)
        if parent_resolution:
            raw_pred = _resolved(raw_pred)
            gold = _resolved(gold)
        precision, recall, f1, hit = sample_metrics(raw_pred, gold)
        total_overlap += len(raw_pred & gold)
        total_pred += len(raw_pred)
        total_gold += len(gold)
        per_sample.append(
            SampleScore(
                id=sample.id,
                pred=tuple(sorted(raw_pred)),
                gold=tuple(sorted(gold)),
                precision=precision,
                recall=recall,
                f1=f1,
                hit=hit,
            )
        )

    count = len(per_sample)
    if count == 0:
        raise ValueError("no samples to score")
    micro_precision = 1.0 if total_pred == 0 else total_overlap / total_pred
    micro_recall = 1.0 if total_gold == 0 else total_overlap / total_gold
    micro_f1 = (
        0.0
        if micro_precision + micro_recall == 0
        else 2 * micro_precision * micro_recall / (micro_precision + micro_recall)
    )
    echo = dict(config_echo or {})
    echo.setdefault("parent_resolution", parent_resolution)
    return EvalReport(
        accuracy=sum(sample.hit for sample in per_sample) / count,
        precision=sum(sample.precision for sample in per_sample) / count,
        recall=sum(sample.recall for sample in per_sample) / count,
        f1=sum(sample.f1 for sample in per_sample) / count,
        micro_precision=micro_precision,
        micro_recall=micro_recall,
        micro_f1=micro_f1,
        per_sample=per_sample,
        config_echo=echo,
        warnings=warnings,
    )


def format_table(report: EvalReport, label: str = "run") -> str:
    """Fixed-width aggregate row in the familiar Acc/Prec/Rec/F1 layout."""
    header = f"{'System':<16}{'Acc':>8}{'Prec':>8}{'Rec':>8}{'F1':>8}"
    rule = "-" * len(header)
    row = (
        f"{label:<16}{report.accuracy:>8.2f}{report.precision:>8.2f}"
        f"{report.recall:>8.2f}{report.f1:>8.2f}"
    )
    return "\n".join([header, rule, row])


def feedback_to_memory(
    report: EvalReport,
    traces: Mapping[str, Sequence[str]],
    store: MemoryStore,
) -> None:
    """Credit or debit every entry that fed each sample's classification.

    All retrieved-and-presented entries are treated equally; an entry
    appearing in both stage traces is counted once per sample. Unknown
    entry ids are warned about and skipped.
    """
    for sample in report.per_sample:
        entry_ids = traces.get(sample.id, ())
        deduped: list[str] = []
        seen: set[str] = set()
        for entry_id in entry_ids:
            if entry_id in seen:
                continue
            seen.add(entry_id)
            if entry_id not in store:
                logger.warning("feedback: unknown entry id %s for sample %s; skipped", entry_id, sample.id)
                continue
            deduped.append(entry_id)
        if deduped:
            store.record_outcome(deduped, correct=bool(sample.hit))
