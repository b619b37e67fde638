"""Operator command-line surface tying catalog, memory, pipeline, and evaluation together.

Commands: ``catalog check``, ``memory init|update|forget|inspect``,
``extract``, ``evaluate``. One config file carries every knob; flags
override individual fields. Exit codes: 0 success, 1 partial per-item
failures, 2 configuration or environment error.

The CLI process is the single writer: an advisory lock file next to the
memory store guards it across processes (shared for readers, exclusive
for mutating commands). Writes go to a temporary file and are renamed
into place, so an interrupted command never corrupts the store.
"""

from __future__ import annotations

import argparse
import fcntl
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from .catalog import Catalog, is_subtechnique, load_catalog, normalize_id
from .config import AppConfig, build_clock, build_gateway, load_config
from .errors import (
    ConfigError,
    DatasetError,
    ExtractionError,
    LockError,
    SkrxError,
)
from .evaluation import feedback_to_memory, format_table, load_dataset, load_predictions, score
from .lifecycle import (
    initialize_memory,
    load_labeled_jsonl,
    run_forgetting,
    update_memory,
)
from .memory import MemoryStore
from .pipeline import (
    Classification,
    ExtractionPipeline,
    classification_delta,
    result_to_dict,
    run_ordered,
)
from .skr import serialize_skr

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


@contextmanager
def memory_lock(memory_path: Path, exclusive: bool):
    """Advisory flock on a sidecar lock file; non-blocking, clear error on contention."""
    lock_path = Path(str(memory_path) + ".lock")
    handle = open(lock_path, "a+")
    mode = fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH
    try:
        fcntl.flock(handle, mode | fcntl.LOCK_NB)
    except OSError as exc:
        handle.close()
        raise LockError(
            f"memory store {memory_path} is locked by another process"
        ) from exc
    try:
        yield
    finally:
        fcntl.flock(handle, fcntl.LOCK_UN)
        handle.close()


def _attach_log_file(config: AppConfig) -> None:
    if config.log_path is None:
        return
    handler = logging.FileHandler(config.log_path, encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)


def _load_catalog(config: AppConfig) -> Catalog:
    return load_catalog(config.catalog_path, config.catalog_format, config.catalog_version)


def _load_store(config: AppConfig, gateway=None) -> MemoryStore:
    if not config.memory_path.is_file():
        raise ConfigError(f"memory file not found: {config.memory_path}")
    store = MemoryStore.load(config.memory_path)
    if gateway is not None and store.embedder_fingerprint != gateway.embedder_fingerprint:
        raise ConfigError(
            f"memory was built with embedder {store.embedder_fingerprint!r}, "
            f"but the configured embedder is {gateway.embedder_fingerprint!r}"
        )
    return store


def _write_report(path: Path, payload: dict) -> None:
    document = {"generated_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    document.update(payload)
    path.write_text(json.dumps(document, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _read_extract_items(path: Path) -> list[dict]:
    if not path.is_file():
        raise ConfigError(f"input file not found: {path}")
    items: list[dict] = []
    with path.open(encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                items.append({**record, "id": str(record["id"]), "text": str(record["text"])})
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{line_number}: {exc}", line_number) from exc
    return items


# ---------------------------------------------------------------------------
# commands


def cmd_catalog_check(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _attach_log_file(config)
    catalog = _load_catalog(config)
    sub_count = sum(1 for record in catalog if is_subtechnique(record.id))
    deprecated = sum(1 for record in catalog if record.deprecated)
    print(
        f"catalog ok: {len(catalog)} techniques "
        f"({sub_count} sub-techniques, {deprecated} deprecated), version {catalog.version}"
    )
    return EXIT_OK


def cmd_memory_init(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _attach_log_file(config)
    dataset_path = Path(args.dataset).resolve() if args.dataset else config.dataset_path
    if dataset_path is None:
        raise ConfigError("memory init needs dataset_path in the config or --dataset")
    if not dataset_path.is_file():
        raise ConfigError(f"dataset file not found: {dataset_path}")
    catalog = _load_catalog(config)
    gateway = build_gateway(config, args.mock_script)
    dataset = load_labeled_jsonl(dataset_path)
    checkpoint_path = Path(str(config.memory_path) + ".checkpoint")

    with memory_lock(config.memory_path, exclusive=True):
        store = None
        clock = build_clock(config)
        if config.memory_path.is_file() and checkpoint_path.is_file():
            store = _load_store(config, gateway)
            resume_clock = build_clock(config, resume_from=store.max_timestamp() + 1.0)
            if resume_clock is not None:
                store.set_clock(resume_clock)
            logger.info("resuming build: %d entries already present", len(store))
        elif checkpoint_path.is_file():
            # A checkpoint without a store would silently skip sentences.
            logger.warning("removing stale checkpoint %s (no memory file)", checkpoint_path)
            checkpoint_path.unlink()
        store, report = initialize_memory(
            dataset,
            config.lifecycle,
            catalog,
            gateway,
            dataset_id=dataset_path.stem,
            store=store,
            checkpoint_path=checkpoint_path,
            clock=clock,
            persist_path=config.memory_path,
        )
        store.persist(config.memory_path)

    report_path = Path(str(config.memory_path) + ".init-report.json")
    _write_report(
        report_path,
        {
            "report": report.to_json_dict(),
            "entry_count": len(store),
            "embedder": store.embedder_fingerprint,
            "catalog_version": catalog.version,
            "config": config.to_echo_dict(),
        },
    )
    print(
        f"memory init: {report.created_entries} created, {report.merged_sentences} merged, "
        f"{report.skipped_sentences} skipped, {len(report.failures)} failed "
        f"-> {len(store)} entries in {config.memory_path}"
    )
    return EXIT_PARTIAL if report.failures else EXIT_OK


def cmd_memory_update(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _attach_log_file(config)
    input_path = Path(args.input).resolve()
    if not input_path.is_file():
        raise ConfigError(f"update input file not found: {input_path}")
    catalog = _load_catalog(config)
    gateway = build_gateway(config, args.mock_script)
    sentences = load_labeled_jsonl(input_path)

    reports = []
    failures = []
    with memory_lock(config.memory_path, exclusive=True):
        store = _load_store(config, gateway)
        clock = build_clock(config, resume_from=store.max_timestamp() + 1.0)
        if clock is not None:
            store.set_clock(clock)
        for sentence in sentences:
            try:
                reports.append(
                    update_memory(
                        store, sentence, config.lifecycle, catalog, gateway, dataset_id=input_path.stem
                    ).to_json_dict()
                )
            except SkrxError as exc:
                logger.error("update failed for sentence %s: %s", sentence.id, exc)
                failures.append({"sentence_id": sentence.id, "error": str(exc)})
        store.persist(config.memory_path)

    report_path = Path(str(config.memory_path) + ".update-report.json")
    _write_report(
        report_path,
        {
            "updates": reports,
            "failures": failures,
            "entry_count": len(store),
            "embedder": store.embedder_fingerprint,
            "config": config.to_echo_dict(),
        },
    )
    print(f"memory update: {len(reports)} processed, {len(failures)} failed -> {len(store)} entries")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_memory_forget(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _attach_log_file(config)
    with memory_lock(config.memory_path, exclusive=True):
        store = _load_store(config)
        report = run_forgetting(store, config.lifecycle)
        store.persist(config.memory_path)
    report_path = Path(str(config.memory_path) + ".forget-report.json")
    _write_report(
        report_path,
        {
            "report": report.to_json_dict(),
            "embedder": store.embedder_fingerprint,
            "config": config.to_echo_dict(),
        },
    )
    print(f"memory forget: {len(report.pruned)} pruned, {report.survivors} survive")
    return EXIT_OK


def cmd_memory_inspect(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _attach_log_file(config)
    technique = normalize_id(args.technique) if args.technique else None
    needle = args.state_contains.lower() if args.state_contains else None
    with memory_lock(config.memory_path, exclusive=False):
        store = _load_store(config)
        shown = 0
        for entry in store.entries():
            if technique is not None and technique not in entry.skr.actions:
                continue
            if needle is not None and needle not in entry.skr.state.lower():
                continue
            shown += 1
            print(
                f"# {entry.id}  uses={entry.stats.uses} hits={entry.stats.hits} "
                f"provenance={len(entry.provenance)}"
            )
            print(serialize_skr(entry.skr))
    print(f"memory inspect: {shown} of {len(store)} entries shown")
    return EXIT_OK


def cmd_extract(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _attach_log_file(config)
    catalog = _load_catalog(config)
    gateway = build_gateway(config, args.mock_script)
    items = _read_extract_items(Path(args.input).resolve())
    output_path = Path(args.output).resolve()
    workers = args.workers or config.worker_limit

    with memory_lock(config.memory_path, exclusive=False):
        store = _load_store(config, gateway)
        pipeline = ExtractionPipeline(store, gateway, catalog, config.pipeline)

        if args.mode == "full":
            fn = lambda item: pipeline.extract(item["text"])
        elif args.mode == "stage1":
            fn = lambda item: pipeline.stage1_classify(item["text"])
        else:  # verify-external

            def fn(item):
                if "techniques" not in item:
                    raise ExtractionError(
                        f"input item {item['id']} has no 'techniques' field", stage="external"
                    )
                return pipeline.standardize_external(item["text"], item["techniques"])

        results = run_ordered(items, fn, workers)

    ok = 0
    failed = 0
    warning_count = 0
    lines = []
    for item, result in zip(items, results):
        document = result_to_dict(item["id"], result)
        if isinstance(result, Classification):
            ok += 1
            warning_count += len(result.warnings)
            if args.mode == "verify-external":
                external = [token for token in item.get("techniques", []) if _safe_id(token)]
                document["delta"] = classification_delta(external, result)
        else:
            failed += 1
        lines.append(json.dumps(document, ensure_ascii=False))
    output_path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    print(
        f"extract: {len(items)} items, ok={ok}, failed={failed}, "
        f"warnings={warning_count} (mode={args.mode}) -> {output_path}"
    )
    return EXIT_PARTIAL if failed else EXIT_OK


def _safe_id(token: str) -> str | None:
    try:
        return normalize_id(str(token))
    except SkrxError:
        return None


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    _attach_log_file(config)
    if bool(args.predictions) == bool(args.live):
        raise ConfigError("evaluate needs exactly one of --predictions or --live")
    if args.feedback and not args.live:
        raise ConfigError("--feedback needs --live (traces come from the live run)")

    dataset_path = config.eval_dataset_path or config.dataset_path
    if dataset_path is None:
        raise ConfigError("evaluate needs eval_dataset_path or dataset_path in the config")
    samples = load_dataset(dataset_path)
    catalog = _load_catalog(config)
    echo = config.to_echo_dict()
    echo["catalog_version"] = catalog.version
    echo["dataset"] = str(dataset_path)

    failures = 0
    traces: dict[str, list[str]] = {}
    if args.predictions:
        preds, warnings = load_predictions(Path(args.predictions).resolve())
        for warning in warnings:
            logger.warning("predictions: %s", warning)
        echo["mode"] = "predictions"
        report = score(preds, samples, parent_resolution=args.parent_resolution, config_echo=echo)
        store = None
    else:
        gateway = build_gateway(config, args.mock_script)
        echo["mode"] = "live"
        echo["embedder"] = gateway.embedder_fingerprint
        with memory_lock(config.memory_path, exclusive=bool(args.feedback)):
            store = _load_store(config, gateway)
            pipeline = ExtractionPipeline(store, gateway, catalog, config.pipeline)
            results = run_ordered(
                [sample.text for sample in samples],
                pipeline.extract,
                args.workers or config.worker_limit,
            )
            preds = {}
            for sample, result in zip(samples, results):
                if isinstance(result, Classification):
                    preds[sample.id] = set(result.technique_ids)
                    traces[sample.id] = list(result.retrieved_entry_ids)
                else:
                    failures += 1
                    preds[sample.id] = set()
                    logger.error("extraction failed for sample %s: %s", sample.id, result.message)
            report = score(preds, samples, parent_resolution=args.parent_resolution, config_echo=echo)
            if args.feedback:
                feedback_to_memory(report, traces, store)
                store.persist(config.memory_path)
                print(f"feedback recorded into {config.memory_path}")

    table = format_table(report, label="skrx")
    print(table)
    prefix = args.report_prefix or str(config.memory_path) + ".eval-report"
    _write_report(Path(prefix + ".json"), {"report": report.to_json_dict()})
    Path(prefix + ".txt").write_text(table + "\n", encoding="utf-8")
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skrx",
        description="Standard-driven ATT&CK technique extraction with an evolvable knowledge memory.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    catalog_parser = subparsers.add_parser("catalog", help="catalog utilities")
    catalog_sub = catalog_parser.add_subparsers(dest="subcommand", required=True)
    check = catalog_sub.add_parser("check", help="load and validate the technique catalog")
    check.add_argument("--config", required=True)
    check.set_defaults(handler=cmd_catalog_check)

    memory_parser = subparsers.add_parser("memory", help="memory lifecycle operations")
    memory_sub = memory_parser.add_subparsers(dest="subcommand", required=True)

    init_parser = memory_sub.add_parser("init", help="build the memory from a labeled dataset")
    init_parser.add_argument("--config", required=True)
    init_parser.add_argument("--dataset", help="override the configured dataset path")
    init_parser.add_argument("--mock-script", help="override the configured mock chat script")
    init_parser.set_defaults(handler=cmd_memory_init)

    update_parser = memory_sub.add_parser("update", help="fold new labeled sentences into the memory")
    update_parser.add_argument("--config", required=True)
    update_parser.add_argument("--input", required=True, help="labeled JSONL of new sentences")
    update_parser.add_argument("--mock-script", help="override the configured mock chat script")
    update_parser.set_defaults(handler=cmd_memory_update)

    forget_parser = memory_sub.add_parser("forget", help="prune low-utility entries")
    forget_parser.add_argument("--config", required=True)
    forget_parser.set_defaults(handler=cmd_memory_forget)

    inspect_parser = memory_sub.add_parser("inspect", help="print entries without mutation")
    inspect_parser.add_argument("--config", required=True)
    inspect_parser.add_argument("--technique", help="only entries carrying this technique")
    inspect_parser.add_argument("--state-contains", help="only entries whose state contains this text")
    inspect_parser.set_defaults(handler=cmd_memory_inspect)

    extract_parser = subparsers.add_parser("extract", help="run the extraction pipeline over a file")
    extract_parser.add_argument("--config", required=True)
    extract_parser.add_argument("--input", required=True, help="JSONL of {id, text[, techniques]}")
    extract_parser.add_argument("--output", required=True, help="output JSONL path")
    extract_parser.add_argument(
        "--mode", choices=["full", "stage1", "verify-external"], default="full"
    )
    extract_parser.add_argument("--workers", type=int)
    extract_parser.add_argument("--mock-script", help="override the configured mock chat script")
    extract_parser.set_defaults(handler=cmd_extract)

    evaluate_parser = subparsers.add_parser("evaluate", help="score predictions or a live run")
    evaluate_parser.add_argument("--config", required=True)
    evaluate_parser.add_argument("--predictions", help="JSONL of {id, techniques}")
    evaluate_parser.add_argument("--live", action="store_true", help="run the pipeline, then score")
    evaluate_parser.add_argument("--parent-resolution", action="store_true")
    evaluate_parser.add_argument("--feedback", action="store_true", help="record outcomes into memory stats")
    evaluate_parser.add_argument("--workers", type=int)
    evaluate_parser.add_argument("--mock-script", help="override the configured mock chat script")
    evaluate_parser.add_argument("--report-prefix", help="where to write report files")
    evaluate_parser.set_defaults(handler=cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LockError as exc:
        print(f"lock error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SkrxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
