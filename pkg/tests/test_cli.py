from __future__ import annotations

import fcntl
import json
import shutil
from pathlib import Path

import pytest

from skrx.cli import main
from skrx.memory import MemoryStore

from conftest import load_fixture_dataset


def build_workspace(root: Path, fixtures_dir: Path, config_extra: dict | None = None) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    shutil.copy(fixtures_dir / "catalog_small.json", root / "catalog.json")
    shutil.copy(fixtures_dir / "dataset_20.jsonl", root / "dataset.jsonl")
    (root / "mock.json").write_text(json.dumps({"mode": "echo", "dataset": "dataset.jsonl"}))
    config = {
        "catalog": {"path": "catalog.json", "format": "simplified-json", "version": "fixture-1"},
        "memory_path": "memory.jsonl",
        "dataset_path": "dataset.jsonl",
        "chat": {"provider": "mock", "mock_script": "mock.json"},
        "embedding": {"provider": "hashing", "dim": 256},
    }
    config.update(config_extra or {})
    (root / "config.json").write_text(json.dumps(config))
    return root


@pytest.fixture()
def workspace(tmp_path, fixtures_dir) -> Path:
    return build_workspace(tmp_path / "ws", fixtures_dir)


def config_arg(root: Path) -> list[str]:
    return ["--config", str(root / "config.json")]


def write_extract_input(root: Path, with_techniques: bool = False) -> Path:
    path = root / "input.jsonl"
    lines = []
    for record in load_fixture_dataset():
        item = {"id": record["id"], "text": record["text"]}
        if with_techniques:
            item["techniques"] = record["labels"]
        lines.append(json.dumps(item))
    path.write_text("\n".join(lines) + "\n")
    return path


# -- catalog check --


def test_catalog_check_ok(workspace, capsys):
    assert main(["catalog", "check", *config_arg(workspace)]) == 0
    out = capsys.readouterr().out
    assert "catalog ok: 20 techniques" in out
    assert "version fixture-1" in out


def test_catalog_check_missing_file(workspace, capsys):
    (workspace / "catalog.json").unlink()
    assert main(["catalog", "check", *config_arg(workspace)]) == 2


def test_toml_config_supported(workspace, capsys):
    toml_config = workspace / "config.toml"
    toml_config.write_text(
        '[catalog]\npath = "catalog.json"\nformat = "simplified-json"\nversion = "fixture-1"\n'
        'memory_path = "memory.jsonl"\ndataset_path = "dataset.jsonl"\n'
        '[chat]\nprovider = "mock"\nmock_script = "mock.json"\n'
        '[embedding]\nprovider = "hashing"\ndim = 256\n'
    )
    assert main(["catalog", "check", "--config", str(toml_config)]) == 0


def test_bad_config_path_is_exit_2(tmp_path):
    assert main(["catalog", "check", "--config", str(tmp_path / "nope.json")]) == 2


# -- memory init --


def test_memory_init_builds_store(workspace, capsys):
    assert main(["memory", "init", *config_arg(workspace)]) == 0
    out = capsys.readouterr().out
    assert "20 created" in out
    store = MemoryStore.load(workspace / "memory.jsonl")
    assert len(store) == 20
    assert (workspace / "memory.jsonl.init-report.json").is_file()
    assert (workspace / "memory.jsonl.checkpoint").is_file()


def test_memory_init_missing_catalog_no_side_effects(workspace):
    (workspace / "catalog.json").unlink()
    assert main(["memory", "init", *config_arg(workspace)]) == 2
    assert not (workspace / "memory.jsonl").exists()


def test_memory_init_byte_identical_across_fresh_runs(tmp_path, fixtures_dir):
    ws_a = build_workspace(tmp_path / "a", fixtures_dir)
    ws_b = build_workspace(tmp_path / "b", fixtures_dir)
    assert main(["memory", "init", *config_arg(ws_a)]) == 0
    assert main(["memory", "init", *config_arg(ws_b)]) == 0
    assert (ws_a / "memory.jsonl").read_bytes() == (ws_b / "memory.jsonl").read_bytes()


def test_memory_init_rerun_resumes_and_keeps_bytes(workspace, capsys):
    assert main(["memory", "init", *config_arg(workspace)]) == 0
    first = (workspace / "memory.jsonl").read_bytes()
    assert main(["memory", "init", *config_arg(workspace)]) == 0
    out = capsys.readouterr().out
    assert "20 skipped" in out
    assert (workspace / "memory.jsonl").read_bytes() == first


def test_memory_init_resume_processes_only_unprocessed(tmp_path, fixtures_dir, capsys):
    ws = build_workspace(tmp_path / "ws", fixtures_dir)
    half = tmp_path / "half.jsonl"
    lines = (ws / "dataset.jsonl").read_text().splitlines()
    half.write_text("\n".join(lines[:10]) + "\n")
    assert main(["memory", "init", *config_arg(ws), "--dataset", str(half)]) == 0
    assert len(MemoryStore.load(ws / "memory.jsonl")) == 10
    assert main(["memory", "init", *config_arg(ws)]) == 0
    out = capsys.readouterr().out
    assert "10 skipped" in out
    assert len(MemoryStore.load(ws / "memory.jsonl")) == 20


def test_stale_checkpoint_removed(workspace):
    checkpoint = workspace / "memory.jsonl.checkpoint"
    checkpoint.write_text("s001\ns002\n")
    assert main(["memory", "init", *config_arg(workspace)]) == 0
    # all 20 sentences processed despite the stale checkpoint
    assert len(MemoryStore.load(workspace / "memory.jsonl")) == 20


# -- extract --


def test_extract_full_mode(workspace, capsys):
    main(["memory", "init", *config_arg(workspace)])
    input_path = write_extract_input(workspace)
    output_path = workspace / "out.jsonl"
    rc = main(
        ["extract", *config_arg(workspace), "--input", str(input_path), "--output", str(output_path)]
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "ok=20, failed=0" in out
    documents = [json.loads(line) for line in output_path.read_text().splitlines()]
    assert len(documents) == 20
    gold = {record["id"]: sorted(record["labels"]) for record in load_fixture_dataset()}
    for document in documents:
        assert document["status"] == "ok"
        assert document["stage"] == "stage2"
        assert document["techniques"] == gold[document["id"]]
        assert document["retrieved_entry_ids"]


def test_extract_stage1_mode(workspace):
    main(["memory", "init", *config_arg(workspace)])
    input_path = write_extract_input(workspace)
    output_path = workspace / "stage1.jsonl"
    assert (
        main(
            [
                "extract",
                *config_arg(workspace),
                "--input",
                str(input_path),
                "--output",
                str(output_path),
                "--mode",
                "stage1",
            ]
        )
        == 0
    )
    documents = [json.loads(line) for line in output_path.read_text().splitlines()]
    assert all(document["stage"] == "stage1" for document in documents)


def test_extract_deterministic_across_runs(workspace):
    main(["memory", "init", *config_arg(workspace)])
    input_path = write_extract_input(workspace)
    out_a = workspace / "a.jsonl"
    out_b = workspace / "b.jsonl"
    main(["extract", *config_arg(workspace), "--input", str(input_path), "--output", str(out_a)])
    main(["extract", *config_arg(workspace), "--input", str(input_path), "--output", str(out_b)])
    assert out_a.read_bytes() == out_b.read_bytes()


def test_extract_worker_count_invariant(workspace):
    main(["memory", "init", *config_arg(workspace)])
    input_path = write_extract_input(workspace)
    out_1 = workspace / "w1.jsonl"
    out_8 = workspace / "w8.jsonl"
    main(
        ["extract", *config_arg(workspace), "--input", str(input_path), "--output", str(out_1), "--workers", "1"]
    )
    main(
        ["extract", *config_arg(workspace), "--input", str(input_path), "--output", str(out_8), "--workers", "8"]
    )
    assert out_1.read_bytes() == out_8.read_bytes()


def test_extract_verify_external_reports_delta(workspace):
    main(["memory", "init", *config_arg(workspace)])
    input_path = workspace / "external.jsonl"
    record = load_fixture_dataset()[0]
    input_path.write_text(
        json.dumps({"id": record["id"], "text": record["text"], "techniques": ["T1071"]}) + "\n"
    )
    output_path = workspace / "verified.jsonl"
    rc = main(
        [
            "extract",
            *config_arg(workspace),
            "--input",
            str(input_path),
            "--output",
            str(output_path),
            "--mode",
            "verify-external",
        ]
    )
    assert rc == 0
    document = json.loads(output_path.read_text().splitlines()[0])
    # echo answers with the sentence's gold labels, so T1132 is added back
    assert document["techniques"] == ["T1071", "T1132"]
    assert document["delta"] == {"added": ["T1132"], "removed": []}


def test_extract_verify_external_missing_field_is_item_failure(workspace):
    main(["memory", "init", *config_arg(workspace)])
    input_path = workspace / "external.jsonl"
    record = load_fixture_dataset()[0]
    input_path.write_text(json.dumps({"id": record["id"], "text": record["text"]}) + "\n")
    output_path = workspace / "verified.jsonl"
    rc = main(
        [
            "extract",
            *config_arg(workspace),
            "--input",
            str(input_path),
            "--output",
            str(output_path),
            "--mode",
            "verify-external",
        ]
    )
    assert rc == 1
    document = json.loads(output_path.read_text().splitlines()[0])
    assert document["status"] == "error"


def test_extract_without_memory_is_config_error(workspace):
    input_path = write_extract_input(workspace)
    rc = main(
        ["extract", *config_arg(workspace), "--input", str(input_path), "--output", str(workspace / "o.jsonl")]
    )
    assert rc == 2


# -- evaluate --


def test_evaluate_perfect_predictions(workspace, capsys):
    main(["memory", "init", *config_arg(workspace)])
    predictions = workspace / "preds.jsonl"
    predictions.write_text(
        "\n".join(
            json.dumps({"id": record["id"], "techniques": record["labels"]})
            for record in load_fixture_dataset()
        )
        + "\n"
    )
    rc = main(["evaluate", *config_arg(workspace), "--predictions", str(predictions)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "1.00    1.00    1.00    1.00" in out.replace("  ", "  ")
    assert (workspace / "memory.jsonl.eval-report.json").is_file()
    assert (workspace / "memory.jsonl.eval-report.txt").is_file()


def test_evaluate_live_echo_is_perfect(workspace, capsys):
    main(["memory", "init", *config_arg(workspace)])
    rc = main(["evaluate", *config_arg(workspace), "--live"])
    assert rc == 0
    report = json.loads((workspace / "memory.jsonl.eval-report.json").read_text())
    assert report["report"]["f1"] == 1.0
    assert report["report"]["accuracy"] == 1.0


def test_evaluate_needs_exactly_one_mode(workspace):
    assert main(["evaluate", *config_arg(workspace)]) == 2
    assert main(["evaluate", *config_arg(workspace), "--predictions", "x", "--live"]) == 2


def test_evaluate_feedback_then_forget_prunes_debited_entries(tmp_path, fixtures_dir):
    ws = build_workspace(
        tmp_path / "ws",
        fixtures_dir,
        config_extra={
            "lifecycle": {"min_uses": 1, "utility_threshold": 0.5},
            "eval_dataset_path": "eval_variant.jsonl",
        },
    )
    main(["memory", "init", *config_arg(ws)])
    # one eval sentence whose gold disagrees with what the echo oracle answers
    record = load_fixture_dataset()[1]
    (ws / "eval_variant.jsonl").write_text(
        json.dumps({"id": "x001", "text": record["text"], "labels": ["T1090"]}) + "\n"
    )
    assert main(["evaluate", *config_arg(ws), "--live", "--feedback"]) == 0

    store = MemoryStore.load(ws / "memory.jsonl")
    debited = sorted(entry.id for entry in store.entries() if entry.stats.uses >= 1)
    assert debited, "feedback must have recorded outcomes"
    assert all(store.get(entry_id).stats.hits == 0 for entry_id in debited)

    assert main(["memory", "forget", *config_arg(ws)]) == 0
    report = json.loads((ws / "memory.jsonl.forget-report.json").read_text())
    assert sorted(item["id"] for item in report["report"]["pruned"]) == debited
    assert len(MemoryStore.load(ws / "memory.jsonl")) == 20 - len(debited)


# -- memory update / forget / inspect --


def test_update_empty_file_is_noop(workspace, capsys):
    main(["memory", "init", *config_arg(workspace)])
    before = (workspace / "memory.jsonl").read_bytes()
    empty = workspace / "new.jsonl"
    empty.write_text("")
    assert main(["memory", "update", *config_arg(workspace), "--input", str(empty)]) == 0
    out = capsys.readouterr().out
    assert "0 processed" in out
    assert (workspace / "memory.jsonl").read_bytes() == before


def test_update_appends_action_for_matching_state(workspace):
    main(["memory", "init", *config_arg(workspace)])
    record = load_fixture_dataset()[16]  # proxy sentence s017
    new_file = workspace / "new.jsonl"
    new_file.write_text(
        json.dumps({"id": "u001", "text": record["text"], "labels": ["T1071"]}) + "\n"
    )
    assert main(["memory", "update", *config_arg(workspace), "--input", str(new_file)]) == 0
    report = json.loads((workspace / "memory.jsonl.update-report.json").read_text())
    assert report["updates"][0]["path"] == "merged"
    assert report["updates"][0]["added_actions"] == ["T1071"]


def test_forget_fresh_store_prunes_nothing(workspace, capsys):
    main(["memory", "init", *config_arg(workspace)])
    assert main(["memory", "forget", *config_arg(workspace)]) == 0
    out = capsys.readouterr().out
    assert "0 pruned" in out


def test_inspect_filters_by_technique(workspace, capsys):
    main(["memory", "init", *config_arg(workspace)])
    assert main(["memory", "inspect", *config_arg(workspace), "--technique", "T1132"]) == 0
    out = capsys.readouterr().out
    # s001 and s020 both carry T1132
    assert "m00001" in out
    assert "m00020" in out
    assert "2 of 20 entries shown" in out


def test_inspect_does_not_mutate(workspace):
    main(["memory", "init", *config_arg(workspace)])
    before = (workspace / "memory.jsonl").read_bytes()
    main(["memory", "inspect", *config_arg(workspace), "--state-contains", "subdomains"])
    assert (workspace / "memory.jsonl").read_bytes() == before


# -- locking --


def test_writer_lock_contention_is_exit_2(workspace, capsys):
    main(["memory", "init", *config_arg(workspace)])
    lock_path = workspace / "memory.jsonl.lock"
    with open(lock_path, "a+") as handle:
        fcntl.flock(handle, fcntl.LOCK_EX)
        try:
            assert main(["memory", "forget", *config_arg(workspace)]) == 2
        finally:
            fcntl.flock(handle, fcntl.LOCK_UN)
    # after release the command succeeds
    assert main(["memory", "forget", *config_arg(workspace)]) == 0


def test_reader_blocked_while_writer_holds_lock(workspace):
    main(["memory", "init", *config_arg(workspace)])
    input_path = write_extract_input(workspace)
    lock_path = workspace / "memory.jsonl.lock"
    with open(lock_path, "a+") as handle:
        fcntl.flock(handle, fcntl.LOCK_EX)
        try:
            rc = main(
                [
                    "extract",
                    *config_arg(workspace),
                    "--input",
                    str(input_path),
                    "--output",
                    str(workspace / "o.jsonl"),
                ]
            )
        finally:
            fcntl.flock(handle, fcntl.LOCK_UN)
    assert rc == 2
