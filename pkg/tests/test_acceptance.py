"""Acceptance suite: one test per criterion, one printed pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines. Everything here is offline and deterministic except the final,
optional live smoke test, which only runs when SKRX_LIVE_ENDPOINT is set.
"""

from __future__ import annotations

import json
import os
import random
import time

import numpy as np
import pytest

from skrx.cli import main
from skrx.errors import ExtractionError, NoCoverageError
from skrx.evaluation import EvalSample, score
from skrx.gateway import EchoOracleChatProvider, HashingEmbedder, LlmGateway, ScriptedChatProvider
from skrx.lifecycle import LabeledSentence, LifecycleConfig, initialize_memory, update_memory
from skrx.memory import MemoryEntry, MemoryStore
from skrx.pipeline import Classification, ExtractionPipeline, PipelineConfig
from skrx.skr import SkrInstance, parse_skr, serialize_skr

from conftest import C2_SUBDOMAIN_SKR_JSON, make_entry, make_store
from test_cli import build_workspace, config_arg, write_extract_input
from test_evaluation import LABEL_POOL, oracle_sample, samples_of
from test_memory import oracle_action_top_k, oracle_state_top_k, provenance_ref, unit_vector


def report(criterion: str, detail: str = "") -> None:
    print(f"ACCEPTANCE {criterion}: PASS" + (f" ({detail})" if detail else ""))


# criterion 1 -----------------------------------------------------------------


def test_criterion_1_oracle_identity_end_to_end(tmp_path, fixtures_dir):
    """Echo oracle, 20-sentence fixture: init -> extract -> evaluate, all 1.0, < 10 s."""
    started = time.monotonic()
    ws = build_workspace(tmp_path / "ws", fixtures_dir)
    assert main(["memory", "init", *config_arg(ws)]) == 0

    input_path = write_extract_input(ws)
    output_path = ws / "extracted.jsonl"
    assert main(["extract", *config_arg(ws), "--input", str(input_path), "--output", str(output_path)]) == 0

    predictions = ws / "preds.jsonl"
    predictions.write_text(
        "\n".join(
            json.dumps({"id": document["id"], "techniques": document["techniques"]})
            for document in map(json.loads, output_path.read_text().splitlines())
        )
        + "\n"
    )
    assert main(["evaluate", *config_arg(ws), "--predictions", str(predictions)]) == 0

    report_doc = json.loads((ws / "memory.jsonl.eval-report.json").read_text())["report"]
    assert report_doc["accuracy"] == 1.0
    assert report_doc["precision"] == 1.0
    assert report_doc["recall"] == 1.0
    assert report_doc["f1"] == 1.0

    elapsed = time.monotonic() - started
    assert elapsed < 10.0, f"end-to-end run took {elapsed:.1f}s"
    report("1 oracle identity", f"Acc=Prec=Rec=F1=1.0 in {elapsed:.1f}s")


# criterion 2 -----------------------------------------------------------------


def test_criterion_2_metric_oracle():
    """score() equals the brute-force per-sample oracle over 1000 random pairs."""
    rng = random.Random(20240809)
    gold_sets: dict[str, set[str]] = {}
    preds: dict[str, set[str]] = {}
    for index in range(1000):
        sample_id = f"r{index:05d}"
        gold_sets[sample_id] = set(rng.sample(LABEL_POOL, rng.randint(1, 5)))
        preds[sample_id] = set(rng.sample(LABEL_POOL, rng.randint(0, 5)))
    samples = samples_of(gold_sets)
    result = score(preds, samples)

    expected = [oracle_sample(preds[sample.id], set(sample.gold)) for sample in samples]
    for sample_score, (precision, recall, f1, hit) in zip(result.per_sample, expected):
        assert sample_score.precision == precision
        assert sample_score.recall == recall
        assert sample_score.f1 == f1
        assert sample_score.hit == hit
    count = len(expected)
    assert result.precision == sum(e[0] for e in expected) / count
    assert result.recall == sum(e[1] for e in expected) / count
    assert result.f1 == sum(e[2] for e in expected) / count
    assert result.accuracy == sum(e[3] for e in expected) / count

    hand = score({"a": {"T1132"}}, samples_of({"a": {"T1132", "T1071"}}))
    assert hand.precision == 1.0
    assert hand.recall == 0.5
    assert abs(hand.f1 - 0.667) <= 0.001
    report("2 metric oracle", "1000 random pairs exact + hand case (1.0, 0.5, 0.667)")


# criterion 3 -----------------------------------------------------------------


def test_criterion_3_parent_resolution():
    samples = [EvalSample(id="a", text="x", gold=frozenset({"T1003"}))]
    on = score({"a": {"T1003.001"}}, samples, parent_resolution=True)
    off = score({"a": {"T1003.001"}}, samples, parent_resolution=False)
    assert on.f1 == 1.0
    assert off.f1 == 0.0
    report("3 parent resolution", "f1 on=1.0 / off=0.0")


# criterion 4 -----------------------------------------------------------------


def test_criterion_4_retrieval_equivalence():
    """200 random stores of <= 100 entries match the exhaustive-scan oracle."""
    rng = np.random.default_rng(42)
    techniques = ("T1001", "T1003", "T1008", "T1071", "T1090", "T1132", "T1555")
    dim = 32
    for round_index in range(200):
        n_entries = int(rng.integers(1, 101))
        store = MemoryStore(dim=dim, embedder_fingerprint="accept:rand")
        for index in range(n_entries):
            count = int(rng.integers(1, 4))
            chosen = rng.choice(len(techniques), size=count, replace=False)
            actions = {techniques[j]: f"manifestation {techniques[j]} #{index}" for j in chosen}
            # every tenth entry duplicates the previous state embedding to force ties
            if index % 10 == 9 and index > 0:
                state_embedding = store.get(f"e{index - 1:03d}").state_embedding.copy()
            else:
                state_embedding = unit_vector(rng, dim)
            store.insert(
                MemoryEntry(
                    id=f"e{index:03d}",
                    skr=SkrInstance(state=f"state {index}", actions=actions),
                    state_embedding=state_embedding,
                    action_embeddings={t: unit_vector(rng, dim) for t in actions},
                    provenance=(provenance_ref(f"e{index:03d}"),),
                )
            )
        query = unit_vector(rng, dim)
        k = int(rng.integers(1, 8))
        got_states = [entry.id for entry, _ in store.retrieve_by_state(query, k)]
        assert got_states == oracle_state_top_k(store, query, k)

        focus = set(rng.choice(techniques, size=3, replace=False))
        try:
            got_actions = [
                (entry.id, technique_id)
                for entry, technique_id, _ in store.retrieve_by_action(query, focus, k)
            ]
        except NoCoverageError:
            assert oracle_action_top_k(store, query, focus, k) == []
            continue
        assert got_actions == oracle_action_top_k(store, query, focus, k)
    report("4 retrieval equivalence", "200 stores, state+action, ties included")


# criterion 5 -----------------------------------------------------------------


def test_criterion_5a_append_only_updates(catalog, embedder):
    instance = parse_skr(C2_SUBDOMAIN_SKR_JSON)
    store = make_store(embedder, make_entry("m00001", instance, embedder))
    echo_texts = {
        "Communication with C2 using encoded subdomains": ("T1090",),
        "A commodity stealer archived browser credential databases for later pickup.": ("T1555",),
        "Communication with C2 using encoded subdomains again today": ("T1132",),
    }
    gateway = LlmGateway(chat=EchoOracleChatProvider(echo_texts), embedder=embedder, sleep=lambda _d: None)
    snapshot = {
        entry.id: (entry.skr.state, dict(entry.skr.actions)) for entry in store.entries()
    }
    for text, labels in echo_texts.items():
        update_memory(
            store,
            LabeledSentence(id=f"u-{labels[0]}", text=text, labels=frozenset(labels)),
            LifecycleConfig(),
            catalog,
            gateway,
        )
    for entry_id, (state, actions) in snapshot.items():
        entry = store.get(entry_id)
        assert entry.skr.state == state
        for technique_id, text in actions.items():
            assert entry.skr.actions[technique_id] == text, f"{entry_id}/{technique_id} mutated"
    report("5a append-only", f"{len(echo_texts)} updates, pre-existing texts byte-identical")


def test_criterion_5b_forgetting_fixture(embedder):
    entries = [
        make_entry("m00001", SkrInstance(state="s one", actions={"T1001": "w one"}), embedder, uses=10, hits=0),
        make_entry("m00002", SkrInstance(state="s two", actions={"T1003": "w two"}), embedder, uses=2, hits=0),
        make_entry("m00003", SkrInstance(state="s three", actions={"T1008": "w three"}), embedder, uses=10, hits=9),
    ]
    store = make_store(embedder, *entries)
    pruned = store.forget_pass(min_uses=5, utility_threshold=0.3)
    assert pruned == ["m00001"]
    assert {entry.id for entry in store.entries()} == {"m00002", "m00003"}
    report("5b forgetting", "(10,0) pruned; (2,0) and (10,9) retained")


def test_criterion_5c_memory_file_round_trip(fixtures_dir, catalog, tmp_path):
    from skrx.lifecycle import load_labeled_jsonl
    from skrx.memory import LogicalClock

    dataset = load_labeled_jsonl(fixtures_dir / "dataset_20.jsonl")
    echo = EchoOracleChatProvider.from_jsonl(str(fixtures_dir / "dataset_20.jsonl"))
    gateway = LlmGateway(chat=echo, embedder=HashingEmbedder(256), sleep=lambda _d: None)
    store, _ = initialize_memory(dataset, LifecycleConfig(), catalog, gateway, clock=LogicalClock())
    first = tmp_path / "first.jsonl"
    second = tmp_path / "second.jsonl"
    store.persist(first)
    MemoryStore.load(first).persist(second)
    assert first.read_bytes() == second.read_bytes()
    report("5c memory round-trip", "20-entry store byte-identical")


# criterion 6 -----------------------------------------------------------------


def adversarial_response(rng: random.Random) -> str:
    roll = rng.random()
    if roll < 0.25:
        ids = [f"T{rng.randint(1, 9999):04d}" for _ in range(rng.randint(1, 4))]
        return json.dumps({"techniques": ids, "rationale": "random ids"})
    if roll < 0.40:
        return json.dumps({"techniques": [rng.choice(["garbage", "attack", "1132", "T11", ""])], "rationale": "junk"})
    if roll < 0.55:
        return '{"techniques": ["T1132", '  # truncated JSON
    if roll < 0.70:
        return rng.choice(
            [
                "I cannot determine the techniques for this sentence.",
                "The answer is T1132 but I will not produce JSON.",
                "",
            ]
        )
    if roll < 0.85:
        return json.dumps({"techniques": "T1132"})  # wrong type
    return json.dumps({"wrong_key": ["T1132"]})


def test_criterion_6_pipeline_containment(catalog, embedder):
    instance = parse_skr(C2_SUBDOMAIN_SKR_JSON)
    rng = random.Random(99)
    emitted = 0
    failures = 0
    for index in range(500):
        raw = adversarial_response(rng)
        chat = ScriptedChatProvider(responses=[raw, raw])
        store = make_store(embedder, make_entry("m00001", instance, embedder))
        pipeline = ExtractionPipeline(
            store, LlmGateway(chat=chat, embedder=embedder, sleep=lambda _d: None), catalog
        )
        try:
            if index % 2 == 0:
                result = pipeline.stage1_classify("encoded subdomain beaconing observed")
            else:
                result = pipeline.stage2_verify("encoded subdomain beaconing observed", {"T1071"})
        except ExtractionError as exc:
            failures += 1
            assert exc.stage in ("stage1", "stage2")
            continue
        emitted += 1
        assert isinstance(result, Classification)
        assert result.technique_ids <= result.candidates_considered
        assert result.retrieved_entry_ids
        for entry_id in result.retrieved_entry_ids:
            assert entry_id in store
    assert emitted + failures == 500
    assert failures > 0 and emitted > 0
    report("6 containment", f"{emitted} contained classifications, {failures} typed failures")


# criterion 7 -----------------------------------------------------------------


def test_criterion_7_concurrency_determinism(tmp_path, fixtures_dir):
    ws = build_workspace(tmp_path / "ws", fixtures_dir)
    assert main(["memory", "init", *config_arg(ws)]) == 0
    input_path = write_extract_input(ws)
    out_1 = ws / "workers1.jsonl"
    out_8 = ws / "workers8.jsonl"
    assert (
        main(["extract", *config_arg(ws), "--input", str(input_path), "--output", str(out_1), "--workers", "1"])
        == 0
    )
    assert (
        main(["extract", *config_arg(ws), "--input", str(input_path), "--output", str(out_8), "--workers", "8"])
        == 0
    )
    assert out_1.read_bytes() == out_8.read_bytes()
    report("7 concurrency determinism", "worker_limit 1 vs 8 byte-identical")


# criterion 8 -----------------------------------------------------------------


def test_criterion_8_skr_format_fidelity():
    instance = parse_skr(C2_SUBDOMAIN_SKR_JSON)
    serialized = serialize_skr(instance)
    assert parse_skr(serialized) == instance
    document = json.loads(serialized)
    assert list(document.keys()) == ["state", "action"]
    assert '"state"' in serialized and '"action"' in serialized
    report("8 format fidelity", "round-trip with bit-exact state/action keys")


# criterion 9 (optional, network) ---------------------------------------------


@pytest.mark.skipif(
    "SKRX_LIVE_ENDPOINT" not in os.environ,
    reason="optional live smoke test; set SKRX_LIVE_ENDPOINT (and SKRX_LIVE_MODEL, SKRX_API_KEY) to run",
)
def test_criterion_9_live_smoke(tmp_path, fixtures_dir, catalog):
    """Indicative only: stage2 accuracy should not trail stage1 by more than 0.05."""
    from skrx.gateway import ChatParams, HttpChatProvider
    from skrx.lifecycle import load_labeled_jsonl

    dataset = load_labeled_jsonl(fixtures_dir / "dataset_20.jsonl")
    chat = HttpChatProvider(
        endpoint=os.environ["SKRX_LIVE_ENDPOINT"],
        model=os.environ.get("SKRX_LIVE_MODEL", "default"),
    )
    gateway = LlmGateway(chat=chat, embedder=HashingEmbedder(256), params=ChatParams(max_retries=2))
    store, init_report = initialize_memory(dataset, LifecycleConfig(), catalog, gateway)
    assert len(store) > 0, f"init produced nothing: {init_report.failures}"
    pipeline = ExtractionPipeline(store, gateway, catalog, PipelineConfig())

    samples = [EvalSample(id=s.id, text=s.text, gold=s.labels) for s in dataset]
    stage1_preds = {}
    stage2_preds = {}
    for sample in samples:
        try:
            stage1 = pipeline.stage1_classify(sample.text)
            stage2 = pipeline.stage2_verify(sample.text, stage1)
            stage1_preds[sample.id] = set(stage1.technique_ids)
            stage2_preds[sample.id] = set(stage2.technique_ids)
        except ExtractionError:
            stage1_preds[sample.id] = set()
            stage2_preds[sample.id] = set()
    acc1 = score(stage1_preds, samples, parent_resolution=True).accuracy
    acc2 = score(stage2_preds, samples, parent_resolution=True).accuracy
    assert acc2 >= acc1 - 0.05
    report("9 live smoke", f"stage1 acc {acc1:.2f}, stage2 acc {acc2:.2f}")
