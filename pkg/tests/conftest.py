from __future__ import annotations

import json
from pathlib import Path

import pytest

from skrx.catalog import load_catalog
from skrx.gateway import HashingEmbedder
from skrx.memory import MemoryEntry, MemoryStore, SourceSentenceRef, UsageStats
from skrx.skr import SkrInstance, parse_skr

FIXTURES = Path(__file__).parent / "fixtures"

# Canonical dual-layer example used across the suite: a C2-over-DNS scenario
# with four confusable techniques.
C2_SUBDOMAIN_SKR_JSON = """{
  "state": "Communication with C2 using encoded subdomains",
  "action": {
    "T1132": "Uses base32 encoding for subdomains to obfuscate C2 communication",
    "T1071": "Employs DNS as an application layer protocol for C2 communication",
    "T1001": "Involves data obfuscation techniques like AES ciphertext within subdomains",
    "T1008": "Indicates fallback to alternative protocols like HTTP if primary DNS fails"
  }
}"""


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def catalog():
    return load_catalog(FIXTURES / "catalog_small.json", "simplified-json", version="fixture-1")


@pytest.fixture(scope="session")
def embedder() -> HashingEmbedder:
    return HashingEmbedder(dim=256)


@pytest.fixture()
def c2_instance() -> SkrInstance:
    return parse_skr(C2_SUBDOMAIN_SKR_JSON)


def make_entry(
    entry_id: str,
    instance: SkrInstance,
    embedder: HashingEmbedder,
    uses: int = 0,
    hits: int = 0,
    sentence_text: str = "fixture sentence",
    created_at: float = 0.0,
) -> MemoryEntry:
    state_embedding = embedder.embed([instance.state])[0]
    keys = sorted(instance.actions)
    vectors = embedder.embed([instance.actions[key] for key in keys])
    return MemoryEntry(
        id=entry_id,
        skr=instance,
        state_embedding=state_embedding,
        action_embeddings=dict(zip(keys, vectors)),
        provenance=(
            SourceSentenceRef(
                dataset_id="fixture",
                sentence_id=f"{entry_id}-src",
                text=sentence_text,
                labels=frozenset(instance.actions),
            ),
        ),
        stats=UsageStats(uses=uses, hits=hits),
        created_at=created_at,
        updated_at=created_at,
    )


def make_store(embedder: HashingEmbedder, *entries: MemoryEntry) -> MemoryStore:
    store = MemoryStore(dim=embedder.dim, embedder_fingerprint=embedder.fingerprint)
    for entry in entries:
        store.insert(entry)
    return store


def load_fixture_dataset() -> list[dict]:
    return [
        json.loads(line)
        for line in (FIXTURES / "dataset_20.jsonl").read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
