from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from skrx.catalog import (
    Catalog,
    TechniqueRecord,
    is_subtechnique,
    load_catalog,
    normalize_id,
    resolve_parent,
    validate_id,
)
from skrx.errors import (
    CatalogIntegrityError,
    CatalogParseError,
    TechniqueIdError,
    UnknownTechniqueError,
)

valid_ids = st.one_of(
    st.from_regex(r"T\d{4}", fullmatch=True),
    st.from_regex(r"T\d{4}\.\d{3}", fullmatch=True),
)


def test_normalize_trims_and_uppercases():
    assert normalize_id(" t1132 ") == "T1132"


@pytest.mark.parametrize("raw", ["1132", "T113", "T11320", "T1132.1", "T1132.0001", "TA0001", "", "T1132 .001"])
def test_grammar_rejects(raw):
    with pytest.raises(TechniqueIdError):
        normalize_id(raw)


def test_resolve_parent_strips_subtechnique():
    assert resolve_parent("T1003.001") == "T1003"


def test_resolve_parent_identity_on_parent():
    assert resolve_parent("T1003") == "T1003"


@given(valid_ids)
def test_resolve_parent_idempotent(technique_id):
    once = resolve_parent(technique_id)
    assert resolve_parent(once) == once


@given(valid_ids)
def test_resolve_parent_total_and_parent_level(technique_id):
    parent = resolve_parent(technique_id)
    assert not is_subtechnique(parent)


def test_simplified_load_links_parent(tmp_path):
    path = tmp_path / "cat.json"
    path.write_text(
        json.dumps(
            [
                {"id": "T1003", "name": "OS Credential Dumping", "description": "dumping"},
                {"id": "T1003.001", "name": "LSASS Memory", "description": "lsass"},
            ]
        )
    )
    catalog = load_catalog(path, "simplified-json")
    assert len(catalog) == 2
    assert catalog.require("T1003.001").parent == "T1003"
    assert catalog.require("T1003").parent is None


def test_orphan_subtechnique_is_integrity_error(tmp_path):
    path = tmp_path / "cat.json"
    path.write_text(json.dumps([{"id": "T1566.001", "name": "Spearphishing Attachment", "description": "x"}]))
    with pytest.raises(CatalogIntegrityError) as excinfo:
        load_catalog(path, "simplified-json")
    assert "T1566.001" in str(excinfo.value)
    assert excinfo.value.offending_ids == ["T1566.001"]


def test_stix_bundle_extracts_attack_patterns(fixtures_dir):
    catalog = load_catalog(fixtures_dir / "stix_mini.json", "stix-bundle")
    assert catalog.require("T1132").name == "Data Encoding"
    assert catalog.require("T1071").name == "Application Layer Protocol"
    assert catalog.require("T1071.004").parent == "T1071"
    assert catalog.require("T1061").deprecated is True
    assert catalog.version == "15.1"


def test_stix_deprecated_retained_not_dropped(fixtures_dir):
    catalog = load_catalog(fixtures_dir / "stix_mini.json", "stix-bundle")
    assert "T1061" in catalog


def test_load_is_deterministic(fixtures_dir):
    first = load_catalog(fixtures_dir / "catalog_small.json", "simplified-json")
    second = load_catalog(fixtures_dir / "catalog_small.json", "simplified-json")
    assert first.ids() == second.ids()
    assert [first.require(i) for i in first.ids()] == [second.require(i) for i in second.ids()]


def test_every_loaded_subtechnique_parent_resolves_into_catalog(catalog):
    for record in catalog:
        if is_subtechnique(record.id):
            assert resolve_parent(record.id) in catalog


def test_malformed_file_is_parse_error(tmp_path):
    path = tmp_path / "cat.json"
    path.write_text("{not json")
    with pytest.raises(CatalogParseError):
        load_catalog(path, "simplified-json")


def test_missing_file_is_parse_error(tmp_path):
    with pytest.raises(CatalogParseError):
        load_catalog(tmp_path / "nope.json", "simplified-json")


def test_unknown_format_rejected(fixtures_dir):
    with pytest.raises(CatalogParseError):
        load_catalog(fixtures_dir / "catalog_small.json", "yaml")


def test_duplicate_ids_rejected(tmp_path):
    path = tmp_path / "cat.json"
    path.write_text(
        json.dumps(
            [
                {"id": "T1003", "name": "a", "description": "x"},
                {"id": "t1003", "name": "b", "description": "y"},
            ]
        )
    )
    with pytest.raises(CatalogParseError):
        load_catalog(path, "simplified-json")


def test_validate_id_normalizes_in_strict_mode(catalog):
    assert validate_id(" t1132 ", catalog, strict=True) == "T1132"


def test_validate_id_unknown_in_strict_mode(catalog):
    with pytest.raises(UnknownTechniqueError):
        validate_id("T9999", catalog, strict=True)


def test_validate_id_grammar_error():
    with pytest.raises(TechniqueIdError):
        validate_id("1132")


def test_validate_id_lenient_allows_unknown(catalog):
    assert validate_id("T9999") == "T9999"


def test_empty_description_rejected_for_active_records():
    with pytest.raises(CatalogIntegrityError):
        TechniqueRecord(id="T1003", name="x", description="   ")


def test_empty_description_tolerated_for_deprecated():
    record = TechniqueRecord(id="T1003", name="x", description="", deprecated=True)
    assert record.deprecated


def test_catalog_rejects_orphan_at_construction():
    record = TechniqueRecord(id="T1003.001", name="x", description="y")
    with pytest.raises(CatalogIntegrityError):
        Catalog({record.id: record})
