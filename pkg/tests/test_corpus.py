"""Instance files, CoNLL-U and NER sidecars, and assembly into parsed instances."""

from __future__ import annotations

import json

import pytest

from pkre.corpus import (
    NO_RELATION,
    ROOT_HEAD,
    CorpusError,
    DependencyParse,
    EntityPairType,
    Instance,
    TokenCountMismatch,
    assemble,
    attach_parse,
    convert_refind_file,
    entity_pair_inventory,
    entity_pair_type,
    instance_to_record,
    load_dataset,
    read_conllu,
    read_ner_sidecar,
    refind_record_to_canonical,
    relation_labels,
)

from conftest import chain_parse, make_instance

RECORD = {
    "id": "r1",
    "tokens": ["Acme", "bought", "Beta"],
    "e1_start": 0,
    "e1_end": 1,
    "e1_type": "ORG",
    "e2_start": 2,
    "e2_end": 3,
    "e2_type": "ORG",
    "relation": "acquired_by",
}


def write_jsonl(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return path


def test_load_dataset_parses_canonical_records(tmp_path):
    path = write_jsonl(tmp_path / "train.jsonl", [RECORD])
    report = load_dataset(path, "train")
    assert not report.errors
    (instance,) = report.instances
    assert instance.id == "r1"
    assert instance.tokens == ("Acme", "bought", "Beta")
    assert instance.e1_span == (0, 1) and instance.e2_span == (2, 3)
    assert instance.gold_label == "acquired_by"
    assert instance.split == "train"
    assert instance.sentence == "Acme bought Beta"


def test_load_dataset_collects_malformed_records(tmp_path):
    bad = dict(RECORD, id="r2")
    del bad["e2_start"]
    good = dict(RECORD, id="r3")
    path = write_jsonl(tmp_path / "train.jsonl", [RECORD, bad, good])
    report = load_dataset(path, "train")
    assert [i.id for i in report] == ["r1", "r3"]
    assert len(report.errors) == 1
    assert report.errors[0].index == 1
    assert "e2_start" in report.errors[0].message


def test_load_dataset_skips_blank_lines(tmp_path):
    path = tmp_path / "train.jsonl"
    path.write_text(json.dumps(RECORD) + "\n\n   \n")
    assert len(load_dataset(path, "train")) == 1


def test_load_dataset_reports_duplicate_ids(tmp_path):
    path = write_jsonl(tmp_path / "t.jsonl", [RECORD, dict(RECORD)])
    report = load_dataset(path, "train")
    assert len(report) == 1
    assert "duplicate" in report.errors[0].message


def test_load_dataset_rejects_unknown_split(tmp_path):
    path = write_jsonl(tmp_path / "t.jsonl", [RECORD])
    with pytest.raises(ValueError, match="unknown split"):
        load_dataset(path, "validation")


def test_load_dataset_missing_file_raises():
    with pytest.raises(CorpusError, match="cannot read"):
        load_dataset("/nonexistent/file.jsonl", "train")


@pytest.mark.parametrize(
    "patch,needle",
    [
        ({"e1_start": 0, "e1_end": 0}, "out of range or empty"),
        ({"e1_start": 2, "e1_end": 1}, "out of range or empty"),
        ({"e2_start": 2, "e2_end": 9}, "out of range or empty"),
        ({"e1_start": "0"}, "integers"),
        ({"e1_start": 0, "e1_end": 3, "e2_start": 2, "e2_end": 3}, "overlap"),
        ({"tokens": []}, "non-empty list"),
        ({"tokens": ["a", 3]}, "non-empty list"),
        ({"relation": ""}, "non-empty string"),
        ({"id": 7}, "non-empty string"),
    ],
)
def test_load_dataset_validates_records(tmp_path, patch, needle):
    path = write_jsonl(tmp_path / "t.jsonl", [dict(RECORD, **patch)])
    report = load_dataset(path, "train")
    assert not report.instances
    assert needle in report.errors[0].message


def test_instance_to_record_inverts_loading(tmp_path):
    path = write_jsonl(tmp_path / "t.jsonl", [RECORD])
    (instance,) = load_dataset(path, "train").instances
    assert instance_to_record(instance) == RECORD


CONLLU = """\
# sent_id = r1
# text = Acme bought Beta
1\tAcme\tAcme\tPROPN\tNNP\t_\t2\tnsubj\t_\t_
2\tbought\tbuy\tVERB\tVBD\t_\t0\troot\t_\t_
3\tBeta\tBeta\tPROPN\tNNP\t_\t2\tobj\t_\t_

# sent_id = r2
1-2\tdel monte\t_\t_\t_\t_\t_\t_\t_\t_
1\tdel\tdel\tX\t_\t_\t2\tcompound\t_\t_
2\tmonte\tmonte\tX\t_\t_\t0\troot\t_\t_
2.1\telided\t_\t_\t_\t_\t_\t_\t_\t_
"""


def test_read_conllu_sentences_and_indexing(tmp_path):
    path = tmp_path / "parses.conllu"
    path.write_text(CONLLU)
    parses = read_conllu(path)
    assert set(parses) == {"r1", "r2"}
    assert parses["r1"].heads == (1, ROOT_HEAD, 1)
    assert parses["r1"].labels == ("nsubj", "root", "obj")
    # the range line and the empty node are skipped, real tokens kept
    assert parses["r2"].heads == (1, ROOT_HEAD)
    assert parses["r2"].labels == ("compound", "root")


@pytest.mark.parametrize(
    "text,needle",
    [
        ("# sent_id = a\n1\tx\t_\t_\t_\t_\t1\tr\t_\t_\n\n# sent_id = a\n1\ty\t_\t_\t_\t_\t1\tr\t_\t_\n", "duplicate"),
        ("1\tx\t_\t_\t_\t_\t1\tr\t_\t_\n", "without a sent_id"),
        ("# sent_id = a\n1\tx\t_\t_\t_\t_\tZ\tr\t_\t_\n", "non-integer HEAD"),
        ("# sent_id = a\n1\tx\t_\n", ">=8"),
    ],
)
def test_read_conllu_rejects_malformed_files(tmp_path, text, needle):
    path = tmp_path / "bad.conllu"
    path.write_text(text)
    with pytest.raises(CorpusError, match=needle):
        read_conllu(path)


def test_read_ner_sidecar(tmp_path):
    path = tmp_path / "ner.jsonl"
    path.write_text(
        json.dumps({"id": "r1", "tags": [None, "GPE", None]})
        + "\n"
        + json.dumps({"id": "r2", "tags": ["DATE"]})
        + "\n"
    )
    tags = read_ner_sidecar(path)
    assert tags["r1"] == (None, "GPE", None)
    assert tags["r2"] == ("DATE",)


@pytest.mark.parametrize("line", ['{"id": "x"}', '{"id": "x", "tags": [1]}', "not json"])
def test_read_ner_sidecar_rejects_malformed(tmp_path, line):
    path = tmp_path / "ner.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(CorpusError):
        read_ner_sidecar(path)


def test_attach_parse_happy_path():
    instance = make_instance()
    parsed = attach_parse(instance, chain_parse(3), ner=[None, None, "ORG"])
    assert not parsed.parse_failed
    assert parsed.ner == (None, None, "ORG")
    assert parsed.id == instance.id


def test_attach_parse_token_count_mismatch():
    with pytest.raises(TokenCountMismatch, match="parse has 4 tokens"):
        attach_parse(make_instance(), chain_parse(4))


def test_attach_parse_ner_length_mismatch():
    with pytest.raises(CorpusError, match="NER annotation"):
        attach_parse(make_instance(), chain_parse(3), ner=[None])


def test_attach_parse_tolerates_broken_tree():
    cyclic = DependencyParse((1, 0, ROOT_HEAD), ("a", "b", "c"))
    parsed = attach_parse(make_instance(), cyclic)
    assert parsed.parse_failed
    assert parsed.parse is cyclic  # kept for inspection, never used for paths


@pytest.mark.parametrize(
    "heads,expect",
    [
        ((1, 2, ROOT_HEAD), True),
        ((ROOT_HEAD,), True),
        ((ROOT_HEAD, ROOT_HEAD), False),  # forest
        ((1, 0, ROOT_HEAD), False),  # cycle off the root
        ((ROOT_HEAD, 9), False),  # head out of range
        ((), False),
        ((0,), False),  # self-loop, no root
    ],
)
def test_is_tree(heads, expect):
    parse = DependencyParse(tuple(heads), ("l",) * len(heads))
    assert parse.is_tree() is expect


def test_dependency_parse_requires_aligned_labels():
    with pytest.raises(CorpusError, match="equal length"):
        DependencyParse((ROOT_HEAD,), ("a", "b"))


def test_assemble_routes_and_reports():
    ok = make_instance("ok")
    missing = make_instance("missing")
    drift = make_instance("drift")
    ner_bad = make_instance("nerbad")
    parses = {"ok": chain_parse(3), "drift": chain_parse(5), "nerbad": chain_parse(3)}
    ner = {"nerbad": (None,)}
    parsed, issues = assemble([ok, missing, drift, ner_bad], parses, ner)
    by_id = {p.id: p for p in parsed}
    assert not by_id["ok"].parse_failed
    assert by_id["missing"].parse_failed and by_id["missing"].parse is None
    assert by_id["drift"].parse_failed
    assert by_id["nerbad"].ner is None and not by_id["nerbad"].parse_failed
    assert len(issues) == 3
    assert any("no parse" in i for i in issues)
    assert any("parse has 5 tokens" in i for i in issues)
    assert any("tags dropped" in i for i in issues)


def test_entity_pair_type_ordering():
    instance = make_instance(e1_type="PER", e2_type="ORG")
    assert entity_pair_type(instance) == EntityPairType("PER", "ORG")
    assert entity_pair_type(instance, unordered=True) == EntityPairType("ORG", "PER")
    assert str(entity_pair_type(instance)) == "PER-ORG"


def test_entity_pair_inventory_sorted_unique():
    instances = [
        make_instance("a", e1_type="PER", e2_type="ORG"),
        make_instance("b", e1_type="PER", e2_type="ORG"),
        make_instance("c", e1_type="GPE", e2_type="ORG"),
    ]
    assert entity_pair_inventory(instances) == (
        EntityPairType("GPE", "ORG"),
        EntityPairType("PER", "ORG"),
    )


def test_relation_labels_excludes_no_relation_by_default():
    instances = [
        make_instance("a", label="acquired_by"),
        make_instance("b", label=NO_RELATION),
    ]
    assert relation_labels(instances) == ("acquired_by",)
    assert relation_labels(instances, include_no_relation=True) == (
        "acquired_by",
        NO_RELATION,
    )


def test_refind_record_adapter():
    raw = dict(RECORD, id=17)
    raw["token"] = raw.pop("tokens")
    record = refind_record_to_canonical(raw)
    assert record["id"] == "17"
    assert record["tokens"] == RECORD["tokens"]
    with pytest.raises(ValueError, match="token list"):
        refind_record_to_canonical({"id": 1, "relation": "x"})
    with pytest.raises(ValueError, match="e1_end"):
        refind_record_to_canonical({"id": 1, "token": ["a"], "e1_start": 0})


def test_convert_refind_file_produces_loadable_corpus(tmp_path):
    raw = dict(RECORD, id=5)
    raw["token"] = raw.pop("tokens")
    src = tmp_path / "raw.jsonl"
    src.write_text(json.dumps(raw) + "\n\n")
    dst = tmp_path / "canonical.jsonl"
    assert convert_refind_file(src, dst) == 1
    report = load_dataset(dst, "train")
    assert not report.errors
    assert report.instances[0].id == "5"
