import json

import pytest

from py_skeb.components.corpus_graph import Gazetteer
from py_skeb.components.gateway import MockGateway
from py_skeb.components.prompts import (
    TECHNIQUES,
    PromptRecord,
    VariantCache,
    annotate_entities,
    canonical_technique,
    check_content_preservation,
    load_base_prompts,
    load_prompts,
    load_templates,
    save_prompts,
    transform_prompt,
    transform_prompts,
)
from py_skeb.utility.exceptions import DuplicateId, EmptyTransform, FormatError, GatewayError


def _write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def bases(synthetic_dir):
    return load_base_prompts(synthetic_dir / "base_prompts.jsonl")


@pytest.fixture
def gateway(synthetic_dir):
    return MockGateway.from_fixtures(synthetic_dir / "mock_gateway.json")


def test_load_base_prompts(bases):
    assert [r.id for r in bases] == ["q1", "q2", "q3"]
    assert all(r.variant == "orig" and r.base_id == r.id for r in bases)
    assert bases[0].target_entities == frozenset({0, 5})


def test_load_duplicate_id(tmp_path):
    path = _write_lines(tmp_path / "p.jsonl", ['{"id": "a", "text": "x"}', '{"id": "a", "text": "y"}'])
    with pytest.raises(DuplicateId):
        load_base_prompts(path)


def test_load_malformed_line(tmp_path):
    path = _write_lines(tmp_path / "p.jsonl", ['{"id": "a", "text": "x"}', "", '{"id": "b", "text": '])
    with pytest.raises(FormatError) as info:
        load_prompts(path)
    assert info.value.line == 3


def test_load_record_without_text(tmp_path):
    path = _write_lines(tmp_path / "p.jsonl", ['{"id": "a"}'])
    with pytest.raises(FormatError) as info:
        load_prompts(path)
    assert info.value.line == 1


def test_record_invariants():
    with pytest.raises(ValueError):
        PromptRecord("a", "b", "orig", "text")
    with pytest.raises(ValueError):
        PromptRecord("a::x", "a", "sarcastic", "text")


def test_canonical_technique():
    assert canonical_technique("emo") == "emotional"
    assert canonical_technique("logic") == "logical"
    assert canonical_technique("authority") == "authority"
    with pytest.raises(ValueError):
        canonical_technique("orig")
    with pytest.raises(ValueError):
        canonical_technique("flattery")


def test_bundled_templates():
    templates = load_templates()
    assert set(templates) == set(TECHNIQUES)
    for text, digest in templates.values():
        assert "{prompt}" in text
        assert len(digest) == 64


def test_template_without_placeholder(tmp_path):
    (tmp_path / "emotional.txt").write_text("No placeholder here.", encoding="utf-8")
    with pytest.raises(FormatError):
        load_templates(tmp_path, ["emotional"])


def test_transform_prompt_uses_fixture(bases, gateway):
    variant = transform_prompt(bases[0], "emo", gateway)
    assert variant.id == "q1::emotional"
    assert variant.base_id == "q1"
    assert variant.variant == "emotional"
    assert variant.text.startswith("Watching Harry Potter fly at Hogwarts")
    assert variant.target_entities == bases[0].target_entities
    assert variant.provenance["model"] == "gpt-4o-mini"
    assert variant.provenance["template_sha256"] == load_templates()["emotional"][1]


def test_transform_rejects_orig(bases, gateway):
    with pytest.raises(ValueError):
        transform_prompt(bases[0], "orig", gateway)


def test_transform_empty_rewrite(bases):
    gw = MockGateway([{"model": "*", "response_text": "   "}])
    with pytest.raises(EmptyTransform):
        transform_prompt(bases[0], "logical", gw)


def test_transform_gateway_failure(bases):
    with pytest.raises(GatewayError):
        transform_prompt(bases[0], "logical", MockGateway([]))


def test_transform_cache_avoids_calls(tmp_path, bases, gateway):
    cache = VariantCache(tmp_path / "cache.json")
    first = transform_prompt(bases[1], "auth", gateway, cache=cache)
    cache.save()
    reloaded = VariantCache(tmp_path / "cache.json")
    # a gateway without fixtures would fail if it were asked
    again = transform_prompt(bases[1], "auth", MockGateway([]), cache=reloaded)
    assert again == first
    assert len(gateway.log.records) == 1


def test_cache_key_depends_on_template(tmp_path, bases, gateway):
    cache = VariantCache()
    transform_prompt(bases[1], "auth", gateway, cache=cache)
    edited = {"authority": ("Rewrite the question with an appeal to authority, briefly. {prompt}", "other")}
    # the edited template misses the cached entry and still matches the fixture rule
    transform_prompt(bases[1], "auth", gateway, templates=edited, cache=cache)
    assert len(cache.entries) == 2


def test_transform_prompts_layout(bases, gateway):
    records = transform_prompts(bases, ["emo", "logic", "auth"], gateway)
    assert len(records) == 12
    assert [r.id for r in records[:4]] == ["q1", "q1::emotional", "q1::logical", "q1::authority"]


def test_transform_prompts_threaded_matches_serial(bases, synthetic_dir):
    serial = transform_prompts(bases, TECHNIQUES, MockGateway.from_fixtures(synthetic_dir / "mock_gateway.json"))
    threaded = transform_prompts(
        bases, TECHNIQUES, MockGateway.from_fixtures(synthetic_dir / "mock_gateway.json"), n_jobs=3
    )
    assert serial == threaded


def test_annotate(bases, synthetic_dir):
    gaz = Gazetteer.load(synthetic_dir / "gazetteer.json")
    rec = annotate_entities(bases[1], gaz)
    assert rec.entities == frozenset({1, 6})
    assert annotate_entities(rec, gaz) == rec
    none = annotate_entities(PromptRecord("z", "z", "orig", "What is the weather like?"), gaz)
    assert none.entities == frozenset()


def test_content_preservation(bases, gateway, synthetic_dir):
    gaz = Gazetteer.load(synthetic_dir / "gazetteer.json")
    records = [annotate_entities(r, gaz) for r in transform_prompts(bases, TECHNIQUES, gateway)]
    assert check_content_preservation(records) == []

    dropped = PromptRecord("q1::logical", "q1", "logical", "What position did he play?", target_entities={0, 5})
    orphan = PromptRecord("q9::emotional", "q9", "emotional", "Hogwarts?")
    problems = check_content_preservation([records[0], annotate_entities(dropped, gaz), orphan])
    assert [p["problem"] for p in problems] == ["missing_targets", "missing_base"]
    assert problems[0]["missing"] == [0, 5]


def test_save_and_reload(tmp_path, bases):
    path = tmp_path / "out.jsonl"
    save_prompts(bases, path)
    assert load_prompts(path) == bases
    first = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
    assert first["target_entities"] == [0, 5]
