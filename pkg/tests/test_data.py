import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvlm.data import (
    ATTRIBUTES,
    SEP,
    SPECIALS,
    Tokenizer,
    caption_text,
    gen_world,
    knowledge_text,
    load_jsonl_instructions,
    load_jsonl_pairs,
    make_caption_pairs,
    make_host_corpus,
    make_instruction_set,
    make_knowledge_pairs,
    pixel_digest,
    read_manifest,
    render_image,
    save_jsonl_instructions,
    save_jsonl_pairs,
    world_tokenizer,
    write_manifest,
)
from cvlm.errors import CapacityError, ParseError


@pytest.fixture(scope="module")
def world():
    return gen_world(0, 16)


def test_world_is_deterministic_and_distinct():
    a, b = gen_world(3, 32), gen_world(3, 32)
    assert a.entities == b.entities
    tuples = {tuple(e.attributes.values()) for e in a.entities}
    assert len(tuples) == 32
    assert gen_world(4, 32).entities != a.entities


def test_world_capacity_error():
    with pytest.raises(CapacityError):
        gen_world(0, 5, {"maker": 1, "origin": 1, "category": 2, "name": 2})
    with pytest.raises(CapacityError):
        gen_world(0, 1, {"maker": 0, "origin": 1, "category": 1, "name": 1})


def test_tokenizer_round_trip(world):
    tok = world_tokenizer(world)
    assert tok.vocab[:4] == list(SPECIALS)
    text = "who is the maker of this object?"
    assert tok.decode(tok.encode(text)) == text
    for e in world.entities:
        assert tok.decode(tok.encode(knowledge_text(e))) == knowledge_text(e)
    with pytest.raises(KeyError):
        tok.encode("zeppelin")


def test_tokenizer_from_vocab(world):
    tok = world_tokenizer(world)
    assert Tokenizer.from_vocab(tok.vocab).vocab == tok.vocab
    with pytest.raises(ValueError):
        Tokenizer.from_vocab(["a", "b"])


def test_render_is_pure_and_in_range(world):
    e = world.entities[0]
    a = render_image(e, 7, world)
    b = render_image(e, 7, world)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert a.pixels.shape == (32, 32, 3)
    assert a.pixels.min() >= 0 and a.pixels.max() <= 1
    assert pixel_digest(render_image(e, 8, world)) != pixel_digest(a)


def test_entity_glyph_is_at_full_intensity(world):
    img = render_image(world.entities[2], 1, world)
    assert (img.pixels == 1.0).any()


def test_instruction_splits_are_disjoint(world):
    s = make_instruction_set(world, split_seed=1, layouts_per_combo=2)
    digests = [{pixel_digest(x.image) for x in part} for part in (s.train, s.held_in, s.held_out)]
    assert not (digests[0] & digests[1] or digests[0] & digests[2] or digests[1] & digests[2])
    train_combos = {(x.entity_id, x.category) for x in s.train}
    assert {(x.entity_id, x.category) for x in s.held_in} <= train_combos
    assert not {(x.entity_id, x.category) for x in s.held_out} & train_combos
    for x in s.train:
        assert x.answer == world.entities[x.entity_id].attribute(x.category)
    assert len(s.train) == 2 * len(s.held_in)


def test_caption_and_knowledge_pairs(world):
    kp = make_knowledge_pairs(world, 2)
    cp = make_caption_pairs(world, 2)
    assert len(kp) == len(cp) == 32
    assert cp[3].knowledge == caption_text(world.entities[1])
    np.testing.assert_array_equal(cp[3].image.pixels, kp[3].image.pixels)


def test_host_corpus_avoids_world_entities(world):
    lines = make_host_corpus(world, 200, seed=2)
    tok = world_tokenizer(world)
    facts = {knowledge_text(e) for e in world.entities}
    for line in lines:
        fact, rest = line.split(f" {SEP} ")
        assert fact not in facts
        tok.encode(line)
    assert make_host_corpus(world, 200, seed=2) == lines
    kinds = {"?" in line for line in lines}
    assert kinds == {True, False}  # both copy lines and question lines


def test_host_corpus_avoids_every_listed_world():
    worlds = [gen_world(s, 64) for s in range(3)]
    facts = {knowledge_text(e) for w in worlds for e in w.entities}
    for line in make_host_corpus(worlds, 300):
        assert line.split(f" {SEP} ")[0] not in facts
    with pytest.raises(CapacityError):
        make_host_corpus([worlds[0], gen_world(0, 4, {**worlds[0].vocab_sizes, "name": 8})], 1)


def test_host_corpus_capacity():
    tiny = gen_world(0, 2, {"maker": 1, "origin": 1, "category": 1, "name": 2})
    with pytest.raises(CapacityError):
        make_host_corpus(tiny, 1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(4, 24))
def test_world_attributes_within_vocab(seed, n):
    w = gen_world(seed, n)
    vocab = w.vocabularies()
    for e in w.entities:
        for k in ATTRIBUTES:
            assert e.attribute(k) in vocab[k]


# --------------------------------------------------------------------- JSONL

def test_jsonl_round_trip(tmp_path, world):
    pairs = make_knowledge_pairs(world)[:3]
    save_jsonl_pairs(pairs, tmp_path / "k.jsonl")
    back = load_jsonl_pairs(tmp_path / "k.jsonl")
    assert [p.knowledge for p in back] == [p.knowledge for p in pairs]
    np.testing.assert_allclose(back[0].image.pixels, pairs[0].image.pixels, atol=1e-7)

    samples = make_instruction_set(world, layouts_per_combo=1).train[:3]
    save_jsonl_instructions(samples, tmp_path / "i.jsonl")
    back = load_jsonl_instructions(tmp_path / "i.jsonl")
    assert [(s.question, s.answer, s.category) for s in back] == \
        [(s.question, s.answer, s.category) for s in samples]


@pytest.mark.parametrize("line, msg", [
    ("{not json", "invalid JSON"),
    ("[1, 2]", "expected a JSON object"),
    ('{"image": "x"}', "missing field 'knowledge'"),
    ('{"image": "x", "knowledge": 3}', "must be a string"),
    ('{"image": "missing.img", "knowledge": "a"}', "bad image"),
])
def test_jsonl_errors_name_the_line(tmp_path, line, msg):
    path = tmp_path / "bad.jsonl"
    path.write_text("\n" + line + "\n")
    with pytest.raises(ParseError, match=f"line 2: .*{msg}"):
        load_jsonl_pairs(path)


def test_manifest_round_trip(tmp_path):
    write_manifest(tmp_path / "m.json", 3, {"train": "train.jsonl"}, vocab=["<s>"])
    m = read_manifest(tmp_path / "m.json")
    assert m == {"world_seed": 3, "splits": {"train": "train.jsonl"}, "vocab": ["<s>"]}
    assert json.loads((tmp_path / "m.json").read_text())["world_seed"] == 3
