"""Synthetic knowledge world, word tokenizer and JSONL ingestion.

Entities carry four attributes drawn from closed vocabularies and a fixed
8x8 colour glyph. Images place the entity's glyph in one quadrant at full
intensity and optional dimmer distractor glyphs elsewhere, so the entity is
always recoverable from pixels.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ParseError
from .vision import IMG_MAGIC, ImageGrid, image_from_bytes, image_to_bytes, load_image

BOS, EOS, PAD, SEP = "<s>", "</s>", "<pad>", "<sep>"
SPECIALS = (BOS, EOS, PAD, SEP)
KNOWLEDGE_PROMPT = "<s> the associating knowledge of this image"

ATTRIBUTES = ("maker", "origin", "category", "name")

VOCABULARIES = {
    "maker": ["acme", "borealis", "cygnus", "dunmore", "elkhart", "fennec", "galloway", "halden",
              "ironwood", "juniper", "kestrell", "lumen", "meridian", "northam", "orwell",
              "pemberton"],
    "origin": ["norland", "austral", "calvera", "dorne", "eskar", "farrow", "gallia", "hesper",
               "ilmar", "jutra", "kalos", "lorien", "mirren", "novar", "ostra", "pellin"],
    "category": ["plane", "car", "ship", "train", "bike", "boat", "truck", "rocket"],
    "name": ["kestrel", "falcon", "heron", "osprey", "swift", "raven", "condor", "merlin",
             "harrier", "kite", "petrel", "tern", "plover", "egret", "ibis", "gannet", "shrike",
             "lark", "finch", "wren", "robin", "starling", "pipit", "curlew", "dunlin", "avocet",
             "bittern", "crake", "dipper", "eider", "fulmar", "godwit"],
}

QUESTION_TEMPLATES = {
    "maker": "who is the maker of this object?",
    "origin": "where does this object come from?",
    "category": "what is this object?",
    "name": "what is the name of this object?",
}

GLYPH = 8
MAIN_INTENSITY = 1.0
DISTRACTOR_INTENSITY = 0.375
BACKGROUND = 0.0625


@dataclass(frozen=True)
class Entity:
    id: int
    maker: str
    origin: str
    category: str
    name: str
    glyph_seed: int

    def attribute(self, key):
        return getattr(self, key)

    @property
    def attributes(self):
        return {k: getattr(self, k) for k in ATTRIBUTES}


@dataclass
class World:
    seed: int
    entities: list
    vocab_sizes: dict

    def __len__(self):
        return len(self.entities)

    def vocabularies(self):
        return {k: VOCABULARIES[k][:n] for k, n in self.vocab_sizes.items()}


@dataclass
class KnowledgePair:
    image: ImageGrid
    knowledge: str


@dataclass
class InstructionSample:
    image: ImageGrid
    question: str
    answer: str
    category: str
    entity_id: int = -1
    meta: dict = field(default_factory=dict)


@dataclass
class InstructionSplits:
    train: list
    held_in: list
    held_out: list


# ---------------------------------------------------------------- tokenizer

_WORD = re.compile(r"<[^>\s]+>|[^\s?]+|\?")


class Tokenizer:
    """Closed word-level vocabulary; unknown words are an error.

    Text is lower-cased and split on whitespace, with ``?`` as its own token.
    """

    def __init__(self, words):
        vocab = list(SPECIALS)
        for w in words:
            if w not in vocab:
                vocab.append(w)
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}

    @classmethod
    def from_texts(cls, texts):
        words = []
        seen = set()
        for t in texts:
            for w in _WORD.findall(t.lower()):
                if w not in seen:
                    seen.add(w)
                    words.append(w)
        return cls(words)

    @classmethod
    def from_vocab(cls, vocab):
        """Rebuild from a stored vocabulary list (specials first)."""
        vocab = list(vocab)
        if tuple(vocab[:len(SPECIALS)]) != SPECIALS or len(set(vocab)) != len(vocab):
            raise ValueError("vocabulary must start with the special tokens and be unique")
        return cls(vocab[len(SPECIALS):])

    @property
    def bos(self):
        return self.index[BOS]

    @property
    def eos(self):
        return self.index[EOS]

    @property
    def pad(self):
        return self.index[PAD]

    def __len__(self):
        return len(self.vocab)

    def tokenize(self, text):
        return _WORD.findall(text.lower())

    def encode(self, text):
        ids = []
        for w in self.tokenize(text):
            if w not in self.index:
                raise KeyError(f"word {w!r} is not in the closed vocabulary")
            ids.append(self.index[w])
        return ids

    def decode(self, ids):
        out = []
        for i in ids:
            w = self.vocab[int(i)]
            if w == "?" and out:
                out[-1] += "?"
            else:
                out.append(w)
        return " ".join(out)


def world_tokenizer(world=None, vocab_sizes=None):
    """Vocabulary covering prompt, templates, captions and every declared attribute value."""
    sizes = world.vocab_sizes if world is not None else vocab_sizes
    texts = [KNOWLEDGE_PROMPT, "the is made by from a object"]
    texts += list(QUESTION_TEMPLATES.values())
    for key in ATTRIBUTES:
        texts.append(" ".join(VOCABULARIES[key][:sizes[key]]))
    return Tokenizer.from_texts(texts)


def normalize(text):
    return " ".join(text.split())


# ------------------------------------------------------------------- world

DEFAULT_VOCAB_SIZES = {"maker": 8, "origin": 8, "category": 4, "name": 16}


def gen_world(seed, n_entities, vocab_sizes=None):
    """Sample ``n_entities`` entities with distinct attribute tuples."""
    sizes = dict(DEFAULT_VOCAB_SIZES if vocab_sizes is None else vocab_sizes)
    for key in ATTRIBUTES:
        if not 1 <= sizes[key] <= len(VOCABULARIES[key]):
            raise CapacityError(f"vocabulary size for {key!r} must be in "
                                f"[1, {len(VOCABULARIES[key])}]")
    dims = tuple(sizes[k] for k in ATTRIBUTES)
    capacity = int(np.prod(dims))
    if n_entities < 1 or n_entities > capacity:
        raise CapacityError(f"cannot place {n_entities} distinct entities in "
                            f"{capacity} attribute combinations")
    rng = np.random.default_rng([seed, 0])
    flat = rng.choice(capacity, size=n_entities, replace=False)
    entities = []
    glyphs = set()
    for i, idx in enumerate(flat):
        combo = np.unravel_index(int(idx), dims)
        values = {k: VOCABULARIES[k][int(c)] for k, c in zip(ATTRIBUTES, combo)}
        glyph_seed = seed * 1_000_003 + i
        key = glyph_pattern(glyph_seed).tobytes()
        if key in glyphs:  # astronomically unlikely with 192 random bits
            raise CapacityError(f"glyph collision for entity {i}")
        glyphs.add(key)
        entities.append(Entity(id=i, glyph_seed=glyph_seed, **values))
    return World(seed=seed, entities=entities, vocab_sizes=sizes)


def glyph_pattern(glyph_seed):
    """Binary ``[8, 8, 3]`` pattern, a pure function of ``glyph_seed``."""
    rng = np.random.default_rng([glyph_seed, 1])
    bits = rng.random((GLYPH, GLYPH, 3)) < 0.5
    bits[GLYPH // 2, GLYPH // 2, :] = True  # never blank
    return bits


def knowledge_text(entity):
    return _fact_text(entity.attributes)


def _fact_text(values):
    return (f"the {values['category']} {values['name']} is made by {values['maker']} "
            f"from {values['origin']}")


def make_host_corpus(world, n_samples, seed=0):
    """Text-only reading-comprehension corpus for pretraining the host LM.

    Each line states a fact about a random attribute tuple that is *not* one
    of the world's entities, then either repeats it after ``<sep>`` or asks a
    question about it and gives the answer. The host learns to read facts
    from its context without ever seeing the world's own facts.

    ``world`` may also be a list of worlds sharing one vocabulary; the
    corpus then avoids the entities of all of them.
    """
    worlds = [world] if isinstance(world, World) else list(world)
    vocab = worlds[0].vocabularies()
    if any(w.vocab_sizes != worlds[0].vocab_sizes for w in worlds):
        raise CapacityError("worlds for one host corpus must share vocabulary sizes")
    taken = {tuple(e.attributes[k] for k in ATTRIBUTES) for w in worlds for e in w.entities}
    capacity = int(np.prod([len(vocab[k]) for k in ATTRIBUTES]))
    if capacity <= len(taken):
        raise CapacityError("no attribute tuples left outside the world for the host corpus")
    rng = np.random.default_rng([seed, 5])
    out = []
    while len(out) < n_samples:
        values = {k: vocab[k][int(rng.integers(len(vocab[k])))] for k in ATTRIBUTES}
        if tuple(values[k] for k in ATTRIBUTES) in taken:
            continue
        fact = _fact_text(values)
        if rng.random() < 0.5:
            out.append(f"{fact} {SEP} {fact}")
        else:
            cat = ATTRIBUTES[int(rng.integers(len(ATTRIBUTES)))]
            out.append(f"{fact} {SEP} {QUESTION_TEMPLATES[cat]} {values[cat]}")
    return out


def caption_text(entity):
    return f"a {entity.category} object"


def _slots(image_size):
    """Patch-aligned glyph anchors grouped by quadrant (reading order)."""
    half = image_size // 2
    by_quadrant = []
    for qr, qc in ((0, 0), (0, half), (half, 0), (half, half)):
        by_quadrant.append([(qr + r, qc + c) for r in range(0, half, GLYPH)
                            for c in range(0, half, GLYPH)])
    return by_quadrant


def render_image(entity, layout_seed, world=None, image_size=32, max_distractors=3):
    """Render ``entity`` in a quadrant chosen by ``layout_seed``.

    Distractors (other entities of ``world``) go in other quadrants at lower
    intensity. Glyph pixels depend only on each entity's ``glyph_seed``.
    """
    rng = np.random.default_rng([layout_seed, entity.id, 2])
    pixels = np.full((image_size, image_size, 3), BACKGROUND)
    slots = _slots(image_size)
    quadrants = list(rng.permutation(4))
    main_q = quadrants.pop(0)

    def stamp(ent, anchor, intensity):
        r, c = anchor
        pat = glyph_pattern(ent.glyph_seed)
        pixels[r:r + GLYPH, c:c + GLYPH] = np.where(pat, intensity, BACKGROUND)

    stamp(entity, slots[main_q][rng.integers(len(slots[main_q]))], MAIN_INTENSITY)
    others = [e for e in (world.entities if world is not None else []) if e.id != entity.id]
    n_dis = int(rng.integers(0, max_distractors + 1)) if others else 0
    for q in quadrants[:n_dis]:
        ent = others[int(rng.integers(len(others)))]
        stamp(ent, slots[q][rng.integers(len(slots[q]))], DISTRACTOR_INTENSITY)
    return ImageGrid(pixels)


def pixel_digest(image):
    return hashlib.sha1(np.ascontiguousarray(image.pixels).tobytes()).hexdigest()


def make_knowledge_pairs(world, layouts_per_entity=1, layout_offset=0, max_distractors=3,
                         image_size=32):
    pairs = []
    for ent in world.entities:
        for j in range(layouts_per_entity):
            img = render_image(ent, layout_offset + j, world, image_size, max_distractors)
            pairs.append(KnowledgePair(img, knowledge_text(ent)))
    return pairs


def make_caption_pairs(world, layouts_per_entity=1, layout_offset=0, max_distractors=3,
                       image_size=32):
    """Image-caption pairs for the optional projection warm-up stage."""
    return [KnowledgePair(p.image, caption_text(e))
            for e, p in zip([e for e in world.entities for _ in range(layouts_per_entity)],
                            make_knowledge_pairs(world, layouts_per_entity, layout_offset,
                                                 max_distractors, image_size))]


def make_instruction_set(world, question_templates=None, split_seed=0, layouts_per_combo=4,
                         held_out_per_category=None, max_distractors=3, image_size=32):
    """Build train / held-in / held-out instruction splits.

    Held-out combos are ``(entity, category)`` pairs never seen in training;
    each entity is held out for at most one category so it stays seen.
    Held-in evaluation uses fresh renders of training combos. Splits never
    share an image (checked by pixel digest).
    """
    templates = dict(QUESTION_TEMPLATES if question_templates is None else question_templates)
    cats = [c for c in ATTRIBUTES if c in templates]
    missing = [c for c in ATTRIBUTES if c not in templates]
    if missing:
        raise CapacityError(f"no question template for categories {missing}")
    n = len(world.entities)
    k = max(1, n // (2 * len(cats))) if held_out_per_category is None else held_out_per_category
    if k * len(cats) > n or k < 1 or n < 2:
        raise CapacityError(f"world of {n} entities is too small for {k} held-out combos "
                            f"per category")
    rng = np.random.default_rng([split_seed, 3])
    perm = [int(i) for i in rng.permutation(n)]
    held_out = {(perm[ci * k + j], c) for ci, c in enumerate(cats) for j in range(k)}

    used = set()
    next_seed = {}

    def fresh(ent):
        s = next_seed.get(ent.id, split_seed * 7919)
        while True:
            img = render_image(ent, s, world, image_size, max_distractors)
            s += 1
            d = pixel_digest(img)
            if d not in used:
                used.add(d)
                next_seed[ent.id] = s
                return img, s - 1

    def sample(ent, cat, img, seed):
        return InstructionSample(img, templates[cat], ent.attribute(cat), cat, ent.id,
                                 {"layout_seed": seed})

    train, held_in, held_out_samples = [], [], []
    for ent in world.entities:
        for cat in cats:
            if (ent.id, cat) in held_out:
                img, s = fresh(ent)
                held_out_samples.append(sample(ent, cat, img, s))
                continue
            for _ in range(layouts_per_combo):
                img, s = fresh(ent)
                train.append(sample(ent, cat, img, s))
            img, s = fresh(ent)
            held_in.append(sample(ent, cat, img, s))
    return InstructionSplits(train, held_in, held_out_samples)


# ------------------------------------------------------------------- JSONL

def _encode_image_field(image):
    return base64.b64encode(image_to_bytes(image)).decode("ascii")


_B64_MAGIC = base64.b64encode(IMG_MAGIC)[:5].decode("ascii")  # "SU1HM"


def _decode_image_field(value, base_dir):
    if value.startswith(_B64_MAGIC):
        return image_from_bytes(base64.b64decode(value))
    path = value if os.path.isabs(value) else os.path.join(base_dir, value)
    return load_image(path)


def _read_records(path, required):
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise ParseError(f"{path}: line {lineno}: expected a JSON object")
            for key in required:
                if key not in rec:
                    raise ParseError(f"{path}: line {lineno}: missing field {key!r}")
                if not isinstance(rec[key], str):
                    raise ParseError(f"{path}: line {lineno}: field {key!r} must be a string")
            try:
                rec["image"] = _decode_image_field(rec["image"], base)
            except (OSError, ValueError) as exc:
                raise ParseError(f"{path}: line {lineno}: bad image ({exc})") from exc
            out.append(rec)
    return out


def load_jsonl_pairs(path):
    return [KnowledgePair(r["image"], r["knowledge"])
            for r in _read_records(path, ("image", "knowledge"))]


def load_jsonl_instructions(path):
    return [InstructionSample(r["image"], r["question"], r["answer"], r["category"])
            for r in _read_records(path, ("image", "question", "answer", "category"))]


def save_jsonl_pairs(pairs, path):
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"image": _encode_image_field(p.image),
                                 "knowledge": p.knowledge}) + "\n")


def save_jsonl_instructions(samples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"image": _encode_image_field(s.image), "question": s.question,
                                 "answer": s.answer, "category": s.category}) + "\n")


def write_manifest(path, world_seed, splits, vocab=None):
    """``splits`` maps split name to a JSONL path relative to the manifest."""
    body = {"world_seed": world_seed, "splits": splits}
    if vocab is not None:
        body["vocab"] = list(vocab)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)

