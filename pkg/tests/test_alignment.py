"""Stage-2 memorisation on a closed world of 32 pairs, plus a probe of h_KO."""

import dataclasses

import numpy as np
import pytest

from cvlm.data import (
    gen_world,
    make_host_corpus,
    make_knowledge_pairs,
    render_image,
    world_tokenizer,
)
from cvlm.model import CVLM, ModelConfig
from cvlm.training import StageConfig, _Task, run_stage


@pytest.fixture(scope="module")
def aligned():
    world = gen_world(0, 64)
    tok = world_tokenizer(world)
    pairs = make_knowledge_pairs(world)[:32]
    model = CVLM(ModelConfig(seed=0), tok)
    run_stage(StageConfig("host_pretrain", steps=400, lr={"hostlm": 2e-3}), model,
              make_host_corpus(world, 4096))
    run_stage(StageConfig("vka_pretrain", steps=800, lr={"vision": 1e-3, "vka": 1e-3}),
              model, pairs)
    run_stage(StageConfig("vka_align", steps=2000, lr={"vka": 3e-3}), model, pairs)
    return world, model, pairs


@pytest.mark.slow
def test_stage2_memorises_32_pairs(aligned):
    _, model, pairs = aligned
    loss = _Task("vka_align", model, pairs).loss(np.arange(len(pairs)), "mean")
    assert float(loss.data) < 0.1


@pytest.mark.slow
def test_glyph_identity_alone_changes_knowledge_tokens(aligned):
    world, model, _ = aligned
    a, b = world.entities[:2]
    # same id means same layout draw, so only the glyph differs
    twin = dataclasses.replace(b, id=a.id)
    imgs = [render_image(e, 0) for e in (a, twin)]
    assert not np.array_equal(imgs[0].pixels, imgs[1].pixels)
    h = model.vka.encode_knowledge(model.encode_images(np.stack([i.pixels for i in imgs])))
    u, v = h.data[0].ravel(), h.data[1].ravel()
    assert u @ v / (np.linalg.norm(u) * np.linalg.norm(v)) < 0.99
