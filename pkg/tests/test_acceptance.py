"""Acceptance criteria 1-9, one test each.

Each test wraps its checks in ``criterion(n, title)`` so the run ends with
one PASS/FAIL line per criterion (see ``conftest.py``).
"""

import copy
import math
import time

import numpy as np
import pytest

from cvlm.checkpoint import load_checkpoint, save_checkpoint
from cvlm.config import default_stages
from cvlm.data import (
    gen_world,
    knowledge_text,
    make_caption_pairs,
    make_host_corpus,
    make_instruction_set,
    make_knowledge_pairs,
    world_tokenizer,
)
from cvlm.fka import FKA, FkaConfig, plan_injection
from cvlm.gradcheck import run_suite, small_model_config
from cvlm.model import CVLM, ModelConfig
from cvlm.numerics import (
    AdamW,
    Parameter,
    Tensor,
    attention,
    cosine_lr,
    cross_entropy,
    softmax,
)
from cvlm.numerics.layers import LoRALinear
from cvlm.training import (
    STAGES,
    StageConfig,
    _Task,
    apply_trainability,
    checksums,
    derive_model,
    evaluate,
    run_stage,
)


@pytest.fixture(scope="module")
def tiny():
    world = gen_world(0, 8)
    return world, world_tokenizer(world)


def _perturbed(cfg, tok, seed=0):
    """A model whose every parameter (LoRA B included) is random and non-zero."""
    model = CVLM(cfg, tok)
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = p.data + rng.normal(0, 0.05, p.shape)
    return model


def _batch(world, model, n=3):
    samples = make_instruction_set(world, layouts_per_combo=1).train[:n]
    task = _Task("instruction_tune", model, samples)
    idx = np.arange(n)
    return task, idx


# ---------------------------------------------------------------------------- 1

def test_criterion_1_gradient_suite(criterion):
    with criterion(1, "finite-difference gradient suite") as note:
        start = time.perf_counter()
        reports = run_suite(seed=0)
        elapsed = time.perf_counter() - start
        worst = max(reports, key=lambda r: r.max_rel_error)
        note(f"{len(reports)} cases, worst {worst.name} {worst.max_rel_error:.2e}")
        for r in reports:
            assert r.max_rel_error < 1e-4, f"{r.name}: {r.max_rel_error:.3e}"
        assert any(r.name == "cvlm_full_step" for r in reports)
        assert elapsed < 180


# ---------------------------------------------------------------------------- 2

class _Spy:
    """Stands in for a host block and logs its input and output lengths."""

    def __init__(self, block, log):
        self.block = block
        self.log = log

    def __call__(self, x, mask):
        out = self.block(x, mask)
        self.log.append((x.shape[1], out.shape[1]))
        return out


def test_criterion_2_injection_arithmetic(criterion):
    with criterion(2, "injection plan arithmetic and constant carried length") as note:
        rng = np.random.default_rng(0)
        d = 8
        checked = 0
        for ln in (2, 4):
            for ld in (0, 2, 4, 8):
                fka = FKA(FkaConfig(n_layers=1, n_heads=2, per_layer_len=ld, host_layers=ln,
                                    d_model=d))
                fka.assign_names("fka").init_parameters(ld * 10 + ln)
                h = fka(Tensor(rng.normal(size=(2, 3, d))), Tensor(rng.normal(size=(2, 5, d))))
                assert h.shape == (2, ld * ln, d)
                plan = plan_injection(h, ln)
                assert len(plan.slices) == ln
                assert all(s.shape == (2, ld, d) for s in plan.slices)
                joined = np.concatenate([s.data for s in plan.slices], axis=1)
                assert joined.tobytes() == h.data.tobytes()
                checked += 1

        world = gen_world(0, 8)
        tok = world_tokenizer(world)
        for ld in (0, 2, 4, 8):
            cfg = small_model_config()
            cfg.fka.per_layer_len = ld
            model = _perturbed(cfg, tok)
            task, idx = _batch(world, model, 2)
            seen = []
            model.host.layers = [_Spy(blk, seen) for blk in model.host.layers]
            assert np.isfinite(task.loss(idx, "mean").data)
            L = model.n_patches + cfg.vka.n_query + task.text.shape[1] - 1
            # every layer sees [slice_l ; carried] with the same carried length
            assert seen == [(ld + L, ld + L)] * cfg.host.n_layers, (ld, seen)
            if ld:
                seen.clear()
                model.cfg.host.injection_mode = "accumulate"
                task.loss(idx, "mean")
                assert [x for x, _ in seen] == [L + ld * (i + 1)
                                                for i in range(cfg.host.n_layers)]
        note(f"{checked} (LD, LN) plans bit-exact")


# ---------------------------------------------------------------------------- 3

def test_criterion_3_ablation_equivalences(criterion, tiny):
    with criterion(3, "LD=0 == w/o FKA; no h_KO == w/o (FKA & VKA)"):
        world, tok = tiny
        base_cfg = small_model_config()
        base = _perturbed(base_cfg, tok)

        zero = derive_model(base, use_vka=True, ld=0)
        no_fka_cfg = copy.deepcopy(base_cfg)
        no_fka_cfg.use_fka = False
        no_fka = CVLM(no_fka_cfg, tok)
        src = dict(base.named_parameters())
        for name, p in no_fka.named_parameters():
            p.data = src[name].data.copy()
        assert no_fka.fka is None
        t0, idx = _batch(world, zero)
        t1, _ = _batch(world, no_fka)
        a = t0.loss(idx, "sum").data
        b = t1.loss(idx, "sum").data
        assert a.tobytes() == b.tobytes()
        img = Tensor(t0.image_cache[idx])
        la = zero.answer_logits(img, None, t0.questions[idx], t0.q_mask[idx], t0.text[idx])
        lb = no_fka.answer_logits(img, None, t1.questions[idx], t1.q_mask[idx], t1.text[idx])
        assert la.data.tobytes() == lb.data.tobytes()

        no_ko = derive_model(base, use_vka=False, ld=0)
        plain_cfg = copy.deepcopy(base_cfg)
        plain_cfg.use_fka = False
        plain_cfg.use_vka = False
        plain = CVLM(plain_cfg, tok)
        assert plain.vka is None and plain.fka is None
        for name, p in plain.named_parameters():
            p.data = src[name].data.copy()
        lc = no_ko.answer_logits(img, None, t0.questions[idx], t0.q_mask[idx], t0.text[idx])
        ld_ = plain.answer_logits(img, None, t0.questions[idx], t0.q_mask[idx], t0.text[idx])
        assert lc.data.tobytes() == ld_.data.tobytes()
        # and both equal the host reading [h_IO ; text] directly
        direct = base.host(base.mlp(img), None, t0.text[idx])
        assert lc.data.tobytes() == direct.data.tobytes()

        # composition order [h_IO ; h_KO ; text]
        lay = base.host.layout(base.n_patches, base_cfg.vka.n_query, 5)
        assert lay["image"][0] == 0 and lay["image"][1] == lay["knowledge"][0]
        assert lay["knowledge"][1] == lay["text"][0]
        h_io = base.mlp(img)
        h_ko = base.vka.encode_knowledge(img)
        want = base.host(h_io, h_ko, t0.text[idx])
        got = base.answer_logits(img, None, t0.questions[idx], t0.q_mask[idx], t0.text[idx],
                                 injection=[])
        assert got.data.tobytes() == want.data.tobytes()


# ---------------------------------------------------------------------------- 4

def test_criterion_4_lora_identity(criterion, tiny):
    with criterion(4, "LoRA identity at init, merge == apply, alpha/r == 2") as note:
        world, tok = tiny
        model = CVLM(small_model_config(), tok)
        task, idx = _batch(world, model)
        adapted = model.host(None, None, task.text[idx]).data
        layers = model.host.lora_layers()
        assert layers and all(np.all(lin.lora_B.data == 0) for lin in layers)
        for lin in layers:  # plain base weights, no adapter arithmetic at all
            lin.effective_weight = lambda lin=lin: lin.weight
        base = model.host(None, None, task.text[idx]).data
        for lin in layers:
            del lin.effective_weight
        assert adapted.tobytes() == base.tobytes()

        rng = np.random.default_rng(1)
        for lin in layers:
            lin.lora_B.data = rng.normal(0, 0.2, lin.lora_B.shape)
        applied = model.host(None, None, task.text[idx]).data
        model.merge_lora()
        merged = model.host(None, None, task.text[idx]).data
        err = float(np.max(np.abs(applied - merged)))
        note(f"merge error {err:.1e}")
        assert err <= 1e-12
        assert not np.allclose(applied, base)

        host = ModelConfig().host
        assert host.lora_alpha / host.lora_rank == 256 / 128 == 2.0
        assert LoRALinear(8, 8, "hostlm", 4, 8.0).scale == 2.0


# ---------------------------------------------------------------------------- 5

def test_criterion_5_trainability(criterion, tiny):
    with criterion(5, "frozen groups untouched after 100 steps of every stage") as note:
        world, tok = tiny
        start = time.perf_counter()
        model = CVLM(small_model_config(), tok)
        data = {
            "host_pretrain": make_host_corpus(world, 64),
            "mlp_caption": make_caption_pairs(world),
            "vka_pretrain": make_knowledge_pairs(world),
            "vka_align": make_knowledge_pairs(world),
            "instruction_tune": make_instruction_set(world, layouts_per_combo=1).train,
        }
        for stage in STAGES:
            trainable = {p.name for p in apply_trainability(model, stage)}
            before = checksums(model)
            lr = {g: 1e-3 for g in StageConfig(stage).lr}
            run_stage(StageConfig(stage, steps=100, lr=lr, batch_size=4), model, data[stage])
            after = checksums(model)
            changed = {n for n in before if before[n] != after[n]}
            frozen_changed = changed - trainable
            assert not frozen_changed, f"{stage} moved frozen {sorted(frozen_changed)[:3]}"
            assert changed, f"{stage} updated nothing"
            if stage == "vka_align":
                assert changed == {"vka.query_tokens", "vka.knowledge_proj.weight",
                                   "vka.knowledge_proj.bias"}
            note(f"{stage}: {len(changed)}/{len(before)} moved")
        assert time.perf_counter() - start < 120


# ---------------------------------------------------------------------------- 6

@pytest.mark.slow
def test_criterion_6_stage1_memorisation(criterion):
    with criterion(6, "VKA memorises 32 image-knowledge pairs") as note:
        start = time.perf_counter()
        world = gen_world(0, 32)
        tok = world_tokenizer(world)
        pairs = make_knowledge_pairs(world)
        cfg = ModelConfig(seed=0)
        assert (cfg.vka.d_model, cfg.vka.n_blocks) == (64, 4)
        model = CVLM(cfg, tok)
        steps = 800
        rows, _ = run_stage(StageConfig("vka_pretrain", steps=steps, batch_size=16,
                                        lr={"vision": 1e-3, "vka": 1e-3}), model, pairs)
        task = _Task("vka_pretrain", model, pairs)
        full = float(task.loss(np.arange(len(pairs)), "mean").data)
        first = next((r["step"] for r in rows if r["loss"] < 0.1), None)
        image_seq = model.encode_images(np.stack([p.image.pixels for p in pairs]))
        outs = model.vka.generate(image_seq, 16)
        exact = sum(tok.decode(o) == knowledge_text(e) for o, e in zip(outs, world.entities))
        elapsed = time.perf_counter() - start
        note(f"loss {full:.4f} (first batch < 0.1 at step {first}), {exact}/32 exact, "
             f"{elapsed:.0f}s")
        assert steps <= 2000 and full < 0.1
        assert exact >= 30
        assert elapsed < 300


# ---------------------------------------------------------------------------- 7

SEEDS = (0, 1, 2)


def _stage(name, seed):
    cfg = copy.deepcopy(default_stages()[name])
    cfg.seed = seed
    return cfg


def _shared_host(worlds, tok):
    """One text-pretrained host reused by every seed, like a fixed pretrained LLM.

    Its corpus avoids the entities of all the worlds it will serve.
    """
    model = CVLM(ModelConfig(seed=100), tok)
    run_stage(_stage("host_pretrain", 100), model, make_host_corpus(worlds, 4096, seed=100))
    return {n: p.data for n, p in model.named_parameters()
            if n.startswith("host.") and "lora_" not in n}


@pytest.mark.slow
def test_criterion_7_full_pipeline_and_vka_ablation(criterion):
    with criterion(7, "3-stage pipeline: held-in EM >= 0.90, use_vka=off lower") as note:
        start = time.perf_counter()
        worlds = [gen_world(s, 64) for s in SEEDS]
        tok = world_tokenizer(worlds[0])
        host = _shared_host(worlds, tok)
        ld = ModelConfig().fka.per_layer_len
        scores = []
        for seed, world in zip(SEEDS, worlds):
            splits = make_instruction_set(world, split_seed=seed)
            model = CVLM(ModelConfig(seed=seed), tok)
            for n, p in model.named_parameters():
                if n in host:
                    p.data = host[n].copy()
            pairs = make_knowledge_pairs(world, 2)
            run_stage(_stage("vka_pretrain", seed), model, pairs)
            run_stage(_stage("vka_align", seed), model, pairs)
            accs = []
            for use_vka in (True, False):
                cell = derive_model(model, use_vka, ld)
                run_stage(_stage("instruction_tune", seed), cell, splits.train)
                accs.append(evaluate(cell, splits.held_in).accuracy())
            scores.append(accs)
            note(f"seed {seed}: n_train {len(splits.train)}, on {accs[0]:.3f}, "
                 f"off {accs[1]:.3f}")
        elapsed = time.perf_counter() - start
        note(f"{elapsed:.0f}s")
        assert all(on >= 0.90 for on, _ in scores)
        assert sum(off < on for on, off in scores) >= 2
        assert elapsed < 1200


# ---------------------------------------------------------------------------- 8

def test_criterion_8_determinism_and_resume(criterion, tiny, tmp_path):
    with criterion(8, "bit-identical traces and checkpoint resume") as note:
        world, tok = tiny
        start = time.perf_counter()
        train = make_instruction_set(world, layouts_per_combo=1).train
        cfg = StageConfig("instruction_tune", steps=12, batch_size=4,
                          lr={"fka": 1e-3, "lora": 1e-3, "mlp": 2e-4, "vka": 2e-4})

        def fresh():
            m = CVLM(small_model_config(seed=3), tok)
            m.completed_stages = ["vka_pretrain", "vka_align"]
            return m

        a, _ = run_stage(cfg, fresh(), train)
        b, _ = run_stage(cfg, fresh(), train)
        assert [r["loss"] for r in a] == [r["loss"] for r in b]

        k = 5
        m = fresh()
        head, state = run_stage(cfg, m, train, stop_at=k)
        save_checkpoint(m, tmp_path / "mid.cvlm", stage=cfg.stage, step=k, train_state=state)
        m2, state2, _ = load_checkpoint(tmp_path / "mid.cvlm")
        assert m2.completed_stages == ["vka_pretrain", "vka_align"]
        tail, _ = run_stage(cfg, m2, train, state=state2)
        resumed = [r["loss"] for r in head + tail]
        full = [r["loss"] for r in a]
        assert len(resumed) == len(full)
        assert all(x.hex() == y.hex() for x, y in zip(resumed, full))
        final_a = dict(m2.named_parameters())
        ref = fresh()
        run_stage(cfg, ref, train)
        for name, p in ref.named_parameters():
            assert p.data.tobytes() == final_a[name].data.tobytes()
        note(f"{len(full)} steps, resumed at {k}")
        assert time.perf_counter() - start < 180


# ---------------------------------------------------------------------------- 9

def _softmax_oracle(row):
    top = max(row)
    e = [math.exp(x - top) for x in row]
    s = math.fsum(e)
    return [x / s for x in e]


def test_criterion_9_numeric_oracles(criterion):
    with criterion(9, "attention, softmax, CE, AdamW, cosine vs direct formulas") as note:
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(10):
            x = rng.normal(0, 3, size=(4, 6))
            got = softmax(Tensor(x)).data
            want = np.array([_softmax_oracle(list(r)) for r in x])
            worst = max(worst, float(np.max(np.abs(got - want))))

            q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 2))
            out = attention(Tensor(q), Tensor(k), Tensor(v)).data
            for i in range(3):
                w = _softmax_oracle([math.fsum(q[i] * k[j]) / 2.0 for j in range(5)])
                row = [math.fsum(w[j] * v[j, c] for j in range(5)) for c in range(2)]
                worst = max(worst, float(np.max(np.abs(out[i] - row))))

            z = rng.normal(0, 2, size=(6, 7))
            t = rng.integers(0, 7, size=6)
            wts = (rng.random(6) < 0.7).astype(float)
            wts[0] = 1.0
            ce = float(cross_entropy(Tensor(z), t, wts).data)
            terms = [wts[i] * (math.log(math.fsum(math.exp(a) for a in z[i])) - z[i, t[i]])
                     for i in range(6)]
            worst = max(worst, abs(ce - math.fsum(terms) / wts.sum()))

            p0, g = rng.normal(size=5), rng.normal(size=5)
            lr, wd, b1, b2, eps = 3e-3, 0.05, 0.9, 0.999, 1e-8
            param = Parameter((5,), "vka", name="w")
            param.data = p0.copy()
            opt = AdamW(b1, b2, eps, wd)
            opt.step([param], {"w": g}, {"w": lr})
            for i in range(5):
                m = (1 - b1) * g[i] / (1 - b1)
                vv = (1 - b2) * g[i] ** 2 / (1 - b2)
                want_i = p0[i] - lr * wd * p0[i] - lr * m / (math.sqrt(vv) + eps)
                worst = max(worst, abs(param.data[i] - want_i))

            total, warm = int(rng.integers(10, 200)), int(rng.integers(1, 10))
            hi, lo = float(rng.uniform(1e-4, 1e-2)), float(rng.uniform(0, 1e-5))
            step = int(rng.integers(warm, total + 1))
            want_lr = lo + (hi - lo) * (1 + math.cos(math.pi * (step - warm) / (total - warm))) / 2
            worst = max(worst, abs(cosine_lr(step, total, warm, hi, lo) - want_lr))
            worst = max(worst, abs(cosine_lr(warm, total, warm, hi, lo) - hi))
            worst = max(worst, abs(cosine_lr(total, total, warm, hi, lo) - lo))
            worst = max(worst, abs(cosine_lr(warm // 2, total, warm, hi, lo)
                                   - hi * (warm // 2) / warm))
        note(f"max deviation {worst:.1e}")
        assert worst < 1e-10
