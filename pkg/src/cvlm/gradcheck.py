"""Central finite-difference checks of the analytic gradients.

Each case builds a small module, moves every parameter to a random
non-zero point (so zero-initialised adapters and output projections are
exercised too), and compares the tape gradient against
``(f(w + h) - f(w - h)) / 2h`` on a few sampled entries per tensor.

Relative error is ``|a - n| / max(|a|, |n|, floor * max(1, |f|))``. The
central difference carries roundoff of about ``eps * |f| / h`` (1e-11 to 1e-10 here),
so entries whose true gradient is exactly zero (a key-projection bias under
softmax, say) would otherwise divide roundoff by roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import gen_world, make_instruction_set, world_tokenizer
from .fka import FKA, FkaConfig
from .hostlm import HostLM, HostLmConfig
from .model import CVLM, FkaSection, HostSection, ModelConfig, VisionConfig, VkaSection
from .numerics import (
    FeedForward,
    LayerNorm,
    Linear,
    LoRALinear,
    MultiHeadAttention,
    Parameter,
    Tape,
    Tensor,
    causal_mask,
    cross_entropy,
    embedding,
    matmul,
    softmax,
)
from .numerics.tensor import mul, sum_all
from .training import _Task, apply_trainability
from .vision import VisionEncoder
from .vka import VKA, VkaConfig

H = 1e-5
FLOOR = 1e-5


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    checked: int

    @property
    def ok(self):
        return self.max_rel_error < 1e-4


def _perturb(params, rng, scale=0.3):
    for p in params:
        base = 1.0 if p.init == "ones" else 0.0
        p.data = base + rng.normal(0.0, scale, p.shape)
        p.trainable = True


def check_gradients(name, loss_fn, params, rng, per_tensor=3, h=H, floor=FLOOR):
    """Compare tape gradients of ``loss_fn()`` with central differences."""
    with Tape() as tape:
        loss = loss_fn()
    scale = max(1.0, abs(float(loss.data)))
    grads = tape.backward(loss)
    worst = 0.0
    count = 0
    for p in params:
        g = grads.get(p)
        g = np.zeros(p.shape) if g is None else g
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        for i in picks:
            keep = flat[i]
            flat[i] = keep + h
            up = float(loss_fn().data)
            flat[i] = keep - h
            down = float(loss_fn().data)
            flat[i] = keep
            num = (up - down) / (2 * h)
            ana = float(g.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor * scale)
            worst = max(worst, err)
            count += 1
    return GradReport(name, worst, count)


def _named(module, prefix):
    module.assign_names(prefix)
    return module.parameters()


# -------------------------------------------------------------- layer cases

def _layer_cases(rng):
    x = Tensor(rng.normal(size=(2, 5, 8)))
    kv = Tensor(rng.normal(size=(2, 3, 6)))
    cases = []

    lin = Linear(8, 4, "vka")
    cases.append(("linear", lin, lambda: lin(x)))

    ln = LayerNorm(8, "vka")
    cases.append(("layer_norm", ln, lambda: ln(x)))

    ff = FeedForward(8, 16, "vka")
    cases.append(("feed_forward_gelu", ff, lambda: ff(x)))

    sa = MultiHeadAttention(8, 2, "vka")
    mask = causal_mask(5)
    cases.append(("self_attention_causal", sa, lambda: sa(x, mask=mask)))

    ca = MultiHeadAttention(8, 2, "vka", d_kv=6)
    cases.append(("cross_attention", ca, lambda: ca(x, kv=kv)))

    lora = LoRALinear(8, 4, "hostlm", rank=2, alpha=4.0)
    cases.append(("lora_linear", lora, lambda: lora(x)))

    reports = []
    for name, mod, fwd in cases:
        params = _named(mod, name)
        _perturb(params, rng)
        r = Tensor(rng.normal(size=fwd().shape))
        reports.append(check_gradients(name, lambda f=fwd, r=r: sum_all(mul(f(), r)),
                                       params, rng))

    table = Parameter((7, 8), "hostlm", name="table")
    table.data = rng.normal(size=(7, 8))
    ids = rng.integers(0, 7, size=(2, 4))
    tgt = rng.integers(0, 7, size=(2, 4))
    w = np.array([[1, 1, 0, 1], [1, 0, 1, 1]])
    head = Parameter((8, 7), "hostlm", name="head")
    head.data = rng.normal(size=(8, 7))
    reports.append(check_gradients(
        "embedding_cross_entropy",
        lambda: cross_entropy(matmul(embedding(ids, table), head), tgt, w), [table, head], rng))

    s = Parameter((3, 6), "vka", name="scores")
    s.data = rng.normal(size=(3, 6))
    m = np.where(rng.random((3, 6)) < 0.3, -1e9, 0.0)
    m[:, 0] = 0.0
    r = Tensor(rng.normal(size=(3, 6)))
    reports.append(check_gradients("softmax_masked", lambda: sum_all(mul(softmax(s, m), r)),
                                   [s], rng))
    return reports


# -------------------------------------------------------------- module cases

def _module_cases(rng):
    reports = []
    pixels = rng.random((2, 16, 16, 3))

    enc = VisionEncoder(image_size=16, patch=8, channels=3, d_model=8)
    params = _named(enc, "vision")
    _perturb(params, rng)
    r = Tensor(rng.normal(size=(2, 5, 8)))
    reports.append(check_gradients("vision_encoder", lambda: sum_all(mul(enc(pixels), r)),
                                   params, rng))

    vka = VKA(VkaConfig(d_model=8, n_blocks=2, n_heads=2, vocab_size=9, n_query=2,
                        prompt_ids=[0, 4, 5], max_seq_len=10, d_image=6, d_out=12))
    params = _named(vka, "vka")
    _perturb(params, rng)
    img = Tensor(rng.normal(size=(2, 4, 6)))
    tgt = rng.integers(2, 9, size=(2, 4))
    reports.append(check_gradients(
        "vka_pretrain", lambda: cross_entropy(vka.pretrain_logits(img, tgt), tgt,
                                              np.ones(tgt.shape)), params, rng))
    r = Tensor(rng.normal(size=(2, 2, 12)))
    reports.append(check_gradients("vka_knowledge", lambda: sum_all(mul(
        vka.encode_knowledge(img), r)), params, rng))

    fka = FKA(FkaConfig(n_layers=2, n_heads=2, per_layer_len=2, host_layers=2, d_model=8))
    params = _named(fka, "fka")
    _perturb(params, rng)
    instr = Tensor(rng.normal(size=(2, 3, 8)))
    bank = Tensor(rng.normal(size=(2, 10, 8)))
    qmask = np.array([[True, True, True], [True, True, False]])
    r = Tensor(rng.normal(size=(2, 4, 8)))
    reports.append(check_gradients("fka", lambda: sum_all(mul(fka(instr, bank, qmask), r)),
                                   params, rng))

    for mode in ("strip", "accumulate"):
        host = HostLM(HostLmConfig(d_model=8, n_layers=2, n_heads=2, vocab_size=9,
                                   max_seq_len=12, lora_rank=2, lora_alpha=4.0))
        params = _named(host, "host")
        _perturb(params, rng)
        inj = [Parameter((2, 2, 8), "fka", name=f"inj{i}") for i in range(2)]
        for p in inj:
            p.data = rng.normal(size=p.shape)
        im = Parameter((2, 3, 8), "mlp", name="image_tokens")
        im.data = rng.normal(size=im.shape)
        ids = rng.integers(0, 9, size=(2, 4))
        tgt = rng.integers(0, 9, size=(2, 4))
        reports.append(check_gradients(
            f"host_injection_{mode}",
            lambda h=host, m=mode, i=inj, x=im: cross_entropy(h(x, None, ids, i, m), tgt,
                                                              np.ones(tgt.shape)),
            params + inj + [im], rng))
    return reports


# ------------------------------------------------------------ full model case

def small_model_config(seed=0):
    """Micro CVLM used by the end-to-end check (host dim 32, 2 layers, 2 prefix rows)."""
    return ModelConfig(
        vision=VisionConfig(image_size=32, patch=8, channels=3, d_model=16),
        vka=VkaSection(d_model=16, n_blocks=2, n_heads=2, n_query=2, max_seq_len=20),
        fka=FkaSection(n_layers=2, n_heads=2, per_layer_len=2, n_regions=5),
        host=HostSection(d_model=32, n_layers=2, n_heads=2, max_seq_len=40, lora_rank=2,
                         lora_alpha=4.0),
        seed=seed)


def full_step_case(rng, seed=0):
    """One instruction-tuning loss on a 2-sample batch; every parameter checked.

    The encoder is frozen in this stage, so its features are computed
    outside the loss like the trainer does; it is checked separately.
    """
    world = gen_world(seed, 8)
    tok = world_tokenizer(world)
    samples = make_instruction_set(world, split_seed=seed, layouts_per_combo=1).train[:2]
    model = CVLM(small_model_config(seed), tok)
    params = [p for p in model.parameters() if p.group != "vision"]
    _perturb(params, rng)
    task = _Task("instruction_tune", model, samples)
    apply_trainability(model, "instruction_tune")
    for p in params:
        p.trainable = True
    idx = np.arange(2)
    return check_gradients("cvlm_full_step", lambda: task.loss(idx, "mean"), params, rng,
                           per_tensor=2)


def run_suite(seed=0, include_full=True):
    rng = np.random.default_rng(seed)
    reports = _layer_cases(rng) + _module_cases(rng)
    if include_full:
        reports.append(full_step_case(rng, seed))
    return reports
