"""The assembled model: encoder, VKA, MLP, FKA and host LM.

Top-level attribute names (``vision``, ``vka``, ``fka``, ``mlp``, ``host``)
are the parameter-name roots used by checkpoints and trainability rules.
Ablations are structural: ``use_vka=False`` drops ``h_KO`` from the host
input, and ``ld=0`` builds no adapter at all.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import KNOWLEDGE_PROMPT
from .errors import ConfigError, MergeError
from .fka import FKA, FkaConfig, build_region_bank, plan_injection, region_crops
from .hostlm import HostLM, HostLmConfig, VisualMlp
from .numerics import Module, Tensor
from .vision import VisionEncoder
from .vka import VKA, VkaConfig

ROOTS = ("vision", "vka", "fka", "mlp", "host")


@dataclass
class VisionConfig:
    image_size: int = 32
    patch: int = 8
    channels: int = 3
    d_model: int = 64


@dataclass
class VkaSection:
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    n_query: int = 8
    max_seq_len: int = 32


@dataclass
class FkaSection:
    n_layers: int = 4
    n_heads: int = 4
    per_layer_len: int = 2
    n_regions: int = 5


@dataclass
class HostSection:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 64
    lora_rank: int = 4
    lora_alpha: float = 8.0
    injection_mode: str = "strip"


@dataclass
class ModelConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    vka: VkaSection = field(default_factory=VkaSection)
    fka: FkaSection = field(default_factory=FkaSection)
    host: HostSection = field(default_factory=HostSection)
    use_vka: bool = True
    use_fka: bool = True
    seed: int = 0

    @property
    def ld(self):
        return self.fka.per_layer_len if self.use_fka else 0

    def to_dict(self):
        return asdict(self)


class CVLM(Module):
    """Model bundle. Absent components are ``None``.

    The VKA exists whenever either ``h_KO`` or the region bank needs it.
    """

    def __init__(self, cfg: ModelConfig, tokenizer):
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.lora_merged = False
        self.completed_stages = []
        self.storage_dtype = "f8"
        V = len(tokenizer)
        vc, kc, fc, hc = cfg.vision, cfg.vka, cfg.fka, cfg.host
        if hc.injection_mode not in ("strip", "accumulate"):
            raise ConfigError(f"unknown injection mode {hc.injection_mode!r}")
        self.vision = VisionEncoder(vc.image_size, vc.patch, vc.channels, vc.d_model)
        n_patches = self.vision.n_patches
        need_vka = cfg.use_vka or cfg.ld > 0
        self.vka = VKA(VkaConfig(
            d_model=kc.d_model, n_blocks=kc.n_blocks, n_heads=kc.n_heads, vocab_size=V,
            n_query=kc.n_query, prompt_ids=tokenizer.encode(KNOWLEDGE_PROMPT),
            max_seq_len=kc.max_seq_len, d_image=vc.d_model, d_out=hc.d_model,
            bos_id=tokenizer.bos, eos_id=tokenizer.eos)) if need_vka else None
        self.mlp = VisualMlp(vc.d_model, hc.d_model)
        self.host = HostLM(HostLmConfig(
            d_model=hc.d_model, n_layers=hc.n_layers, n_heads=hc.n_heads, vocab_size=V,
            max_seq_len=hc.max_seq_len, lora_rank=hc.lora_rank, lora_alpha=hc.lora_alpha))
        self.fka = FKA(FkaConfig(n_layers=fc.n_layers, n_heads=fc.n_heads,
                                 per_layer_len=fc.per_layer_len, host_layers=hc.n_layers,
                                 d_model=hc.d_model)) if cfg.use_fka else None
        self.n_patches = n_patches
        self.assign_names()
        self.init_parameters(cfg.seed)

    # ----------------------------------------------------------- features

    def encode_images(self, pixels):
        return self.vision(np.asarray(pixels))

    def crop_pixels(self, images):
        """Stacked region crops ``[B * k, H, W, C]`` plus per-image region lists."""
        k = self.cfg.fka.n_regions
        pixels, regions = [], []
        for img in images:
            regs, crops = region_crops(img, k)
            regions.append(regs)
            pixels.extend(c.pixels for c in crops)
        return np.stack(pixels), regions

    @property
    def uses_bank(self):
        return self.fka is not None and self.fka.cfg.n_distill > 0

    # ------------------------------------------------------------ forwards

    def knowledge_logits(self, image_seq, text_ids, with_image_tokens=False):
        """Alignment forward: host reads ``h_KO`` and the knowledge text.

        With ``with_image_tokens`` the MLP image tokens precede ``h_KO``.
        """
        h_ko = self.vka.encode_knowledge(image_seq)
        h_io = self.mlp(image_seq) if with_image_tokens else None
        return self.host(h_io, h_ko, text_ids)

    def caption_logits(self, image_seq, text_ids):
        return self.host(self.mlp(image_seq), None, text_ids)

    def injection(self, crop_seq, question_ids, question_mask):
        if not self.uses_bank:
            return None
        bank = build_region_bank(None, self.vision, self.vka, self.cfg.fka.n_regions,
                                 crop_features=crop_seq)
        instr = self.host.embed_text(question_ids)
        h = self.fka(instr, bank.entries, question_mask)
        return plan_injection(h, self.host.cfg.n_layers)

    def answer_logits(self, image_seq, crop_seq, question_ids, question_mask, text_ids,
                      injection=None):
        """Instruction forward over ``[h_IO ; h_KO ; text]`` with adapter prefixes.

        ``injection`` may be passed in to reuse one adapter forward across
        several calls (as greedy decoding does).
        """
        if injection is None:
            injection = self.injection(crop_seq, question_ids, question_mask)
        h_io = self.mlp(image_seq)
        h_ko = self.vka.encode_knowledge(image_seq) if self.cfg.use_vka else None
        return self.host(h_io, h_ko, text_ids, injection, self.cfg.host.injection_mode)

    # ----------------------------------------------------------- inference

    def generate_answers(self, image_seq, crop_seq, questions, max_new_tokens=4):
        """Greedy answers for a batch of question strings.

        Questions are grouped by token length so every row in a group shares
        the same prompt length; the adapter runs once per group.
        """
        tok = self.tokenizer
        q_ids = [tok.encode(q) for q in questions]
        k = self.cfg.fka.n_regions
        out = [None] * len(questions)
        by_len = {}
        for i, ids in enumerate(q_ids):
            by_len.setdefault(len(ids), []).append(i)
        for _, rows in sorted(by_len.items()):
            rows = np.asarray(rows)
            q = np.asarray([q_ids[i] for i in rows])
            img = Tensor(image_seq.data[rows])
            crops = None
            if crop_seq is not None:
                idx = (rows[:, None] * k + np.arange(k)).reshape(-1)
                crops = Tensor(crop_seq.data[idx])
            mask = np.ones(q.shape, dtype=bool)
            inj = self.injection(crops, q, mask)
            text = np.concatenate([np.full((len(rows), 1), tok.bos), q], axis=1)
            gen = [[] for _ in rows]
            done = np.zeros(len(rows), dtype=bool)
            for _ in range(max_new_tokens):
                logits = self.answer_logits(img, crops, q, mask, text, injection=inj)
                nxt = logits.data[:, -1].argmax(axis=1)
                for j, t in enumerate(nxt):
                    if not done[j]:
                        if t == tok.eos:
                            done[j] = True
                        else:
                            gen[j].append(int(t))
                if done.all():
                    break
                text = np.concatenate([text, nxt[:, None]], axis=1)
            for j, i in enumerate(rows):
                out[i] = gen[j]
        return out

    # ---------------------------------------------------------------- LoRA

    def merge_lora(self):
        """Fold every host adapter into its base weight and zero the adapter.

        The adapter tensors stay in place (with ``B = 0``) so checkpoint
        names are stable; ``lora_merged`` guards against folding twice.
        """
        if self.lora_merged:
            raise MergeError("LoRA adapters are already merged into the host weights")
        for lin in self.host.lora_layers():
            lin.weight.data = lin.merged_weight()
            lin.lora_B.data = np.zeros_like(lin.lora_B.data)
        self.lora_merged = True
        return self
