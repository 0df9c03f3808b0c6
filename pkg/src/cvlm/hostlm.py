"""Toy decoder-only host language model.

Input order is ``[h_IO ; h_KO ; text]`` with learned absolute positions.
When an injection plan is given, layer ``l`` sees ``[slice_l ; carried]``:
prefix rows are visible to every position but only attend among
themselves, and in ``strip`` mode they are dropped from the layer output so
the carried length never changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TruncationError
from .numerics import (
    MASK_VALUE,
    FeedForward,
    LayerNorm,
    Linear,
    LoRALinear,
    Module,
    MultiHeadAttention,
    Parameter,
    causal_mask,
    concat,
    embedding,
    gelu,
)
from .numerics.tensor import add, getitem


@dataclass
class HostLmConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 64
    lora_rank: int = 4
    lora_alpha: float = 8.0

    def validate(self):
        if self.n_layers < 1:
            raise ConfigError("host LM needs at least one layer")
        if self.d_model % self.n_heads:
            raise ConfigError(f"host dim {self.d_model} not divisible by {self.n_heads} heads")


class HostBlock(Module):
    def __init__(self, d, n_heads, lora, group="hostlm"):
        self.ln1 = LayerNorm(d, group)
        self.attn = MultiHeadAttention(d, n_heads, group, lora=lora)
        self.ln2 = LayerNorm(d, group)
        self.ffn = FeedForward(d, 4 * d, group)

    def __call__(self, x, mask):
        x = add(x, self.attn(self.ln1(x), mask=mask))
        return add(x, self.ffn(self.ln2(x)))


class VisualMlp(Module):
    """Two-layer GELU projection of patch features into the host space.

    Takes the encoder output ``[B, 1 + P, d_V]`` and drops the global token
    itself, so ``h_g`` can never leak into ``h_IO``.
    """

    def __init__(self, d_v, d_l, group="mlp"):
        self.fc1 = Linear(d_v, d_l, group)
        self.fc2 = Linear(d_l, d_l, group)

    def __call__(self, image_seq):
        patches = getitem(image_seq, (slice(None), slice(1, None)))
        return self.fc2(gelu(self.fc1(patches)))


def prefix_mask(n_prefix, n_carried):
    """Additive mask for ``[prefix ; carried]`` rows."""
    n = n_prefix + n_carried
    m = np.full((n, n), MASK_VALUE)
    m[:n_prefix, :n_prefix] = 0.0
    m[n_prefix:, :n_prefix] = 0.0
    m[n_prefix:, n_prefix:] = causal_mask(n_carried)
    return m


class HostLM(Module):
    def __init__(self, cfg: HostLmConfig, group="hostlm"):
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        lora = (cfg.lora_rank, cfg.lora_alpha)
        self.tok_emb = Parameter((cfg.vocab_size, d), group)
        self.pos_emb = Parameter((cfg.max_seq_len, d), group)
        self.layers = [HostBlock(d, cfg.n_heads, lora, group) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d, group)
        self.lm_head = Linear(d, cfg.vocab_size, group, bias=False)

    def embed_text(self, ids):
        return embedding(np.asarray(ids), self.tok_emb)

    def lora_layers(self):
        out = []
        for blk in self.layers:
            out.extend(m for m in (blk.attn.q, blk.attn.v) if isinstance(m, LoRALinear))
        return out

    @staticmethod
    def layout(n_image, n_knowledge, n_text):
        """Row ranges of each input segment in the carried sequence."""
        return {"image": (0, n_image),
                "knowledge": (n_image, n_image + n_knowledge),
                "text": (n_image + n_knowledge, n_image + n_knowledge + n_text)}

    def __call__(self, image_tokens, knowledge_tokens, text_ids, injection=None,
                 mode="strip"):
        """Logits ``[B, T, V]`` at the text positions.

        ``image_tokens`` / ``knowledge_tokens`` may be ``None`` (segment
        omitted). ``injection`` is an :class:`~cvlm.fka.InjectionPlan` or a
        list of per-layer ``[B, LD, d]`` tensors.
        """
        text_ids = np.asarray(text_ids)
        T = text_ids.shape[1]
        parts = [p for p in (image_tokens, knowledge_tokens) if p is not None]
        parts.append(self.embed_text(text_ids))
        x = concat(parts, axis=1)
        L = x.shape[1]
        if L > self.cfg.max_seq_len:
            raise TruncationError(f"host sequence of {L} rows exceeds max_seq_len "
                                  f"{self.cfg.max_seq_len}")
        x = add(x, getitem(self.pos_emb, slice(0, L)))

        slices = list(getattr(injection, "slices", injection) or [])
        if slices and len(slices) != len(self.layers):
            raise ConfigError(f"injection has {len(slices)} slices for {len(self.layers)} layers")
        ld = slices[0].shape[1] if slices else 0
        if mode not in ("strip", "accumulate"):
            raise ConfigError(f"unknown injection mode {mode!r}")

        base_mask = causal_mask(L)
        n_prefix = 0
        for i, blk in enumerate(self.layers):
            if ld == 0:
                x = blk(x, base_mask)
                continue
            x = concat([slices[i], x], axis=1)
            n_prefix += ld
            x = blk(x, prefix_mask(n_prefix, L))
            if mode == "strip":
                x = getitem(x, (slice(None), slice(ld, None)))
                n_prefix = 0
        h = self.ln_f(getitem(x, (slice(None), slice(x.shape[1] - T, None))))
        return self.lm_head(h)
