"""Visual knowledge aligner.

A small causal decoder whose every block cross-attends to the image
sequence ``h_I`` (global token plus patches). Stage 1 trains it as a
knowledge-text generator; stage 2 appends learnable query tokens after the
knowledge prompt and projects their output states into the host LM space,
giving ``N`` fixed-length knowledge embeddings per image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, TruncationError
from .numerics import (
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    Tensor,
    broadcast_rows,
    causal_mask,
    concat,
    embedding,
)
from .numerics.tensor import add, getitem


@dataclass
class VkaConfig:
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    vocab_size: int = 64
    n_query: int = 8
    prompt_ids: list = field(default_factory=list)
    max_seq_len: int = 32
    d_image: int = 64
    d_out: int = 128
    bos_id: int = 0
    eos_id: int = 1

    def validate(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"VKA dim {self.d_model} not divisible by {self.n_heads} heads")
        if self.n_query < 1:
            raise ConfigError("VKA needs at least one query token")
        if not self.prompt_ids or self.prompt_ids[0] != self.bos_id:
            raise ConfigError("knowledge prompt must start with the BOS token")
        if len(self.prompt_ids) + self.n_query > self.max_seq_len:
            raise ConfigError("prompt plus query tokens exceed max_seq_len")


class VkaBlock(Module):
    """Pre-LN: causal self-attention, cross-attention to ``h_I``, GELU MLP."""

    def __init__(self, d, n_heads, d_image, group="vka"):
        self.ln1 = LayerNorm(d, group)
        self.self_attn = MultiHeadAttention(d, n_heads, group)
        self.ln2 = LayerNorm(d, group)
        self.cross_attn = MultiHeadAttention(d, n_heads, group, d_kv=d_image, zero_out=True)
        self.ln3 = LayerNorm(d, group)
        self.ffn = FeedForward(d, 4 * d, group)

    def __call__(self, x, image_seq, mask):
        x = add(x, self.self_attn(self.ln1(x), mask=mask))
        x = add(x, self.cross_attn(self.ln2(x), kv=image_seq))
        return add(x, self.ffn(self.ln3(x)))


class VKA(Module):
    def __init__(self, cfg: VkaConfig, group="vka"):
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = Parameter((cfg.vocab_size, d), group)
        self.pos_emb = Parameter((cfg.max_seq_len, d), group)
        self.blocks = [VkaBlock(d, cfg.n_heads, cfg.d_image, group) for _ in range(cfg.n_blocks)]
        self.ln_f = LayerNorm(d, group)
        self.lm_head = Linear(d, cfg.vocab_size, group, bias=False)
        self.query_tokens = Parameter((cfg.n_query, d), group)
        self.knowledge_proj = Linear(d, cfg.d_out, group)

    # ----------------------------------------------------------- backbone

    def backbone(self, x, image_seq):
        """Hidden states after the final norm for an embedded sequence ``[B, L, d]``."""
        L = x.shape[1]
        if L > self.cfg.max_seq_len:
            raise TruncationError(f"VKA sequence of {L} tokens exceeds max_seq_len "
                                  f"{self.cfg.max_seq_len}")
        if image_seq.shape[-1] != self.cfg.d_image:
            raise ShapeError(f"image sequence dim {image_seq.shape[-1]} != {self.cfg.d_image}")
        x = add(x, getitem(self.pos_emb, slice(0, L)))
        mask = causal_mask(L)
        for blk in self.blocks:
            x = blk(x, image_seq, mask)
        return self.ln_f(x)

    def embed(self, ids):
        return embedding(np.asarray(ids), self.tok_emb)

    def pretrain_logits(self, image_seq, target_ids):
        """Teacher-forced logits ``[B, T, V]`` predicting ``target_ids`` ``[B, T]``.

        The input is ``prompt + target[:-1]``; row ``i`` of the result
        predicts ``target[i]``.
        """
        target_ids = np.asarray(target_ids)
        B, T = target_ids.shape
        P = len(self.cfg.prompt_ids)
        if P + T - 1 > self.cfg.max_seq_len:
            raise TruncationError(f"prompt ({P}) + target ({T}) tokens exceed max_seq_len "
                                  f"{self.cfg.max_seq_len}")
        prompt = np.broadcast_to(np.asarray(self.cfg.prompt_ids), (B, P))
        ids = np.concatenate([prompt, target_ids[:, :-1]], axis=1)
        h = self.backbone(self.embed(ids), image_seq)
        return self.lm_head(getitem(h, (slice(None), slice(P - 1, P - 1 + T))))

    def encode_knowledge(self, image_seq):
        """``h_KO`` ``[B, N, d_L]``: projected states at the query positions."""
        B = image_seq.shape[0]
        P = len(self.cfg.prompt_ids)
        prompt = self.embed(np.broadcast_to(np.asarray(self.cfg.prompt_ids), (B, P)))
        x = concat([prompt, broadcast_rows(self.query_tokens, B)], axis=1)
        h = self.backbone(x, image_seq)
        return self.knowledge_proj(getitem(h, (slice(None), slice(P, None))))

    def generate(self, image_seq, max_new_tokens):
        """Greedy decode after the knowledge prompt; returns one id list per image."""
        B = image_seq.shape[0]
        outs = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        ids = np.broadcast_to(np.asarray(self.cfg.prompt_ids), (B, len(self.cfg.prompt_ids)))
        budget = min(max_new_tokens, self.cfg.max_seq_len - ids.shape[1] + 1)
        for _ in range(max(budget, 0)):
            h = self.backbone(self.embed(ids), image_seq)
            logits = self.lm_head(getitem(h, (slice(None), slice(-1, None)))).data[:, 0]
            nxt = logits.argmax(axis=1)
            for b in range(B):
                if not done[b]:
                    if nxt[b] == self.cfg.eos_id:
                        done[b] = True
                    else:
                        outs[b].append(int(nxt[b]))
            if done.all():
                break
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
        return outs


def vka_generate(vka, image_seq, max_new_tokens):
    if isinstance(image_seq, Tensor) and image_seq.ndim == 2:
        image_seq = Tensor(image_seq.data[None])
    return vka.generate(image_seq, max_new_tokens)
