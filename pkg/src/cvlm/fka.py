"""Fine-grained knowledge adapter.

Learnable distillation vectors are joined with the instruction embeddings
and refined by a small bidirectional transformer that cross-attends to the
region knowledge bank. The first ``LD * LN`` output rows are cut into one
``LD``-row prefix per host-LM layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import (
    MASK_VALUE,
    FeedForward,
    LayerNorm,
    Module,
    MultiHeadAttention,
    Parameter,
    Tensor,
    broadcast_rows,
    concat,
)
from .numerics.tensor import add, getitem, reshape
from .vision import crop_region, pad_regions, propose_regions


@dataclass
class FkaConfig:
    n_layers: int = 4
    n_heads: int = 4
    per_layer_len: int = 2  # LD
    host_layers: int = 4  # LN
    d_model: int = 128

    @property
    def n_distill(self):
        return self.per_layer_len * self.host_layers

    def validate(self):
        if self.per_layer_len < 0:
            raise ConfigError("per-layer distillation length must be >= 0")
        if self.host_layers < 1 or self.n_layers < 1:
            raise ConfigError("FKA and host need at least one layer")
        if self.d_model % self.n_heads:
            raise ConfigError(f"FKA dim {self.d_model} not divisible by {self.n_heads} heads")


@dataclass
class RegionKnowledgeBank:
    """``entries`` ``[B, R * N, d_L]`` with per-image region boxes and pad flags."""

    entries: Tensor
    region_meta: list = field(default_factory=list)


@dataclass
class InjectionPlan:
    slices: list  # LN tensors of shape [B, LD, d_L]

    @property
    def per_layer_len(self):
        return self.slices[0].shape[1] if self.slices else 0

    def __len__(self):
        return len(self.slices)


class FkaLayer(Module):
    def __init__(self, d, n_heads, group="fka"):
        self.ln1 = LayerNorm(d, group)
        self.self_attn = MultiHeadAttention(d, n_heads, group)
        self.ln2 = LayerNorm(d, group)
        self.cross_attn = MultiHeadAttention(d, n_heads, group)
        self.ln3 = LayerNorm(d, group)
        self.ffn = FeedForward(d, 4 * d, group)

    def __call__(self, x, bank, mask):
        x = add(x, self.self_attn(self.ln1(x), mask=mask))
        x = add(x, self.cross_attn(self.ln2(x), kv=bank))
        return add(x, self.ffn(self.ln3(x)))


class FKA(Module):
    def __init__(self, cfg: FkaConfig, group="fka"):
        cfg.validate()
        self.cfg = cfg
        self.distill = Parameter((cfg.n_distill, cfg.d_model), group)
        self.layers = [FkaLayer(cfg.d_model, cfg.n_heads, group) for _ in range(cfg.n_layers)]

    def __call__(self, instruction_embeds, bank, instruction_mask=None):
        """Return ``h_FKA`` ``[B, N_D, d_L]``.

        ``instruction_mask`` ``[B, M]`` marks real (non-pad) instruction
        tokens; pad tokens are hidden from every query.
        """
        B, M, d = instruction_embeds.shape
        n_d = self.cfg.n_distill
        if d != self.cfg.d_model or bank.shape[-1] != self.cfg.d_model:
            raise ConfigError(f"FKA dim {self.cfg.d_model} does not match instruction dim {d} "
                              f"or bank dim {bank.shape[-1]}")
        if n_d == 0:
            return Tensor(np.zeros((B, 0, d)))
        x = concat([broadcast_rows(self.distill, B), instruction_embeds], axis=1)
        mask = None
        if instruction_mask is not None:
            keep = np.concatenate([np.ones((B, n_d), dtype=bool),
                                   np.asarray(instruction_mask, dtype=bool)], axis=1)
            mask = np.where(keep, 0.0, MASK_VALUE)[:, None, None, :]
        for layer in self.layers:
            x = layer(x, bank, mask)
        return getitem(x, (slice(None), slice(0, n_d)))


def plan_injection(h_fka, host_layers):
    """Split ``[B, LD * LN, d]`` into ``LN`` consecutive ``LD``-row slices."""
    n = h_fka.shape[1]
    if host_layers < 1 or n % host_layers:
        raise ConfigError(f"{n} distillation rows cannot be split over {host_layers} layers")
    ld = n // host_layers
    return InjectionPlan([getitem(h_fka, (slice(None), slice(i * ld, (i + 1) * ld)))
                          for i in range(host_layers)])


def region_crops(image, k=5, proposer=None):
    """Top-``k`` regions (padded to ``k``) and their resampled crops."""
    regions = pad_regions(propose_regions(image, k, proposer), k)
    return regions, [crop_region(image, r) for r in regions]


def build_region_bank(images, vision, vka, k=5, proposer=None, crop_features=None):
    """Encode the top regions of each image through the encoder and the VKA.

    ``crop_features`` may supply precomputed encoder outputs
    ``[B * k, 1 + P, d_V]`` (useful when the encoder is frozen).
    """
    meta = []
    if crop_features is None:
        pixels = []
        for img in images:
            regions, crops = region_crops(img, k, proposer)
            meta.append([(r.box, r.confidence, r.padded) for r in regions])
            pixels.extend(c.pixels for c in crops)
        crop_features = vision(np.stack(pixels))
    B = crop_features.shape[0] // k
    if crop_features.shape[0] != B * k:
        raise ShapeError(f"{crop_features.shape[0]} crop encodings is not a multiple of {k}")
    h = vka.encode_knowledge(crop_features)
    _, N, d = h.shape
    return RegionKnowledgeBank(reshape(h, (B, k * N, d)), meta)
