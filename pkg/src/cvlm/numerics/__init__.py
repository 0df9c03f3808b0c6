"""Tensor library: autodiff core, layers, optimizer math."""

from .kernels import BACKEND
from .layers import (
    FeedForward,
    LayerNorm,
    Linear,
    LoRALinear,
    Module,
    MultiHeadAttention,
    attention,
    causal_mask,
    lora_apply,
    lora_merge,
    multi_head_attention,
    sinusoidal_positions,
)
from .optim import AdamW, adamw_step, clip_by_global_norm, cosine_lr, global_norm
from .tensor import (
    MASK_VALUE,
    Parameter,
    StaleTapeError,
    Tape,
    Tensor,
    broadcast_rows,
    concat,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    linear,
    matmul,
    softmax,
)

__all__ = [
    "BACKEND", "FeedForward", "LayerNorm", "Linear", "LoRALinear", "Module",
    "MultiHeadAttention", "attention", "causal_mask", "lora_apply", "lora_merge",
    "multi_head_attention", "sinusoidal_positions", "AdamW", "adamw_step",
    "clip_by_global_norm", "cosine_lr", "global_norm", "MASK_VALUE", "Parameter",
    "StaleTapeError", "Tape", "Tensor", "broadcast_rows", "concat", "cross_entropy",
    "embedding", "gelu", "layer_norm", "linear", "matmul", "softmax",
]
