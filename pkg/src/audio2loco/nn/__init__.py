from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import check_gradients
from .layers import (
    AdaptiveModulation,
    DenseNet,
    LayerNorm,
    Module,
    TemporalAttention,
    TransformerBlock,
    sinusoidal_encoding,
    softmax,
    temporal_attention,
)
from .optim import Adam, AdamState, adam_step, clip_grad_norm, global_norm

__all__ = [
    "Adam",
    "AdamState",
    "AdaptiveModulation",
    "DenseNet",
    "LayerNorm",
    "Module",
    "TemporalAttention",
    "TransformerBlock",
    "adam_step",
    "check_gradients",
    "clip_grad_norm",
    "global_norm",
    "load_checkpoint",
    "save_checkpoint",
    "sinusoidal_encoding",
    "softmax",
    "temporal_attention",
]
