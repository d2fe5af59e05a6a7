"""Small deterministic neural-network kernel on top of torch tensors."""

from callikit.nn.checkpoint import checkpoint_digest, load_checkpoint, save_checkpoint
from callikit.nn.gradcheck import grad_check, numeric_grad
from callikit.nn.layers import (
    Dense,
    FeedForward,
    LayerNorm,
    MultiHeadAttention,
    layer_norm,
    mse_loss,
    scaled_dot_attention,
    sinusoidal_encoding,
)
from callikit.nn.optim import AdamW, LrSchedule, OptimState, adamw_step, cosine_warm_restarts

__all__ = [
    "AdamW",
    "Dense",
    "FeedForward",
    "LayerNorm",
    "LrSchedule",
    "MultiHeadAttention",
    "OptimState",
    "adamw_step",
    "checkpoint_digest",
    "cosine_warm_restarts",
    "grad_check",
    "layer_norm",
    "load_checkpoint",
    "mse_loss",
    "numeric_grad",
    "save_checkpoint",
    "scaled_dot_attention",
    "sinusoidal_encoding",
]
