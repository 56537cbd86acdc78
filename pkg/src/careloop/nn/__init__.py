"""Minimal neural substrate: autodiff tensors, layers, losses, optimization."""

from .autograd import Tensor, concatenate, no_grad, stack, where
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .layers import (
    CausalSelfAttention,
    Dense,
    DuelingHead,
    Embedding,
    FeedForward,
    LayerNorm,
    MLP,
    Module,
    TransformerBlock,
    sinusoidal_positions,
)
from .losses import cross_entropy, entropy_of_softmax, huber, smooth_l1
from .optim import AdamW, PlateauScheduler

__all__ = [
    "Tensor", "concatenate", "no_grad", "stack", "where",
    "load_checkpoint", "save_checkpoint", "grad_check",
    "CausalSelfAttention", "Dense", "DuelingHead", "Embedding", "FeedForward",
    "LayerNorm", "MLP", "Module", "TransformerBlock", "sinusoidal_positions",
    "cross_entropy", "entropy_of_softmax", "huber", "smooth_l1",
    "AdamW", "PlateauScheduler",
]
