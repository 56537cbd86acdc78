"""Loss functions shared by the dynamics, outcome, and value models."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, where


def smooth_l1(pred: Tensor, target: Tensor, mask: np.ndarray | None = None,
              beta: float = 1.0) -> Tensor:
    """Mean Smooth-L1 over valid positions.

    Elementwise: 0.5*d^2/beta for |d| < beta, |d| - 0.5*beta otherwise.
    `mask` selects valid (batch, time) positions; it is broadcast over the
    trailing feature axis. An all-false mask is an error, not a zero loss.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target.detach() if isinstance(target, Tensor) else pred - Tensor(target)
    adiff = diff.abs()
    quad = (diff * diff) * (0.5 / beta)
    lin = adiff - 0.5 * beta
    loss = where(adiff.data < beta, quad, lin)
    if mask is None:
        return loss.mean()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != loss.shape:
        if mask.shape != loss.shape[: mask.ndim]:
            raise ValueError(f"mask shape {mask.shape} does not align with {loss.shape}")
        mask = np.broadcast_to(mask.reshape(mask.shape + (1,) * (loss.ndim - mask.ndim)),
                               loss.shape)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("smooth_l1 over an all-false mask")
    return (loss * mask.astype(np.float64)).sum() * (1.0 / n)


def huber(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    """Huber loss (mean), the TD-loss of the value networks."""
    return smooth_l1(pred, target, mask=None, beta=delta)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer class targets."""
    targets = np.asarray(targets, dtype=np.int64)
    logp = logits - logits.logsumexp(axis=-1, keepdims=True)
    picked = logp[np.arange(targets.shape[0]), targets]
    return -picked.mean()


def entropy_of_softmax(logits: Tensor) -> Tensor:
    """Mean Shannon entropy (nats) of softmax rows; used as a confusion target."""
    logp = logits - logits.logsumexp(axis=-1, keepdims=True)
    p = logp.exp()
    return -(p * logp).sum(axis=-1).mean()
