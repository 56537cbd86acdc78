"""Finite-difference validation harness for the autodiff engine."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    `f` maps a Tensor to a scalar Tensor. Error per coordinate is
    |autodiff - fd| / (|fd| + 1e-8); the max over coordinates is returned.
    """
    x.zero_grad()
    out = f(x)
    if out.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite function value")
    out.backward()
    auto = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    if not np.isfinite(auto).all():
        raise FloatingPointError("non-finite autodiff gradient")

    flat = x.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("non-finite intermediate in finite differences")
        fd[i] = (fp - fm) / (2.0 * h)
    fd = fd.reshape(x.shape)
    rel = np.abs(auto - fd) / (np.abs(fd) + 1e-8)
    return float(rel.max())
