"""Layer set used by every model in the workbench.

Dense, embedding, layer normalization, causal self-attention blocks, and the
dueling value head. Modules hold parameters as Tensors; freezing a module is
just flipping requires_grad off, which also keeps its bytes untouched by the
optimizer.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, concatenate


class Module:
    """Minimal parameter container with recursive discovery."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for key, value in vars(self).items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(value, Tensor):
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(name))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}"))
                    elif isinstance(item, Tensor):
                        out.append((f"{name}.{i}", item))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def set_trainable(self, flag: bool):
        for _, p in self.named_parameters():
            p.requires_grad = flag

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=(fan_in, fan_out))


class Dense(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.w = Tensor(_glorot(rng, fan_in, fan_out), requires_grad=True)
        self.b = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator):
        self.table = Tensor(rng.normal(0.0, 0.02, size=(num_embeddings, dim)),
                            requires_grad=True)

    def __call__(self, indices: np.ndarray) -> Tensor:
        return self.table.take_rows(np.asarray(indices, dtype=np.int64))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / (var + self.eps).sqrt()
        return normed * self.gamma + self.beta


class CausalSelfAttention(Module):
    """Multi-head attention where position t sees only positions <= t."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        if dim % n_heads != 0:
            raise ValueError("dim must divide evenly across heads")
        self.wq = Dense(dim, dim, rng)
        self.wk = Dense(dim, dim, rng)
        self.wv = Dense(dim, dim, rng)
        self.wo = Dense(dim, dim, rng)
        self.n_heads = n_heads
        self.head_dim = dim // n_heads

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h, hd = self.n_heads, self.head_dim
        q = self.wq(x).reshape(b, t, h, hd).transpose(0, 2, 1, 3)
        k = self.wk(x).reshape(b, t, h, hd).transpose(0, 2, 1, 3)
        v = self.wv(x).reshape(b, t, h, hd).transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
        mask = np.triu(np.full((t, t), -1e9), k=1)  # additive, future blocked
        weights = (scores + mask).softmax(axis=-1)
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.wo(out)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.up = Dense(dim, hidden, rng)
        self.down = Dense(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(self.up(x).gelu())


class TransformerBlock(Module):
    """Pre-LN encoder block with causal attention."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, n_heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(dim, 4 * dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.ff(self.ln2(x))


class MLP(Module):
    """Stack of Dense layers with ReLU between (not after) them."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.layers = [Dense(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = layer(x).relu()
        return self.layers[-1](x)


class DuelingHead(Module):
    """State-value + mean-centered advantages -> action values.

    Adding any constant to all advantages leaves the combined output
    unchanged, which is the dueling identity the tests pin down.
    """

    def __init__(self, fan_in: int, n_actions: int, rng: np.random.Generator):
        self.value = Dense(fan_in, 1, rng)
        self.advantage = Dense(fan_in, n_actions, rng)

    def __call__(self, features: Tensor) -> Tensor:
        v = self.value(features)
        a = self.advantage(features)
        return v + a - a.mean(axis=-1, keepdims=True)


def sinusoidal_positions(t: int, dim: int) -> np.ndarray:
    """Fixed positional encoding table of shape (t, dim)."""
    pos = np.arange(t)[:, None]
    i = np.arange(dim)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.zeros((t, dim))
    table[:, 0::2] = np.sin(angles[:, 0::2])
    table[:, 1::2] = np.cos(angles[:, 1::2])
    return table


__all__ = [
    "Module", "Dense", "Embedding", "LayerNorm", "CausalSelfAttention",
    "FeedForward", "TransformerBlock", "MLP", "DuelingHead",
    "sinusoidal_positions", "concatenate",
]
