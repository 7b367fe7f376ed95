"""Small neural-net building blocks on top of the tensor engine."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .tensor import (
    MASK_VALUE,
    Tensor,
    affine,
    concat,
    layer_norm,
    matmul,
    narrow,
    relu,
    silu,
    softmax_rows,
)

_ACTIVATIONS = {"silu": silu, "relu": relu}


def activation_fn(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}; choose from {sorted(_ACTIVATIONS)}")


class Module:
    """Base class providing recursive, deterministically ordered parameter walks."""

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((attr, value))
            elif isinstance(value, Module):
                out.extend((f"{attr}.{sub}", p) for sub, p in value.named_parameters())
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(
                            (f"{attr}.{i}.{sub}", p) for sub, p in item.named_parameters()
                        )
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = Tensor(glorot(rng, d_in, d_out), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if self.bias is None:
            return matmul(x, self.weight)
        return affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift, eps=self.eps)


class FeedForward(Module):
    """Two-layer position-wise network; also serves as one expert."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int, activation: str = "silu"):
        self.lin1 = Linear(rng, dim, hidden)
        self.lin2 = Linear(rng, hidden, dim)
        self.act = activation
        self._act_fn = activation_fn(activation)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(self._act_fn(self.lin1(x)))

    def copy_weights_from(self, other: "FeedForward") -> None:
        self.lin1.weight.data = other.lin1.weight.data.copy()
        self.lin1.bias.data = other.lin1.bias.data.copy()
        self.lin2.weight.data = other.lin2.weight.data.copy()
        self.lin2.bias.data = other.lin2.bias.data.copy()


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads != 0:
            raise ConfigError(f"hidden width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.q_proj = Linear(rng, dim, dim)
        self.k_proj = Linear(rng, dim, dim)
        self.v_proj = Linear(rng, dim, dim)
        self.out_proj = Linear(rng, dim, dim)

    def __call__(self, query: Tensor, memory: Tensor, mask: np.ndarray | None = None) -> Tensor:
        q = self.q_proj(query)
        k = self.k_proj(memory)
        v = self.v_proj(memory)
        outs = []
        for h in range(self.heads):
            lo = h * self.head_dim
            qh = narrow(q, 1, lo, self.head_dim)
            kh = narrow(k, 1, lo, self.head_dim)
            vh = narrow(v, 1, lo, self.head_dim)
            scores = matmul(qh, kh.T) * self.scale
            if mask is not None:
                scores = scores + Tensor(mask)
            outs.append(matmul(softmax_rows(scores), vh))
        return self.out_proj(concat(outs, axis=1))


class ConvGatedMLP(Module):
    """Local-context branch: linear gate modulated by a depthwise 3-tap conv."""

    def __init__(self, rng: np.random.Generator, dim: int):
        self.up = Linear(rng, dim, 2 * dim)
        limit = math.sqrt(1.0 / 3.0)
        self.kernel = Tensor(rng.uniform(-limit, limit, size=(3, dim)), requires_grad=True)
        self.kernel_bias = Tensor(np.zeros(dim), requires_grad=True)
        self.down = Linear(rng, dim, dim)
        self.dim = dim

    def _depthwise3(self, x: Tensor) -> Tensor:
        length = x.shape[0]
        pad = Tensor(np.zeros((1, self.dim)))
        padded = concat([pad, x, pad], axis=0)
        taps = [narrow(self.kernel, 0, t, 1).reshape(self.dim) for t in range(3)]
        y = narrow(padded, 0, 0, length) * taps[0]
        y = y + narrow(padded, 0, 1, length) * taps[1]
        y = y + narrow(padded, 0, 2, length) * taps[2]
        return y + self.kernel_bias

    def __call__(self, x: Tensor) -> Tensor:
        u = silu(self.up(x))
        gate = narrow(u, 1, 0, self.dim)
        conv_in = narrow(u, 1, self.dim, self.dim)
        return self.down(gate * self._depthwise3(conv_in))


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Absolute sine/cosine position table of shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = np.arange(0, dim, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, half / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : table[:, 1::2].shape[1]])
    return table


def causal_mask(length: int) -> np.ndarray:
    """Additive mask blocking attention to strictly-future positions."""
    mask = np.zeros((length, length), dtype=np.float64)
    mask[np.triu_indices(length, k=1)] = MASK_VALUE
    return mask
