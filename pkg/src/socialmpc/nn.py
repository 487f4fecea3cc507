"""Layers built on :mod:`socialmpc.tensor`."""

from __future__ import annotations

import math

import numpy as np

from socialmpc import tensor as T
from socialmpc.tensor import Tensor


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0):
        self.W = _param(rng.normal(0.0, scale / math.sqrt(n_in), size=(n_in, n_out)))
        self.b = _param(np.zeros(n_out))

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        lead = x.shape[:-1]
        flat = x.reshape((-1, x.shape[-1])) if x.ndim != 2 else x
        out = T.matmul(flat, self.W) + self.b
        return out.reshape(lead + (self.W.shape[1],)) if x.ndim != 2 else out


class MLP(Module):
    def __init__(self, sizes: list[int], rng: np.random.Generator, out_scale: float = 1.0):
        self.layers = [Linear(a, b, rng, scale=out_scale if i == len(sizes) - 2 else 1.0)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x


class LayerNorm(Module):
    def __init__(self, d: int):
        self.g = _param(np.ones(d))
        self.b = _param(np.zeros(d))

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, eps=1e-6) * self.g + self.b


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def __call__(self, xq, xk, mask=None, xv=None) -> Tensor:
        xv = xk if xv is None else xv
        return self.o(T.attention(self.q(xq), self.k(xk), self.v(xv), mask, self.n_heads))


class AttentionBlock(Module):
    """Pre-norm residual block: attention (self or cross) followed by an FFN."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, cross: bool = False):
        self.ln_q = LayerNorm(d)
        self.ln_kv = LayerNorm(d) if cross else None
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln_ff = LayerNorm(d)
        self.ff = MLP([d, 2 * d, d], rng)

    def __call__(self, x, memory=None, mask=None, values=None) -> Tensor:
        q = self.ln_q(x)
        k = q if memory is None else self.ln_kv(memory)
        v = None if values is None else self.ln_kv(values)
        x = x + self.attn(q, k, mask, v)
        return x + self.ff(self.ln_ff(x))


class DecoderLayer(Module):
    """Transformer decoder layer: query self-attention, cross-attention, FFN."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        self.ln_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, n_heads, rng)
        self.cross = AttentionBlock(d, n_heads, rng, cross=True)

    def __call__(self, x, memory, mask=None) -> Tensor:
        h = self.ln_self(x)
        x = x + self.self_attn(h, h)
        return self.cross(x, memory, mask)
