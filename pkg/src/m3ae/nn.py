"""Minimal module system and Transformer building blocks on top of ``tensor``."""

from __future__ import annotations

import contextlib
import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

_CHECK_ATTENTION_ROWS = False


@contextlib.contextmanager
def check_attention_rows():
    """Assert inside every attention call that weight rows sum to one."""
    global _CHECK_ATTENTION_ROWS
    prev = _CHECK_ATTENTION_ROWS
    _CHECK_ATTENTION_ROWS = True
    try:
        yield
    finally:
        _CHECK_ATTENTION_ROWS = prev


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Module:
    """Parameter container; parameters and submodules are discovered by attribute scan."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        """Cast every parameter in place (drops gradients)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:3]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim, dtype=np.float32))
        self.bias = Parameter(np.zeros(dim, dtype=np.float32))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    def __init__(self, dim: int, rng: np.random.Generator, expansion: int = 4, d_out: int | None = None):
        self.fc1 = Linear(dim, expansion * dim, rng)
        self.fc2 = Linear(expansion * dim, d_out or dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * dh)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """softmax(q k^T / sqrt(d_head)) v per head, heads concatenated.

    q is (..., Nq, D); k and v are (..., Nk, D). No projections are applied.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value row counts differ: {k.shape} vs {v.shape}")
    if not (q.shape[-1] == k.shape[-1] == v.shape[-1]):
        raise ValueError(f"width mismatch: {q.shape}, {k.shape}, {v.shape}")
    d = q.shape[-1]
    if heads <= 0 or d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    logits = (qh @ kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // heads))
    weights = T.softmax(logits, axis=-1)
    if _CHECK_ATTENTION_ROWS:
        rows = weights.data.sum(axis=-1)
        assert np.allclose(rows, 1.0, atol=1e-5), "attention rows do not sum to 1"
    return _merge_heads(weights @ vh)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, query: Tensor, context: Tensor) -> Tensor:
        if query.shape[-1] != context.shape[-1]:
            raise ValueError(f"attention width mismatch: {query.shape} vs {context.shape}")
        mixed = scaled_dot_attention(self.q(query), self.k(context), self.v(context), self.heads)
        return self.out(mixed)


class TransformerLayer(Module):
    """Pre-norm self-attention + feedforward block."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.0):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff = FeedForward(dim, rng)
        self.dropout = dropout
        self._rng = np.random.default_rng(rng.integers(2**63))

    def _drop(self, x: Tensor) -> Tensor:
        if self.training and self.dropout > 0:
            return T.dropout(x, self.dropout, self._rng)
        return x

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self._drop(self.attn(h, h))
        return x + self._drop(self.ff(self.norm2(x)))


class TransformerStack(Module):
    """``depth`` pre-norm layers followed by a final norm; depth 0 is the identity."""

    def __init__(self, dim: int, heads: int, depth: int, rng: np.random.Generator, dropout: float = 0.0):
        self.layers = [TransformerLayer(dim, heads, rng, dropout) for _ in range(depth)]
        self.norm = LayerNorm(dim) if depth > 0 else None

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.norm(x) if self.norm is not None else x
