"""Multi-head scaled dot-product attention and residual blocks."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .autodiff import LayerNorm, Linear, MLP, Module, Tensor, softmax
from .autodiff.nn import Init
from .errors import ConfigurationError, DimensionError


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [..., n, d] -> [..., heads, n, d/heads]
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    k = len(lead)
    return x.transpose(*range(k), k + 1, k, k + 2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    k = len(lead)
    return x.transpose(*range(k), k + 1, k, k + 2).reshape(*lead, n, h * dh)


class MultiHeadAttention(Module):
    """Projections ``q, k, v, out`` around scaled dot-product attention.

    ``zero_out`` zero-initialises the output projection so a residual block
    built on top starts as the identity.
    """

    def __init__(self, init: Init, d: int, heads: int, zero_out: bool = False):
        if heads < 1 or d % heads:
            raise ConfigurationError(f"heads={heads} must divide width d={d}")
        self.heads = heads
        self.q = Linear(init, d, d)
        self.k = Linear(init, d, d)
        self.v = Linear(init, d, d)
        self.out = Linear(init, d, d, weight_init="zeros" if zero_out else "xavier_uniform")

    def __call__(self, query: Tensor, key: Tensor, value: Optional[Tensor] = None) -> Tuple[Tensor, np.ndarray]:
        """Attend ``query[..., nq, d]`` over ``key/value[..., nk, d]``.

        Returns the projected output and the attention weights
        ``[..., heads, nq, nk]`` as a plain array.
        """
        value = key if value is None else value
        if query.shape[-1] != key.shape[-1] or key.shape[:-1] != value.shape[:-1]:
            raise DimensionError(f"attention: query {query.shape}, key {key.shape}, value {value.shape}")
        q = _split_heads(self.q(query), self.heads)
        k = _split_heads(self.k(key), self.heads)
        v = _split_heads(self.v(value), self.heads)
        scale = 1.0 / np.sqrt(q.shape[-1])
        logits = (q @ k.swapaxes(-1, -2)) * scale
        weights = softmax(logits, axis=-1)
        return self.out(_merge_heads(weights @ v)), weights.data


class CrossAttentionBlock(Module):
    """Pre-norm residual cross-attention: ``q + Attn(LN(q), LN(kv))``."""

    def __init__(self, init: Init, d: int, heads: int, zero_out: bool = False):
        self.norm_q = LayerNorm(init, d)
        self.norm_kv = LayerNorm(init, d)
        self.attn = MultiHeadAttention(init, d, heads, zero_out=zero_out)

    def __call__(self, query: Tensor, context: Tensor, key_offset: Optional[Tensor] = None):
        kv = self.norm_kv(context)
        key = kv if key_offset is None else kv + key_offset
        update, weights = self.attn(self.norm_q(query), key, kv)
        return query + update, weights


class TransformerBlock(Module):
    """Pre-norm self-attention block followed by an MLP."""

    def __init__(self, init: Init, d: int, heads: int, mlp_ratio: int = 2):
        self.norm1 = LayerNorm(init, d)
        self.attn = MultiHeadAttention(init, d, heads)
        self.norm2 = LayerNorm(init, d)
        self.mlp = MLP(init, d, mlp_ratio * d)

    def __call__(self, x: Tensor):
        h = self.norm1(x)
        update, weights = self.attn(h, h)
        x = x + update
        return x + self.mlp(self.norm2(x)), weights
