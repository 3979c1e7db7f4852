"""Transformer sublayers built on :mod:`bistet.autodiff`.

All functions take batched sequences shaped ``[batch, length, d]``; 2-D
``[length, d]`` inputs are accepted and returned unbatched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .autodiff import (
    MASK_BIAS,
    ContractError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    layer_norm as _layer_norm,
    matmul,
    relu,
    reshape,
    softmax,
    transpose,
)

LN_EPS = 1e-6


class ConfigError(ValueError):
    pass


@dataclass
class AttentionParams:
    """Projections of one attention sublayer.

    ``wq``/``wk``/``wv`` hold the per-head ``d x d_h`` projections side by
    side as one ``d x d`` matrix (head ``i`` owns columns ``i*d_h:(i+1)*d_h``).
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads:
            raise ConfigError(f"d_model={d} is not divisible by heads={self.heads}")


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


@lru_cache(maxsize=64)
def _mask_bias(mask_bytes: bytes, shape: tuple) -> np.ndarray:
    mask = np.frombuffer(mask_bytes, dtype=bool).reshape(shape)
    return np.where(mask, 0.0, MASK_BIAS)


def mask_bias(mask: np.ndarray) -> np.ndarray:
    """Additive bias for a boolean keep-mask: 0 where kept, -1e9 where masked."""
    mask = np.ascontiguousarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractError("attention mask has a fully-masked query row")
    return _mask_bias(mask.tobytes(), mask.shape)


def scaled_dot_product_attention(q, k, v, mask: Optional[np.ndarray] = None):
    """softmax(QK^T / sqrt(d_h) + bias) V.

    ``mask`` is a boolean ``[L_q, L_k]`` array, True where attention is
    allowed. Returns ``(output, weights)``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"keys {k.shape} and values {v.shape} differ in length")
    d_h = q.shape[-1]
    scores = matmul(q, _swap_last(k)) * (1.0 / math.sqrt(d_h))
    if mask is not None:
        scores = add(scores, mask_bias(mask))
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, length, d = x.shape
    return transpose(reshape(x, (b, length, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, length, d_h = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, length, h * d_h))


def multi_head_attention(x_q, x_kv, params: AttentionParams, mask: Optional[np.ndarray] = None):
    """Concat(head_1..head_h) W^O with head_i = Attention(x_q W_i^Q, x_kv W_i^K, x_kv W_i^V).

    Returns ``(output, weights)`` where weights has shape ``[batch, h, L_q, L_k]``.
    """
    x_q, x_kv = as_tensor(x_q), as_tensor(x_kv)
    unbatched = x_q.ndim == 2
    if unbatched:
        x_q = reshape(x_q, (1,) + x_q.shape)
        x_kv = reshape(x_kv, (1,) + x_kv.shape)
    d = params.wq.shape[0]
    if x_q.shape[-1] != d or x_kv.shape[-1] != d:
        raise ShapeError(f"inputs {x_q.shape}/{x_kv.shape} do not match d_model={d}")
    h = params.heads
    q = _split_heads(matmul(x_q, params.wq), h)
    k = _split_heads(matmul(x_kv, params.wk), h)
    v = _split_heads(matmul(x_kv, params.wv), h)
    heads, weights = scaled_dot_product_attention(q, k, v, mask)
    out = matmul(_merge_heads(heads), params.wo)
    if unbatched:
        out = reshape(out, out.shape[1:])
        weights = reshape(weights, weights.shape[1:])
    return out, weights


@lru_cache(maxsize=32)
def _pe_table(length: int, d: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i2 = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.setflags(write=False)
    return pe


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Sinusoidal table: sin(pos / 10000^(2i/d)) on even dims, cos on odd."""
    if d % 2:
        raise ConfigError(f"positional encoding needs an even dimension, got {d}")
    return _pe_table(length, d)


def layer_norm(x, scale, shift, eps: float = LN_EPS) -> Tensor:
    return _layer_norm(x, scale, shift, eps)


def feed_forward(x, params: FeedForwardParams) -> Tensor:
    """relu(x W1 + b1) W2 + b2, applied position-wise."""
    hidden = relu(add(matmul(x, params.w1), params.b1))
    return add(matmul(hidden, params.w2), params.b2)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))
