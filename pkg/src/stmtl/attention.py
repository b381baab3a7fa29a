"""Multi-head attention and post-norm transformer encoder/decoder layers.

Attention weights are always returned alongside outputs so the decoder's
query-to-grid maps can be exported for visualization.  Every weight matrix
passes a row-stochasticity watchdog (rows sum to 1 within 1e-9); the check
is cheap and stays on during training.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, NumericError

ROW_SUM_TOL = 1e-9

# Running count of watchdog checks that passed, for the training-epoch audit.
row_checks_passed = 0


def _watch_row_stochastic(weights: np.ndarray):
    global row_checks_passed
    drift = np.abs(weights.sum(axis=1) - 1.0).max() if weights.size else 0.0
    if drift > ROW_SUM_TOL:
        raise NumericError(f"attention rows drifted from 1 by {drift:.3e}")
    row_checks_passed += 1


def scaled_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(QKᵀ/√d_k)·V; returns (output, weight matrix)."""
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"attention: query width {q.shape} vs key width {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"attention: key rows {k.shape} vs value rows {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[1])
    weights = ad.softmax_rows(ad.mul(ad.matmul(q, ad.transpose2d(k)), ad.constant(scale)))
    _watch_row_stochastic(weights.data)
    return ad.matmul(weights, v), weights


class MultiHeadAttention:
    """Per-head Q/K/V projections, concatenated heads, output projection."""

    def __init__(self, rng: np.random.Generator, model_dim: int, n_heads: int):
        if model_dim % n_heads != 0:
            raise ConfigError(f"model dim {model_dim} not divisible by {n_heads} heads")
        self.model_dim = model_dim
        self.n_heads = n_heads
        self.head_dim = model_dim // n_heads
        self.w_q = [ad.uniform_init(rng, (model_dim, self.head_dim), model_dim)
                    for _ in range(n_heads)]
        self.w_k = [ad.uniform_init(rng, (model_dim, self.head_dim), model_dim)
                    for _ in range(n_heads)]
        self.w_v = [ad.uniform_init(rng, (model_dim, self.head_dim), model_dim)
                    for _ in range(n_heads)]
        self.w_o = ad.uniform_init(rng, (model_dim, model_dim), model_dim)

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor
                 ) -> tuple[Tensor, list[Tensor]]:
        if q_in.shape[1] != self.model_dim:
            raise DimensionError(
                f"multi-head attention built for width {self.model_dim}, got {q_in.shape}")
        outs, weights = [], []
        for h in range(self.n_heads):
            out_h, w_h = scaled_attention(ad.matmul(q_in, self.w_q[h]),
                                          ad.matmul(k_in, self.w_k[h]),
                                          ad.matmul(v_in, self.w_v[h]))
            outs.append(out_h)
            weights.append(w_h)
        return ad.matmul(ad.concat_last_dim(outs), self.w_o), weights

    def named_parameters(self, prefix: str):
        for h in range(self.n_heads):
            yield f"{prefix}.q{h}", self.w_q[h]
            yield f"{prefix}.k{h}", self.w_k[h]
            yield f"{prefix}.v{h}", self.w_v[h]
        yield f"{prefix}.out", self.w_o


class FeedForward:
    def __init__(self, rng, model_dim: int, hidden_dim: int):
        if hidden_dim < model_dim:
            raise ConfigError(f"feed-forward dim {hidden_dim} < model dim {model_dim}")
        self.w1 = ad.uniform_init(rng, (model_dim, hidden_dim), model_dim)
        self.b1 = ad.uniform_init(rng, (hidden_dim,), model_dim)
        self.w2 = ad.uniform_init(rng, (hidden_dim, model_dim), hidden_dim)
        self.b2 = ad.uniform_init(rng, (model_dim,), hidden_dim)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(x, self.w1), self.b1)),
                                self.w2), self.b2)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


class EncoderLayer:
    """Self-attention then feed-forward, each with residual + layer norm."""

    def __init__(self, rng, model_dim: int, n_heads: int, ff_dim: int):
        self.attn = MultiHeadAttention(rng, model_dim, n_heads)
        self.norm1 = LayerNorm(model_dim)
        self.ffn = FeedForward(rng, model_dim, ff_dim)
        self.norm2 = LayerNorm(model_dim)

    def __call__(self, x: Tensor) -> Tensor:
        attended, _ = self.attn(x, x, x)
        h = self.norm1(ad.add(x, attended))
        return self.norm2(ad.add(h, self.ffn(h)))

    def named_parameters(self, prefix: str):
        yield from self.attn.named_parameters(f"{prefix}.attn")
        yield from self.norm1.named_parameters(f"{prefix}.norm1")
        yield from self.ffn.named_parameters(f"{prefix}.ffn")
        yield from self.norm2.named_parameters(f"{prefix}.norm2")


class DecoderLayer:
    """Query self-attention, cross-attention over memory, feed-forward.

    ``query_self_attention=False`` drops the self-attention sublayer,
    leaving the bare query-to-memory attention form.
    """

    def __init__(self, rng, model_dim: int, n_heads: int, ff_dim: int,
                 query_self_attention: bool = True):
        self.query_self_attention = query_self_attention
        if query_self_attention:
            self.self_attn = MultiHeadAttention(rng, model_dim, n_heads)
            self.norm_self = LayerNorm(model_dim)
        self.cross_attn = MultiHeadAttention(rng, model_dim, n_heads)
        self.norm_cross = LayerNorm(model_dim)
        self.ffn = FeedForward(rng, model_dim, ff_dim)
        self.norm_ffn = LayerNorm(model_dim)

    def __call__(self, queries: Tensor, memory: Tensor
                 ) -> tuple[Tensor, list[Tensor]]:
        q = queries
        if self.query_self_attention:
            attended, _ = self.self_attn(q, q, q)
            q = self.norm_self(ad.add(q, attended))
        crossed, cross_weights = self.cross_attn(q, memory, memory)
        q = self.norm_cross(ad.add(q, crossed))
        out = self.norm_ffn(ad.add(q, self.ffn(q)))
        return out, cross_weights

    def named_parameters(self, prefix: str):
        if self.query_self_attention:
            yield from self.self_attn.named_parameters(f"{prefix}.self")
            yield from self.norm_self.named_parameters(f"{prefix}.norm_self")
        yield from self.cross_attn.named_parameters(f"{prefix}.cross")
        yield from self.norm_cross.named_parameters(f"{prefix}.norm_cross")
        yield from self.ffn.named_parameters(f"{prefix}.ffn")
        yield from self.norm_ffn.named_parameters(f"{prefix}.norm_ffn")


class EncoderStack:
    def __init__(self, rng, n_layers: int, model_dim: int, n_heads: int, ff_dim: int):
        self.model_dim = model_dim
        self.layers = [EncoderLayer(rng, model_dim, n_heads, ff_dim)
                       for _ in range(n_layers)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def named_parameters(self, prefix: str):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.{i}")


class DecoderStack:
    """Runs all layers and keeps the final layer's cross-attention weights."""

    def __init__(self, rng, n_layers: int, model_dim: int, n_heads: int, ff_dim: int,
                 query_self_attention: bool = True):
        self.model_dim = model_dim
        self.layers = [DecoderLayer(rng, model_dim, n_heads, ff_dim, query_self_attention)
                       for _ in range(n_layers)]

    def __call__(self, queries: Tensor, memory: Tensor
                 ) -> tuple[Tensor, list[Tensor]]:
        weights: list[Tensor] = []
        for layer in self.layers:
            queries, weights = layer(queries, memory)
        return queries, weights

    def named_parameters(self, prefix: str):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.{i}")
