"""Transformer building blocks shared by the teacher and the latent model.

Pre-norm residual blocks (``x + dropout(f(norm(x)))``) with a final norm per
stack. Masks are boolean with ``True`` meaning "may attend"; shapes broadcast
to ``(batch, queries, keys)``.
"""

from __future__ import annotations

import copy
import math

import torch
import torch.nn as nn


def clone(layer: nn.Module, n: int) -> nn.ModuleList:
    return nn.ModuleList([copy.deepcopy(layer) for _ in range(n)])


def padding_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    """``(batch, max_len)`` mask that is True on real positions."""
    max_len = int(lengths.max()) if max_len is None else max_len
    positions = torch.arange(max_len, device=lengths.device)
    return positions.unsqueeze(0) < lengths.unsqueeze(1)


def causal_mask(size: int, device=None) -> torch.Tensor:
    """``(1, size, size)`` lower-triangular mask: query i sees keys <= i."""
    return torch.tril(torch.ones(1, size, size, dtype=torch.bool, device=device))


def attention(q, k, v, mask=None, dropout=None):
    scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(q.size(-1))
    if mask is not None:
        scores = scores.masked_fill(~mask, -1e9)
    weights = scores.softmax(dim=-1)
    if dropout is not None:
        weights = dropout(weights)
    return torch.matmul(weights, v), weights


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, dropout: float = 0.1):
        super().__init__()
        if d_model % heads != 0:
            raise ValueError(f"hidden size {d_model} not divisible by {heads} heads")
        self.d_k = d_model // heads
        self.heads = heads
        self.linears = clone(nn.Linear(d_model, d_model), 4)
        self.dropout = nn.Dropout(dropout)

    def forward(self, q, k, v, mask=None):
        if mask is not None:
            # same mask for every head
            mask = mask.unsqueeze(1)
        nbatches = q.size(0)
        q, k, v = [
            lin(x).view(nbatches, -1, self.heads, self.d_k).transpose(1, 2)
            for lin, x in zip(self.linears, (q, k, v))
        ]
        x, _ = attention(q, k, v, mask, self.dropout)
        x = x.transpose(1, 2).contiguous().view(nbatches, -1, self.heads * self.d_k)
        return self.linears[-1](x)


class PositionWiseFeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float = 0.1):
        super().__init__()
        self.linear1 = nn.Linear(d_model, d_ff)
        self.linear2 = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.linear2(self.dropout(self.linear1(x).relu()))


class Sublayer(nn.Module):
    def __init__(self, size: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(size)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, layer):
        return x + self.dropout(layer(self.norm(x)))


class TokenEmbedding(nn.Module):
    def __init__(self, vocab_size: int, d_model: int):
        super().__init__()
        self.lut = nn.Embedding(vocab_size, d_model)
        self.d_model = d_model

    def forward(self, ids):
        return self.lut(ids) * math.sqrt(self.d_model)


class PositionalEncoding(nn.Module):
    """Fixed sinusoidal positions added to the input (not trainable)."""

    def __init__(self, d_model: int, dropout: float = 0.1, max_len: int = 512):
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        positions = torch.arange(0, max_len).unsqueeze(1)
        div_term = torch.exp(torch.arange(0, d_model, 2) * -math.log(10000.0) / d_model)
        pe = torch.zeros(max_len, d_model)
        pe[:, 0::2] = torch.sin(positions * div_term)
        pe[:, 1::2] = torch.cos(positions * div_term)[:, : d_model // 2]
        self.register_buffer("pe", pe.unsqueeze(0), persistent=False)

    def forward(self, x):
        return self.dropout(x + self.pe[:, : x.size(1)].to(x.dtype))


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, heads: int, d_ff: int, dropout: float):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, heads, dropout)
        self.ffn = PositionWiseFeedForward(d_model, d_ff, dropout)
        self.sublayers = clone(Sublayer(d_model, dropout), 2)

    def forward(self, x, mask):
        x = self.sublayers[0](x, lambda h: self.self_attn(h, h, h, mask))
        return self.sublayers[1](x, self.ffn)


class Encoder(nn.Module):
    def __init__(self, d_model: int, heads: int, d_ff: int, layers: int, dropout: float):
        super().__init__()
        self.layers = clone(EncoderLayer(d_model, heads, d_ff, dropout), layers)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x, mask):
        for layer in self.layers:
            x = layer(x, mask)
        return self.norm(x)


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, heads: int, d_ff: int, dropout: float):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, heads, dropout)
        self.cross_attn = MultiHeadAttention(d_model, heads, dropout)
        self.ffn = PositionWiseFeedForward(d_model, d_ff, dropout)
        self.sublayers = clone(Sublayer(d_model, dropout), 3)

    def forward(self, x, memory, memory_mask, self_mask):
        x = self.sublayers[0](x, lambda h: self.self_attn(h, h, h, self_mask))
        x = self.sublayers[1](x, lambda h: self.cross_attn(h, memory, memory, memory_mask))
        return self.sublayers[2](x, self.ffn)


class Decoder(nn.Module):
    """Decoder stack; causal only if the caller passes a causal ``self_mask``."""

    def __init__(self, d_model: int, heads: int, d_ff: int, layers: int, dropout: float):
        super().__init__()
        self.layers = clone(DecoderLayer(d_model, heads, d_ff, dropout), layers)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x, memory, memory_mask, self_mask):
        for layer in self.layers:
            x = layer(x, memory, memory_mask, self_mask)
        return self.norm(x)


def init_weights(module: nn.Module) -> None:
    for p in module.parameters():
        if p.dim() > 1:
            nn.init.xavier_uniform_(p)
