"""Small post-LayerNorm transformer blocks used by every encoder and the decoder."""

from __future__ import annotations

import math

import torch
from torch import nn


class AttentionCounter:
    """Tally of attention score entries computed, keyed by caller tag."""

    def __init__(self):
        self.entries: dict[str, int] = {}

    def add(self, tag: str, n: int) -> None:
        self.entries[tag] = self.entries.get(tag, 0) + n

    def reset(self) -> None:
        self.entries.clear()


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.counter: AttentionCounter | None = None
        self.tag = "attn"

    def forward(self, query, key, value, key_padding_mask=None, causal=False, return_weights=False):
        # query: [B, Lq, d]; key/value: [B, Lk, d]; key_padding_mask: [B, Lk], True = ignore
        B, Lq, _ = query.shape
        Lk = key.shape[1]
        q = self.q_proj(query).view(B, Lq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(key).view(B, Lk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(value).view(B, Lk, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if self.counter is not None:
            self.counter.add(self.tag, scores.numel())
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(Lq, Lk, dtype=torch.bool, device=query.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, Lq, -1)
        out = self.out_proj(out)
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Dropout(dropout), nn.Linear(d_ff, d_model))

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pad_mask=None):
        x = self.norm1(x + self.drop(self.self_attn(x, x, x, key_padding_mask=pad_mask)))
        return self.norm2(x + self.drop(self.ff(x)))


class DecoderLayer(nn.Module):
    """Self-attention, residual LayerNorm, joint cross-attention over the encoder bank, feed-forward."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, h, memory, tgt_pad_mask=None, memory_pad_mask=None, return_cross=False):
        h = self.norm1(h + self.drop(self.self_attn(h, h, h, key_padding_mask=tgt_pad_mask, causal=True)))
        cross, weights = self.cross_attn(h, memory, memory, key_padding_mask=memory_pad_mask, return_weights=True)
        h = self.norm2(h + self.drop(cross))
        h = self.norm3(h + self.drop(self.ff(h)))
        return (h, weights) if return_cross else h


class TokenEncoder(nn.Module):
    """Embedding + learned positions + a stack of encoder layers."""

    def __init__(self, vocab_size: int, d_model: int, n_heads: int, n_layers: int, d_ff: int,
                 max_positions: int, dropout: float = 0.0, embedding: nn.Embedding | None = None):
        super().__init__()
        self.embed = embedding if embedding is not None else nn.Embedding(vocab_size, d_model)
        self.pos = nn.Embedding(max_positions, d_model)
        self.layers = nn.ModuleList(EncoderLayer(d_model, n_heads, d_ff, dropout) for _ in range(n_layers))
        self.drop = nn.Dropout(dropout)

    def set_counter(self, counter: AttentionCounter | None, tag: str) -> None:
        for layer in self.layers:
            layer.self_attn.counter = counter
            layer.self_attn.tag = tag

    def forward(self, ids, pad_mask=None):
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.drop(self.embed(ids) + self.pos(positions)[None])
        for layer in self.layers:
            x = layer(x, pad_mask)
        return x


def pad_batch(seqs, pad_id: int, device=None):
    """Right-pad integer sequences into ``[B, L]`` ids and a ``True``-is-padding mask."""
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), pad_id, dtype=torch.long, device=device)
    mask = torch.ones((len(seqs), width), dtype=torch.bool, device=device)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        mask[i, : len(s)] = False
    return ids, mask
