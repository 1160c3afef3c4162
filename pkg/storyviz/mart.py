"""Memory-augmented recurrent transformer.

Each step runs ``num_layers`` transformer layers over the step's tokens; every
layer's queries also see that layer's memory cells as extra keys/values. After
the layer, memory is rewritten by a gated residual from the pooled layer output:

    new = g * candidate + (1 - g) * old

Memory is a plain value (``MemoryState``) threaded by the caller from step to step.
"""

import math
from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn as nn


@dataclass
class MemoryState:
    cells: Tuple[torch.Tensor, ...]  # one (B, M, H) tensor per layer

    def detach(self):
        return MemoryState(tuple(c.detach() for c in self.cells))

    def clone(self):
        return MemoryState(tuple(c.clone() for c in self.cells))

    def to_dict(self):
        return {"cells": [c.detach().cpu().clone() for c in self.cells]}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data["cells"]))


def masked_softmax(logits, mask, dim=-1):
    """Softmax with masked entries set to exactly zero."""
    return torch.softmax(logits.masked_fill(~mask, float("-inf")), dim=dim)


def attention_pool(encodings, mask, u):
    """alpha_i = softmax_i(m_i . u) over unmasked positions; returns (pooled, alpha).

    encodings: (B, L, H); mask: (B, L) bool; u: (H,).
    """
    alpha = masked_softmax(encodings @ u, mask)
    return torch.einsum("bl,blh->bh", alpha, encodings), alpha


class AttentionPool(nn.Module):
    def __init__(self, hidden_size):
        super().__init__()
        self.query = nn.Parameter(torch.randn(hidden_size) / math.sqrt(hidden_size))

    def forward(self, encodings, mask):
        return attention_pool(encodings, mask, self.query)


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden_size, num_heads, dropout):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_size // num_heads
        self.query = nn.Linear(hidden_size, hidden_size)
        self.key = nn.Linear(hidden_size, hidden_size)
        self.value = nn.Linear(hidden_size, hidden_size)
        self.out = nn.Linear(hidden_size, hidden_size)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, queries, keys, key_mask):
        """key_mask: (B, Lq, Lk) bool, True where the key is visible."""
        q, k, v = self._split(self.query(queries)), self._split(self.key(keys)), self._split(self.value(keys))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        probs = self.dropout(masked_softmax(scores, key_mask.unsqueeze(1)))
        context = (probs @ v).transpose(1, 2).reshape(queries.shape)
        return self.out(context)


class MemoryUpdater(nn.Module):
    def __init__(self, hidden_size):
        super().__init__()
        self.candidate = nn.Linear(2 * hidden_size, hidden_size)
        self.gate = nn.Linear(2 * hidden_size, hidden_size)

    def forward(self, memory, summary):
        """memory: (B, M, H); summary: (B, H)."""
        joint = torch.cat([memory, summary.unsqueeze(1).expand_as(memory)], dim=-1)
        g = torch.sigmoid(self.gate(joint))
        return g * torch.tanh(self.candidate(joint)) + (1 - g) * memory


class MartLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        h = cfg.hidden_size
        inter = cfg.intermediate_size or h
        self.attention = MultiHeadAttention(h, cfg.num_heads, cfg.dropout)
        self.attn_norm = nn.LayerNorm(h, eps=cfg.layer_norm_eps)
        self.ffn = nn.Sequential(nn.Linear(h, inter), nn.GELU(), nn.Linear(inter, h))
        self.ffn_norm = nn.LayerNorm(h, eps=cfg.layer_norm_eps)
        self.dropout = nn.Dropout(cfg.dropout)
        self.memory_updater = MemoryUpdater(h)

    def forward(self, hidden, mask, memory, attn_mask=None):
        b, n, _ = hidden.shape
        m = memory.shape[1]
        token_keys = mask.unsqueeze(1).expand(b, n, n)
        if attn_mask is not None:
            token_keys = token_keys & attn_mask
        key_mask = torch.cat([mask.new_ones(b, n, m), token_keys], dim=-1)
        keys = torch.cat([memory, hidden], dim=1)
        h = self.attn_norm(hidden + self.dropout(self.attention(hidden, keys, key_mask)))
        h = self.ffn_norm(h + self.dropout(self.ffn(h)))
        w = mask.unsqueeze(-1).to(h.dtype)
        summary = (h * w).sum(dim=1) / w.sum(dim=1)
        return h, self.memory_updater(memory, summary)


class MartEncoder(nn.Module):
    """Input projection + learned per-step positions + memory-augmented layers."""

    def __init__(self, cfg, input_dim, cond_dim=None, max_positions=None):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden_size
        self.input_proj = nn.Linear(input_dim, h)
        self.positions = nn.Embedding(max_positions or cfg.max_seq_len, h)
        self.input_norm = nn.LayerNorm(h, eps=cfg.layer_norm_eps)
        self.dropout = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(MartLayer(cfg) for _ in range(cfg.num_layers))
        # exactly one memory source: projected from the condition, or a learned constant
        if cond_dim is not None:
            self.memory_init = nn.ModuleList(
                nn.Linear(cond_dim, cfg.num_memory_cells * h) for _ in range(cfg.num_layers)
            )
            for proj in self.memory_init:
                nn.init.zeros_(proj.bias)
            self.memory_constant = None
        else:
            self.memory_init = None
            self.memory_constant = nn.Parameter(torch.zeros(cfg.num_layers, cfg.num_memory_cells, h))

    def init_memory(self, h0):
        """Each cell of each layer is its own learned projection of h0: (B, d_h) -> MemoryState."""
        if self.memory_init is None:
            raise ValueError("this encoder has no memory initializer; use constant_memory")
        b = h0.shape[0]
        shape = (b, self.cfg.num_memory_cells, self.cfg.hidden_size)
        return MemoryState(tuple(proj(h0).view(shape) for proj in self.memory_init))

    def constant_memory(self, batch_size):
        """Memory that ignores the story condition (non-recurrent baseline)."""
        if self.memory_constant is None:
            raise ValueError("this encoder initializes memory from the condition; use init_memory")
        return MemoryState(tuple(c.unsqueeze(0).expand(batch_size, -1, -1) for c in self.memory_constant))

    def embed(self, inputs):
        positions = torch.arange(inputs.shape[1], device=inputs.device)
        return self.dropout(self.input_norm(self.input_proj(inputs) + self.positions(positions)))

    def step(self, inputs, mask, memory, attn_mask=None, embedded=False):
        """One recurrence step: (B, L, d_in) -> ((B, L, H), new MemoryState)."""
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("mart step needs at least one unmasked position per row")
        hidden = inputs if embedded else self.embed(inputs)
        new_cells = []
        for layer, cells in zip(self.layers, memory.cells):
            hidden, updated = layer(hidden, mask, cells, attn_mask)
            new_cells.append(updated)
        return hidden, MemoryState(tuple(new_cells))

    mart_step = step
