"""MART context encoder: captions + h0 -> per-frame generator conditioning.

For k = 1..T:
    m_k, mem_k = MART(W_k, mem_{k-1})
    c_k        = attention_pool(m_k)
    g_k, q_k   = GRU([s_k ; eps_k], q_{k-1})
    o_k        = Filter([c_k ; g_k]) o tanh(W_I s_k)
"""

from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn

from .mart import AttentionPool, MartEncoder, MemoryState


@dataclass
class FrameContext:
    words: torch.Tensor  # m_k (B, L, H)
    mask: torch.Tensor  # (B, L)
    pooled: torch.Tensor  # c_k (B, H)
    gru_out: torch.Tensor  # g_k (B, d_g)
    gru_state: torch.Tensor  # q_k (B, d_g)
    noise: torch.Tensor  # eps_k (B, d_s)
    gist: torch.Tensor  # o_k (B, C_out)
    alpha: torch.Tensor  # pooling weights (B, L)


def gist_correlation(filters, signal):
    """Full-length correlation per output channel.

    filters: (B, C_out, d_p); signal: (B, d_p) -> (B, C_out).
    """
    return torch.bmm(filters, signal.unsqueeze(-1)).squeeze(-1)


class ContextEncoder(nn.Module):
    def __init__(self, mart_cfg, ctx_cfg, word_dim, sentence_dim, cond_dim):
        super().__init__()
        self.use_memory_init = ctx_cfg.use_memory_init
        self.noise_dim = sentence_dim
        self.gist_channels = ctx_cfg.gist_channels
        self.signal_dim = ctx_cfg.gist_signal_dim
        h = mart_cfg.hidden_size
        self.mart = MartEncoder(mart_cfg, word_dim, cond_dim=cond_dim if self.use_memory_init else None)
        self.pool = AttentionPool(h)
        self.gru = nn.GRUCell(sentence_dim + self.noise_dim, ctx_cfg.gru_dim)
        self.filter_net = nn.Linear(h + ctx_cfg.gru_dim, self.gist_channels * self.signal_dim)
        self.image_net = nn.Linear(sentence_dim, self.signal_dim)

    def initial_memory(self, h0):
        if self.use_memory_init:
            return self.mart.init_memory(h0)
        return self.mart.constant_memory(h0.shape[0])

    def gru_step(self, sentence, noise, q_prev):
        q = self.gru(torch.cat([sentence, noise], dim=-1), q_prev)
        return q, q

    def text2gist(self, pooled, gru_out, sentence):
        filters = self.filter_net(torch.cat([pooled, gru_out], dim=-1))
        filters = filters.view(-1, self.gist_channels, self.signal_dim)
        return gist_correlation(filters, torch.tanh(self.image_net(sentence)))

    def forward(self, words, masks, sentences, h0, generator=None, noise=None, memory: Optional[MemoryState] = None):
        """words (B, T, L, d_w), masks (B, T, L), sentences (B, T, d_s), h0 (B, d_h).

        ``noise`` (B, T, d_s) overrides the eps_k draws. Returns (contexts, final memory).
        """
        b, t = sentences.shape[:2]
        if noise is None:
            noise = torch.randn(
                (b, t, self.noise_dim), generator=generator, dtype=sentences.dtype, device=sentences.device
            )
        mem = self.initial_memory(h0) if memory is None else memory
        q = sentences.new_zeros(b, self.gru.hidden_size)
        contexts: List[FrameContext] = []
        for k in range(t):
            m_k, mem = self.mart.step(words[:, k], masks[:, k], mem)
            c_k, alpha = self.pool(m_k, masks[:, k])
            g_k, q = self.gru_step(sentences[:, k], noise[:, k], q)
            o_k = self.text2gist(c_k, g_k, sentences[:, k])
            contexts.append(FrameContext(m_k, masks[:, k], c_k, g_k, q, noise[:, k], o_k, alpha))
        return contexts, mem

    encode_context = forward
