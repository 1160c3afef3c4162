"""Word/sentence embeddings and the conditional-augmentation story encoder."""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data.story import PAD_ID
from .errors import DomainError, VocabularyError

logger = logging.getLogger(__name__)


def load_pretrained_vectors(path, vocab, dim):
    """Read a "token v1 ... vd" text file; rows for unknown tokens stay random.

    Returns (matrix, hits). Lines whose width differs from ``dim`` are skipped.
    """
    matrix = np.random.default_rng(0).normal(0.0, 0.1, size=(len(vocab), dim)).astype(np.float32)
    matrix[PAD_ID] = 0.0
    hits = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) != dim + 1 or parts[0] not in vocab:
                continue
            matrix[vocab.stoi[parts[0]]] = np.asarray(parts[1:], dtype=np.float32)
            hits += 1
    logger.info("✅ pretrained vectors: %d/%d tokens matched from %s", hits, len(vocab), path)
    return torch.from_numpy(matrix), hits


class TextEncoder(nn.Module):
    """Trainable word table + mask-aware mean pooled into a sentence vector."""

    def __init__(self, vocab_size, word_dim, sentence_dim):
        super().__init__()
        self.vocab_size = vocab_size
        self.embedding = nn.Embedding(vocab_size, word_dim, padding_idx=PAD_ID)
        self.sentence_proj = nn.Linear(word_dim, sentence_dim)

    def set_pretrained(self, matrix):
        with torch.no_grad():
            self.embedding.weight.copy_(matrix)
            self.embedding.weight[PAD_ID].zero_()

    def forward(self, tokens, mask):
        """tokens/mask: (..., L). Returns word (..., L, d_w) and sentence (..., d_s)."""
        if tokens.numel() and (int(tokens.max()) >= self.vocab_size or int(tokens.min()) < 0):
            raise VocabularyError(f"token id outside the vocabulary of size {self.vocab_size}")
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("every caption needs at least one unpadded token")
        m = mask.unsqueeze(-1).to(self.embedding.weight.dtype)
        words = self.embedding(tokens) * m
        mean = words.sum(dim=-2) / m.sum(dim=-2)
        return words, self.sentence_proj(mean)

    embed_caption = forward


@dataclass
class ConditioningState:
    """Story posterior N(mu, diag(sigma^2)) and the sample h0 = mu + sigma * eps."""

    mu: torch.Tensor
    logvar: torch.Tensor
    eps: torch.Tensor
    h0: torch.Tensor

    @property
    def sigma_sq(self):
        return self.logvar.exp()

    @property
    def sigma(self):
        return (0.5 * self.logvar).exp()

    def detach(self):
        return ConditioningState(self.mu.detach(), self.logvar.detach(), self.eps.detach(), self.h0.detach())


class StoryEncoder(nn.Module):
    """Conditional augmentation over the concatenated T sentence embeddings."""

    def __init__(self, story_length, sentence_dim, cond_dim):
        super().__init__()
        self.story_length = story_length
        self.cond_dim = cond_dim
        self.fc = nn.Linear(story_length * sentence_dim, 2 * cond_dim)

    def forward(self, sentences, generator=None, eps=None):
        """sentences: (B, T, d_s). ``eps`` overrides the Gaussian draw when given."""
        if sentences.shape[1] != self.story_length:
            raise ValueError(f"expected {self.story_length} sentences per story, got {sentences.shape[1]}")
        stats = self.fc(sentences.flatten(1))
        mu, logvar = stats[:, : self.cond_dim], stats[:, self.cond_dim :]
        if eps is None:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        h0 = mu + (0.5 * logvar).exp() * eps
        return ConditioningState(mu, logvar, eps, h0)

    encode_story = forward


def gaussian_kl(mu, sigma_sq):
    """KL(N(mu, diag(sigma_sq)) || N(0, I)), summed over dims, averaged over batch."""
    if bool((sigma_sq <= 0).any()):
        raise DomainError("sigma^2 must be strictly positive")
    kl = 0.5 * (mu.pow(2) + sigma_sq - sigma_sq.log() - 1.0)
    return kl.sum(dim=-1).mean() if kl.dim() > 1 else kl.sum()


def kl_loss(state):
    return gaussian_kl(state.mu, state.sigma_sq)
