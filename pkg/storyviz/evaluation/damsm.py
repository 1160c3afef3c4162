"""Hierarchical DAMSM: word/sentence/story image-text matching and R-precision.

Word and sentence losses follow the AttnGAN matching formulation. The story level
adds a bidirectional LSTM over sentence vectors on the text side and the mean of
frame vectors on the image side, trained with a contrastive loss in both
directions smoothed by ``story_gamma``.
"""

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence
from tqdm import tqdm

from ..config import DamsmConfig
from ..data.story import PAD_ID, make_batch
from ..discriminators import encode_image_tower
from ..errors import EvaluationError
from ..frozen import FrozenModule

logger = logging.getLogger(__name__)


@dataclass
class TextEmbedding:
    words: torch.Tensor  # (N, L, E), N = S * T
    word_mask: torch.Tensor  # (N, L)
    sentences: torch.Tensor  # (S, T, E)
    story: torch.Tensor  # (S, E)


@dataclass
class ImageEmbedding:
    regions: torch.Tensor  # (N, E, R)
    frames: torch.Tensor  # (S, T, E)
    story: torch.Tensor  # (S, E)


def _bidirectional_final(rnn, inputs, lengths=None):
    if lengths is None:
        out, (h_n, _) = rnn(inputs)
    else:
        packed = pack_padded_sequence(inputs, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, (h_n, _) = rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=inputs.shape[1])
    return out, torch.cat([h_n[-2], h_n[-1]], dim=-1)


class HDamsm(FrozenModule):
    snapshot_kind = "damsm"

    def __init__(self, vocab_size, image_size, cfg, vocab_hash=None):
        super().__init__()
        self.vocab_size = vocab_size
        self.image_size = image_size
        self.cfg = cfg
        self.vocab_hash = vocab_hash
        e = cfg.embed_dim
        self.embedding = nn.Embedding(vocab_size, e, padding_idx=PAD_ID)
        self.word_rnn = nn.LSTM(e, e // 2, batch_first=True, bidirectional=True)
        self.story_rnn = nn.LSTM(e, e // 2, batch_first=True, bidirectional=True)
        self.tower, ch = encode_image_tower(image_size, 32)
        self.region_proj = nn.Conv2d(ch, e, kernel_size=1, bias=False)
        self.global_proj = nn.Linear(e, e)

    def snapshot_header(self):
        return {
            "vocab_size": self.vocab_size,
            "vocab_hash": self.vocab_hash,
            "image_size": self.image_size,
            "damsm": asdict(self.cfg),
        }

    @classmethod
    def from_header(cls, header):
        return cls(header["vocab_size"], header["image_size"], DamsmConfig(**header["damsm"]), header["vocab_hash"])

    def encode_text(self, tokens, mask):
        """tokens/mask (S, T, L)."""
        s, t, l = tokens.shape
        flat_mask = mask.reshape(s * t, l)
        words, sentences = _bidirectional_final(
            self.word_rnn, self.embedding(tokens.reshape(s * t, l)), flat_mask.sum(dim=-1)
        )
        sentences = sentences.view(s, t, -1)
        _, story = _bidirectional_final(self.story_rnn, sentences)
        return TextEmbedding(words, flat_mask, sentences, story)

    def encode_images(self, frames):
        """frames (S, T, 3, H, W)."""
        s, t = frames.shape[:2]
        regions = self.region_proj(self.tower(frames.flatten(0, 1))).flatten(2)
        per_frame = self.global_proj(regions.mean(dim=-1)).view(s, t, -1)
        return ImageEmbedding(regions, per_frame, per_frame.mean(dim=1))


def word_match_scores(words, word_mask, regions, gamma1, gamma2):
    """Caption-image relevance R(Q_i, D_j) for every pair: (N_captions, N_images).

    Each word attends over image regions (word-normalized then region softmax with
    gamma1); the cosine between word and region context is pooled with gamma2.
    """
    logits = torch.einsum("ile,jer->ijlr", words, regions)
    word_keys = word_mask[:, None, :, None]
    attn = torch.softmax(logits.masked_fill(~word_keys, float("-inf")), dim=2)
    attn = torch.softmax(gamma1 * attn.masked_fill(~word_keys, 0.0), dim=3)
    context = torch.einsum("ijlr,jer->ijle", attn, regions)
    cos = F.cosine_similarity(words.unsqueeze(1).expand_as(context), context, dim=-1, eps=1e-8)
    pooled = (torch.exp(gamma2 * cos) * word_mask[:, None, :].to(cos.dtype)).sum(dim=-1)
    return torch.log(pooled)


def _both_directions(scores):
    labels = torch.arange(scores.shape[0], device=scores.device)
    return F.cross_entropy(scores, labels), F.cross_entropy(scores.t(), labels)


def words_loss(words, word_mask, regions, gamma1, gamma2, gamma3):
    scores = word_match_scores(words, word_mask, regions, gamma1, gamma2)
    return _both_directions(gamma3 * scores.t())


def cosine_matrix(a, b):
    return F.normalize(a, dim=-1, eps=1e-8) @ F.normalize(b, dim=-1, eps=1e-8).t()


def sentence_loss(sentences, images, gamma3):
    return _both_directions(gamma3 * cosine_matrix(images, sentences))


def story_contrastive_loss(visual, text, gamma):
    """P(t_i | v_i) = exp(g cos(v_i, t_i)) / sum_j exp(g cos(v_i, t_j)); CE both ways."""
    if visual.shape[0] < 2:
        raise EvaluationError("story contrastive loss needs a batch of at least 2 stories")
    return _both_directions(gamma * cosine_matrix(visual, text))


def damsm_losses(model, frames, tokens, mask):
    cfg = model.cfg
    text = model.encode_text(tokens, mask)
    image = model.encode_images(frames)
    w0, w1 = words_loss(text.words, text.word_mask, image.regions, cfg.gamma1, cfg.gamma2, cfg.gamma3)
    s0, s1 = sentence_loss(text.sentences.flatten(0, 1), image.frames.flatten(0, 1), cfg.gamma3)
    st0, st1 = story_contrastive_loss(image.story, text.story, cfg.story_gamma)
    return {"w0": w0, "w1": w1, "s0": s0, "s1": s1, "st0": st0, "st1": st1}


def train_h_damsm(train_ds, cfg, seed=0):
    if len(train_ds) < 2:
        raise EvaluationError("H-DAMSM training needs at least 2 stories")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = HDamsm(len(train_ds.vocab), train_ds.image_size, cfg, train_ds.vocab.checksum())
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    batch_size = max(cfg.batch_size, 2)
    best_loss, best_state = float("inf"), None
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train_ds))
        total, count = 0.0, 0
        for start in tqdm(range(0, len(order), batch_size), desc=f"damsm epoch {epoch + 1}", leave=False):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue
            batch = make_batch(train_ds, idx)
            optimizer.zero_grad()
            loss = sum(damsm_losses(model, batch.images, batch.tokens, batch.mask).values())
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), 0.25)
            optimizer.step()
            total += float(loss) * len(idx)
            count += len(idx)
        epoch_loss = total / max(count, 1)
        logger.info("📊 damsm epoch %d: loss %.4f", epoch + 1, epoch_loss)
        if epoch_loss < best_loss:
            best_loss, best_state = epoch_loss, copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    return model.freeze()


@torch.no_grad()
def story_embeddings(model, frames, tokens, mask, batch_size=32):
    """Story-level (visual, text) embeddings, each (S, E) numpy."""
    visual, text = [], []
    for start in range(0, len(frames), batch_size):
        sl = slice(start, start + batch_size)
        visual.append(model.encode_images(frames[sl]).story)
        text.append(model.encode_text(tokens[sl], mask[sl]).story)
    return torch.cat(visual).cpu().numpy(), torch.cat(text).cpu().numpy()


def r_precision(visual, text, seed=0, runs=10, mismatches=99):
    """R=1 precision of the true text among ``mismatches`` sampled others, as (mean, std) in percent.

    Mismatches are sampled without replacement within a run and independently
    across runs. The truth wins ties.
    """
    visual = np.asarray(visual, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    n = len(visual)
    if n < mismatches + 1:
        raise EvaluationError(f"R-precision needs at least {mismatches + 1} stories, got {n}")
    v = visual / np.linalg.norm(visual, axis=1, keepdims=True).clip(min=1e-12)
    t = text / np.linalg.norm(text, axis=1, keepdims=True).clip(min=1e-12)
    sims = v @ t.T
    truth = np.diag(sims)
    scores = []
    for run in range(runs):
        rng = np.random.default_rng([seed, run])
        keys = rng.random((n, n))
        np.fill_diagonal(keys, np.inf)
        others = np.argpartition(keys, mismatches - 1, axis=1)[:, :mismatches]
        best_other = np.take_along_axis(sims, others, axis=1).max(axis=1)
        scores.append(100.0 * float((truth >= best_other).mean()))
    return float(np.mean(scores)), float(np.std(scores))


def evaluate_r_precision(model, frames, tokens, mask, seed=0, runs=10, mismatches=99):
    model.verify_frozen()
    visual, text = story_embeddings(model, frames, tokens, mask)
    mean, std = r_precision(visual, text, seed, runs, mismatches)
    logger.info("📊 R-precision %.2f +- %.2f over %d stories", mean, std, len(visual))
    return mean, std
