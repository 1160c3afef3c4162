"""MART video captioner: the frozen dual network and the BLEU evaluation captioner.

At frame k the recurrent transformer reads [memory ; N region tokens ; caption
tokens]. Region tokens see each other; caption tokens see all regions and the
caption prefix. Memory carries across frames (``mart_video``) or is reset every
frame (``transformer_image``).
"""

import copy
import logging
from dataclasses import asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from .config import CaptionerConfig, MartConfig
from .data.story import BOS_ID, EOS_ID, PAD_ID, make_batch
from .errors import DataIntegrityError, FrozenModelError
from .frozen import FrozenModule
from .mart import MartEncoder

logger = logging.getLogger(__name__)


class RegionFeatureExtractor(nn.Module):
    """Image (3, H, W) -> N = (H/8)^2 region vectors of size d_f."""

    def __init__(self, region_dim, base_channels=32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, base_channels, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(base_channels, base_channels * 2, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(base_channels * 2, region_dim, 4, 2, 1),
        )

    def forward(self, images):
        return self.net(images).flatten(2).transpose(1, 2)


def caption_targets(tokens, mask):
    """Teacher-forcing frame: inputs ``<bos> w1..wn``, targets ``w1..wn <eos>``.

    tokens/mask (..., L) -> inputs, targets, target_mask of shape (..., L + 1).
    """
    lengths = mask.sum(dim=-1, keepdim=True)
    pad = tokens.new_full(tokens.shape[:-1] + (1,), PAD_ID)
    bos = tokens.new_full(tokens.shape[:-1] + (1,), BOS_ID)
    inputs = torch.cat([bos, tokens], dim=-1)
    targets = torch.cat([tokens, pad], dim=-1).scatter(-1, lengths, EOS_ID)
    positions = torch.arange(tokens.shape[-1] + 1, device=tokens.device)
    return inputs, targets, positions <= lengths


def dual_loss(log_probs, targets, target_mask):
    """Mean negative log-likelihood of the target tokens over unmasked positions."""
    nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    w = target_mask.to(nll.dtype)
    return (nll * w).sum() / w.sum()


class VideoCaptioner(FrozenModule):
    snapshot_kind = "captioner"

    def __init__(self, mart_cfg, cap_cfg, vocab_size, image_size, max_caption_len, vocab_hash=None):
        super().__init__()
        self.mart_cfg = mart_cfg
        self.cap_cfg = cap_cfg
        self.vocab_size = vocab_size
        self.vocab_hash = vocab_hash
        self.image_size = image_size
        self.max_caption_len = max_caption_len
        self.num_regions = (image_size // 8) ** 2
        self.recurrent = cap_cfg.variant == "mart_video"
        h = mart_cfg.hidden_size
        self.extractor = RegionFeatureExtractor(cap_cfg.region_dim)
        self.region_proj = nn.Linear(cap_cfg.region_dim, h)
        self.token_emb = nn.Embedding(vocab_size, h, padding_idx=PAD_ID)
        self.type_emb = nn.Embedding(2, h)
        self.mart = MartEncoder(mart_cfg, h, max_positions=self.num_regions + max_caption_len + 1)
        self.head = nn.Linear(h, vocab_size)

    def snapshot_header(self):
        return {
            "mart": asdict(self.mart_cfg),
            "captioner": asdict(self.cap_cfg),
            "vocab_size": self.vocab_size,
            "vocab_hash": self.vocab_hash,
            "image_size": self.image_size,
            "max_caption_len": self.max_caption_len,
        }

    @classmethod
    def from_header(cls, header):
        return cls(
            MartConfig(**header["mart"]),
            CaptionerConfig(**header["captioner"]),
            header["vocab_size"],
            header["image_size"],
            header["max_caption_len"],
            header["vocab_hash"],
        )

    def extract_region_features(self, images):
        """(..., 3, H, W) -> (..., N, d_f); differentiable w.r.t. the pixels."""
        lead = images.shape[:-3]
        feats = self.extractor(images.reshape(-1, *images.shape[-3:]))
        return feats.view(*lead, *feats.shape[1:])

    def _attn_mask(self, n_text, device):
        n = self.num_regions + n_text
        allowed = torch.zeros(n, n, dtype=torch.bool, device=device)
        allowed[:, : self.num_regions] = True
        allowed[self.num_regions :, self.num_regions :] = torch.tril(
            torch.ones(n_text, n_text, dtype=torch.bool, device=device)
        )
        return allowed

    def _step(self, regions, text_in, text_mask, memory):
        b = regions.shape[0]
        dev = regions.device
        region_tokens = self.region_proj(regions) + self.type_emb.weight[0]
        text_tokens = self.token_emb(text_in) + self.type_emb.weight[1]
        inputs = torch.cat([region_tokens, text_tokens], dim=1)
        mask = torch.cat([text_mask.new_ones(b, self.num_regions), text_mask], dim=1)
        attn = self._attn_mask(text_in.shape[1], dev).unsqueeze(0).expand(b, -1, -1)
        hidden, memory = self.mart.step(inputs, mask, memory, attn_mask=attn)
        logits = self.head(hidden[:, self.num_regions :])
        return F.log_softmax(logits, dim=-1), memory

    def forward(self, features, tokens, mask):
        """Teacher-forced: features (B, T, N, d_f), tokens/mask (B, T, L).

        Returns log-probs (B, T, L+1, V), targets and target mask (B, T, L+1).
        """
        b, t = features.shape[:2]
        inputs, targets, target_mask = caption_targets(tokens, mask)
        memory = self.mart.constant_memory(b)
        outputs = []
        for k in range(t):
            if not self.recurrent:
                memory = self.mart.constant_memory(b)
            log_probs, memory = self._step(features[:, k], inputs[:, k], target_mask[:, k], memory)
            outputs.append(log_probs)
        return torch.stack(outputs, dim=1), targets, target_mask

    @torch.no_grad()
    def greedy_decode(self, features, max_len=None):
        """features (B, T, N, d_f) -> tokens (B, T, L), mask (B, T, L); no specials."""
        max_len = max_len or self.max_caption_len
        b, t = features.shape[:2]
        dev = features.device
        out_tokens = torch.full((b, t, max_len), PAD_ID, dtype=torch.long, device=dev)
        memory = self.mart.constant_memory(b)
        banned = torch.tensor([PAD_ID, BOS_ID], device=dev)
        for k in range(t):
            if not self.recurrent:
                memory = self.mart.constant_memory(b)
            prefix = torch.full((b, 1), BOS_ID, dtype=torch.long, device=dev)
            finished = torch.zeros(b, dtype=torch.bool, device=dev)
            for pos in range(max_len + 1):
                prefix_mask = torch.ones_like(prefix, dtype=torch.bool)
                log_probs, _ = self._step(features[:, k], prefix, prefix_mask, memory)
                scores = log_probs[:, -1].clone()
                scores[:, banned] = float("-inf")
                if pos == max_len:
                    break
                nxt = scores.argmax(dim=-1)
                nxt = torch.where(finished, torch.full_like(nxt, EOS_ID), nxt)
                finished |= nxt == EOS_ID
                write = ~finished
                out_tokens[write, k, pos] = nxt[write]
                prefix = torch.cat([prefix, nxt.unsqueeze(1)], dim=1)
                if bool(finished.all()):
                    break
            frame_mask = out_tokens[:, k] != PAD_ID
            text_in, _, text_mask = caption_targets(out_tokens[:, k], frame_mask)
            _, memory = self._step(features[:, k], text_in, text_mask, memory)
        return out_tokens, out_tokens != PAD_ID

    def caption_story(self, features, tokens=None, mask=None):
        if tokens is not None:
            return self(features, tokens, mask)
        return self.greedy_decode(features)


class DualLoss:
    """L_dual for generated frames; needs a pretrained, frozen captioner."""

    def __init__(self, captioner):
        if not getattr(captioner, "frozen", False):
            raise FrozenModelError("dual loss requires a pretrained and frozen captioner")
        self.captioner = captioner

    def __call__(self, frames, tokens, mask):
        if not self.captioner.frozen:
            raise FrozenModelError("dual loss requires a pretrained and frozen captioner")
        features = self.captioner.extract_region_features(frames)
        log_probs, targets, target_mask = self.captioner(features, tokens, mask)
        return dual_loss(log_probs, targets, target_mask)


def _story_batches(dataset, batch_size, rng=None):
    order = np.arange(len(dataset)) if rng is None else rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield make_batch(dataset, order[start : start + batch_size])


def captioner_loss(captioner, batch):
    features = captioner.extract_region_features(batch.images)
    log_probs, targets, target_mask = captioner(features, batch.tokens, batch.mask)
    return dual_loss(log_probs, targets, target_mask)


@torch.no_grad()
def evaluate_captioner_loss(captioner, dataset, batch_size):
    captioner.eval()
    total, count = 0.0, 0
    for batch in _story_batches(dataset, batch_size):
        total += float(captioner_loss(captioner, batch)) * len(batch)
        count += len(batch)
    return total / max(count, 1)


@torch.no_grad()
def greedy_token_accuracy(captioner, dataset, batch_size=32):
    """Fraction of ground-truth caption positions reproduced by greedy decoding."""
    captioner.eval()
    hits, total = 0, 0
    for batch in _story_batches(dataset, batch_size):
        decoded, _ = captioner.greedy_decode(captioner.extract_region_features(batch.images))
        hits += int(((decoded == batch.tokens) & batch.mask).sum())
        total += int(batch.mask.sum())
    return hits / max(total, 1)


def pretrain_captioner(train_ds, val_ds, mart_cfg, cap_cfg, seed=0):
    """Cross-entropy training until the validation loss plateaus; returns a frozen captioner."""
    if len(train_ds) == 0:
        raise DataIntegrityError("cannot pretrain the captioner on an empty dataset")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    captioner = VideoCaptioner(
        mart_cfg, cap_cfg, len(train_ds.vocab), train_ds.image_size, train_ds.max_caption_len,
        train_ds.vocab.checksum(),
    )
    optimizer = torch.optim.Adam(captioner.parameters(), lr=cap_cfg.lr)
    best_loss, best_state, stale = float("inf"), None, 0
    history = []
    for epoch in range(cap_cfg.max_epochs):
        captioner.train()
        batches = list(_story_batches(train_ds, cap_cfg.batch_size, rng))
        for batch in tqdm(batches, desc=f"captioner epoch {epoch + 1}", leave=False):
            optimizer.zero_grad()
            loss = captioner_loss(captioner, batch)
            loss.backward()
            optimizer.step()
        val_loss = evaluate_captioner_loss(captioner, val_ds if len(val_ds) else train_ds, cap_cfg.batch_size)
        history.append(val_loss)
        logger.info("📊 captioner epoch %d: val loss %.4f", epoch + 1, val_loss)
        if val_loss < best_loss - 1e-4:
            best_loss, best_state, stale = val_loss, copy.deepcopy(captioner.state_dict()), 0
        else:
            stale += 1
            if stale >= cap_cfg.patience:
                logger.info("🔄 captioner plateaued after %d epochs", epoch + 1)
                break
    if best_state is not None:
        captioner.load_state_dict(best_state)
    captioner.history = history
    return captioner.freeze()
