"""Two-stage frame generator with copy-transform from the previous frame."""

import math
from dataclasses import dataclass
from typing import List

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.utils import make_grid, save_image

from .context_encoder import ContextEncoder, FrameContext
from .data.story import make_batch
from .mart import masked_softmax
from .text_encoder import ConditioningState, StoryEncoder, TextEncoder


def conv3x3(in_planes, out_planes):
    return nn.Conv2d(in_planes, out_planes, kernel_size=3, stride=1, padding=1, bias=False)


def up_block(in_planes, out_planes):
    """Nearest x2 upsample, conv, norm, ReLU."""
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        conv3x3(in_planes, out_planes),
        nn.BatchNorm2d(out_planes),
        nn.ReLU(True),
    )


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.block = nn.Sequential(
            conv3x3(channels, channels),
            nn.BatchNorm2d(channels),
            nn.ReLU(True),
            conv3x3(channels, channels),
            nn.BatchNorm2d(channels),
        )

    def forward(self, x):
        return F.relu(x + self.block(x))


def word_region_attention(regions, words, mask):
    """beta_{ji} = softmax_i(h_j . w_i); context_j = sum_i beta_{ji} w_i.

    regions: (B, D, N) sub-region columns; words: (B, L, D) projected words;
    mask: (B, L). Returns context (B, D, N) and beta (B, N, L).
    """
    logits = regions.transpose(1, 2) @ words.transpose(1, 2)
    beta = masked_softmax(logits, mask.unsqueeze(1))
    return (beta @ words).transpose(1, 2), beta


@dataclass
class GeneratedFrame:
    image: torch.Tensor  # (B, 3, H, W) in [-1, 1]
    low_res: torch.Tensor  # (B, 3, H/2, W/2)
    stage1_features: torch.Tensor  # (B, D_i, (H/2)^2)
    stage2_features: torch.Tensor  # (B, D_i, N)
    word_attention: torch.Tensor  # (B, (H/2)^2, L)
    copy_attention: torch.Tensor  # (B, N, L)


@dataclass
class StoryOutput:
    frames: torch.Tensor  # (B, T, 3, H, W)
    low_res: torch.Tensor  # (B, T, 3, H/2, W/2)
    state: ConditioningState
    sentences: torch.Tensor  # (B, T, d_s)
    contexts: List[FrameContext]
    details: List[GeneratedFrame]


class CopyTransform(nn.Module):
    """Attend from current-frame words onto previous-frame sub-region features."""

    def __init__(self, word_dim, feature_dim):
        super().__init__()
        self.proj = nn.Linear(word_dim, feature_dim, bias=False)

    def forward(self, words, mask, prev_features):
        return word_region_attention(prev_features, self.proj(words), mask)


class Stage1(nn.Module):
    def __init__(self, gist_dim, base_channels, image_size):
        super().__init__()
        n_up = int(math.log2(image_size // 2 // 4))
        top = base_channels * 2 ** n_up
        self.top = top
        self.fc = nn.Sequential(nn.Linear(gist_dim, top * 4 * 4), nn.ReLU(True))
        blocks, ch = [], top
        for _ in range(n_up):
            blocks.append(up_block(ch, ch // 2))
            ch //= 2
        self.upsample = nn.Sequential(*blocks)
        self.rgb = nn.Sequential(conv3x3(base_channels, 3), nn.Tanh())

    def forward(self, gist):
        h = self.fc(gist).view(-1, self.top, 4, 4)
        features = self.upsample(h)
        return self.rgb(features), features


class Stage2(nn.Module):
    def __init__(self, word_dim, base_channels, feature_grid):
        super().__init__()
        ch = base_channels
        self.feature_grid = feature_grid
        self.word_proj = nn.Linear(word_dim, ch, bias=False)
        self.joint = nn.Sequential(conv3x3(3 * ch, ch), nn.BatchNorm2d(ch), nn.ReLU(True))
        self.residual = nn.Sequential(ResBlock(ch), ResBlock(ch))
        self.upsample = up_block(ch, ch // 2)
        self.rgb = nn.Sequential(conv3x3(ch // 2, 3), nn.Tanh())

    def forward(self, stage1_map, words, mask, copy_context):
        b, d, hh, ww = stage1_map.shape
        regions = stage1_map.flatten(2)
        word_ctx, beta = word_region_attention(regions, self.word_proj(words), mask)
        g = self.feature_grid
        copy_map = F.interpolate(copy_context.view(b, d, g, g), size=(hh, ww), mode="nearest")
        joint = torch.cat([stage1_map, word_ctx.view(b, d, hh, ww), copy_map], dim=1)
        features = self.residual(self.joint(joint))
        image = self.rgb(self.upsample(features))
        pooled = F.adaptive_avg_pool2d(features, g).flatten(2)
        return image, pooled, beta


class StoryGenerator(nn.Module):
    """Captions -> frames: text encoder, story encoder, context encoder, two stages."""

    def __init__(self, cfg, vocab_size):
        super().__init__()
        d = cfg.data
        self.story_length = d.story_length
        self.image_size = d.image_size
        self.feature_dim = cfg.generator.base_channels
        self.feature_grid = cfg.generator.feature_grid
        self.text_encoder = TextEncoder(vocab_size, cfg.text.word_dim, cfg.text.sentence_dim)
        self.story_encoder = StoryEncoder(d.story_length, cfg.text.sentence_dim, cfg.text.cond_dim)
        self.context_encoder = ContextEncoder(
            cfg.mart, cfg.context, cfg.text.word_dim, cfg.text.sentence_dim, cfg.text.cond_dim
        )
        hidden = cfg.mart.hidden_size
        self.stage1 = Stage1(cfg.context.gist_channels, self.feature_dim, d.image_size)
        self.use_copy_transform = cfg.generator.use_copy_transform
        # without it, Stage 2 sees a zero copy context and frames do not read the previous frame
        self.copy_transform = CopyTransform(hidden, self.feature_dim) if self.use_copy_transform else None
        self.stage2 = Stage2(hidden, self.feature_dim, self.feature_grid)

    def zero_features(self, batch_size, device=None, dtype=None):
        n = self.feature_grid ** 2
        return torch.zeros(batch_size, self.feature_dim, n, device=device, dtype=dtype)

    def generate_frame(self, context, prev_features):
        low_res, stage1_map = self.stage1(context.gist)
        if self.copy_transform is not None:
            copy_ctx, copy_beta = self.copy_transform(context.words, context.mask, prev_features)
        else:
            copy_ctx = torch.zeros_like(prev_features)
            copy_beta = prev_features.new_zeros(prev_features.shape[0], prev_features.shape[2], context.words.shape[1])
        image, pooled, beta = self.stage2(stage1_map, context.words, context.mask, copy_ctx)
        return GeneratedFrame(image, low_res, stage1_map.flatten(2), pooled, beta, copy_beta)

    def encode_text(self, tokens, mask):
        return self.text_encoder(tokens, mask)

    def forward(self, tokens, mask, generator=None, state=None, noise=None):
        """tokens/mask (B, T, L). ``state`` pins the story condition (skips sampling)."""
        words, sentences = self.text_encoder(tokens, mask)
        if state is None:
            state = self.story_encoder(sentences, generator=generator)
        contexts, _ = self.context_encoder(words, mask, sentences, state.h0, generator=generator, noise=noise)
        prev = self.zero_features(tokens.shape[0], tokens.device, sentences.dtype)
        details = []
        for context in contexts:
            frame = self.generate_frame(context, prev)
            details.append(frame)
            prev = frame.stage2_features
        frames = torch.stack([f.image for f in details], dim=1)
        low_res = torch.stack([f.low_res for f in details], dim=1)
        return StoryOutput(frames, low_res, state, sentences, contexts, details)

    generate_story = forward


def save_story_grid(path, generated, real=None):
    """One row per story (T columns); with ``real``, a ground-truth row precedes each generated row."""
    b, t = generated.shape[:2]
    rows = []
    for i in range(b):
        if real is not None:
            rows.append(real[i])
        rows.append(generated[i])
    grid = make_grid(torch.cat(rows).detach().cpu(), nrow=t, normalize=True, value_range=(-1, 1), padding=2)
    save_image(grid, path)
    return path


@torch.no_grad()
def generate_for_dataset(model, dataset, seed=0, batch_size=16):
    """Generate every story of ``dataset`` in id order: (S, T, 3, H, W) on the CPU."""
    was_training = model.training
    model.eval()
    rng = torch.Generator().manual_seed(seed)
    out = []
    for start in range(0, len(dataset), batch_size):
        batch = make_batch(dataset, range(start, min(start + batch_size, len(dataset))))
        out.append(model(batch.tokens, batch.mask, generator=rng).frames.cpu())
    model.train(was_training)
    return torch.cat(out)
