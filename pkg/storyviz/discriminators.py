"""Image and story discriminators and the adversarial losses."""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_EPS = 1e-8


@dataclass
class DiscOutput:
    prob: torch.Tensor  # (N,) in (0, 1)
    char_logits: torch.Tensor = None  # (N, C)


def encode_image_tower(image_size, ndf):
    """Stride-2 conv stack down to a 4x4 map with ndf * 2^(n-1) channels."""
    n_down = int(math.log2(image_size // 4))
    layers, ch_in, ch_out = [], 3, ndf
    for i in range(n_down):
        layers.append(nn.Conv2d(ch_in, ch_out, 4, 2, 1, bias=False))
        if i > 0:
            layers.append(nn.BatchNorm2d(ch_out))
        layers.append(nn.LeakyReLU(0.2, inplace=True))
        ch_in, ch_out = ch_out, ch_out * 2
    return nn.Sequential(*layers), ch_in


class ImageDiscriminator(nn.Module):
    """Local consistency: (frame, s_k, h0) -> real/fake prob, plus character logits."""

    def __init__(self, image_size, ndf, sentence_dim, cond_dim, num_characters):
        super().__init__()
        self.encoder, ch = encode_image_tower(image_size, ndf)
        self.cond_dim = ndf
        self.cond_proj = nn.Sequential(nn.Linear(sentence_dim + cond_dim, ndf), nn.LeakyReLU(0.2, inplace=True))
        self.judge = nn.Sequential(
            nn.Conv2d(ch + ndf, ch, 3, 1, 1, bias=False),
            nn.BatchNorm2d(ch),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(ch, 1, kernel_size=4, stride=4),
        )
        self.char_head = nn.Sequential(
            nn.Conv2d(ch, ch, kernel_size=4, stride=4),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Flatten(),
            nn.Linear(ch, num_characters),
        )

    def forward(self, images, sentences, h0):
        features = self.encoder(images)
        cond = self.cond_proj(torch.cat([sentences, h0], dim=-1))
        cond = cond.view(-1, self.cond_dim, 1, 1).expand(-1, -1, features.shape[2], features.shape[3])
        logit = self.judge(torch.cat([features, cond], dim=1)).view(-1)
        return DiscOutput(torch.sigmoid(logit), self.char_head(features))

    image_disc = forward


class StoryDiscriminator(nn.Module):
    """Global consistency: (T frames, story embedding S) -> real/fake prob."""

    def __init__(self, image_size, ndf, story_length, sentence_dim, feature_dim=64):
        super().__init__()
        self.story_length = story_length
        self.encoder, ch = encode_image_tower(image_size, ndf)
        self.frame_head = nn.Sequential(nn.Conv2d(ch, feature_dim, kernel_size=4, stride=4), nn.Flatten())
        self.story_proj = nn.Linear(story_length * sentence_dim, feature_dim)
        self.judge = nn.Sequential(
            nn.Linear((story_length + 1) * feature_dim, feature_dim),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Linear(feature_dim, 1),
        )

    def forward(self, frames, sentences):
        """frames (B, T, 3, H, W); sentences (B, T, d_s)."""
        b, t = frames.shape[:2]
        if t != self.story_length or sentences.shape[1] != self.story_length:
            raise ValueError(f"story discriminator expects T={self.story_length} frames, got {t}")
        per_frame = self.frame_head(self.encoder(frames.flatten(0, 1))).view(b, -1)
        story = self.story_proj(sentences.flatten(1))
        return torch.sigmoid(self.judge(torch.cat([per_frame, story], dim=-1)).view(-1))

    story_disc = forward


def _log(p):
    return torch.log(p.clamp(min=LOG_EPS))


def _log1m(p):
    return torch.log((1.0 - p).clamp(min=LOG_EPS))


def generator_adv_loss(img_fake_probs, story_fake_probs):
    """-1/2 E[log D_img(fake)] - 1/2 E[log D_story(fake)]."""
    return -0.5 * _log(img_fake_probs).mean() - 0.5 * _log(story_fake_probs).mean()


def image_disc_loss(real_probs, fake_probs):
    return -0.5 * _log(real_probs).mean() - 0.5 * _log1m(fake_probs).mean()


def story_disc_loss(real_probs, fake_probs):
    return -0.5 * _log(real_probs).mean() - 0.5 * _log1m(fake_probs).mean()


def char_loss(char_logits, char_labels):
    """Mean per-label binary cross-entropy on real frames."""
    return F.binary_cross_entropy_with_logits(char_logits, char_labels.to(char_logits.dtype))


@dataclass
class DiscriminatorLosses:
    image: torch.Tensor
    story: torch.Tensor
    char: torch.Tensor


def discriminator_losses(real_img, fake_img, real_story, fake_story, char_logits, char_labels):
    return DiscriminatorLosses(
        image_disc_loss(real_img, fake_img),
        story_disc_loss(real_story, fake_story),
        char_loss(char_logits, char_labels),
    )
